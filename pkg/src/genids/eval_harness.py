"""Confusion matrices and the detection metrics reported per attack and overall.

Undefined ratios (zero denominators) are ``None`` and print as "-".
"""

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .can_ingest import ATTACK_LABELS, N_CLASSES, ClassLabel

REPORT_SCHEMA = "genids-eval-report"
REPORT_VERSION = 1


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (true, predicted)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pairs: Iterable[Tuple[int, int]]) -> ConfusionMatrix:
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("no (true, predicted) pairs")
    return confusion_from_arrays(arr[:, 0], arr[:, 1])


def confusion_from_arrays(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("true and predicted label arrays differ in length")
    if y_true.size == 0:
        raise ValueError("no (true, predicted) pairs")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return ConfusionMatrix(cm)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def per_attack_metrics(cm: ConfusionMatrix, attack: ClassLabel) -> Dict[str, Optional[float]]:
    """One-vs-rest metrics restricted to frames whose true label is Normal or ``attack``."""
    attack = ClassLabel(attack)
    if attack == ClassLabel.NORMAL:
        raise ValueError("per-attack metrics need an attack label")
    c = cm.counts
    a, n = int(attack), int(ClassLabel.NORMAL)
    tp = int(c[a, a])
    fn = int(c[a].sum()) - tp
    fp = int(c[n, a])
    tn = int(c[n].sum()) - fp
    total = tp + fn + fp + tn
    if total == 0:
        raise ValueError(f"no Normal or {attack.display} frames to evaluate")
    precision = _ratio(tp, tp + fp)
    tpr = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and tpr is not None and precision + tpr > 0:
        f1 = 2 * precision * tpr / (precision + tpr)
    return {"accuracy": (tp + tn) / total, "precision": precision, "tpr": tpr,
            "fpr": _ratio(fp, fp + tn), "f1": f1}


def overall_metrics(cm: ConfusionMatrix) -> Dict[str, Optional[float]]:
    c = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    n = int(ClassLabel.NORMAL)
    normal_total = int(c[n].sum())
    attack_total = total - normal_total
    attack_as_normal = int(c[:, n].sum() - c[n, n])
    return {
        "accuracy": float(np.trace(c)) / total,
        "fpr": _ratio(normal_total - int(c[n, n]), normal_total),
        "fnr": _ratio(attack_as_normal, attack_total),
    }


@dataclass
class EvalReport:
    overall: Dict[str, Optional[float]]
    per_attack: Dict[str, Dict[str, Optional[float]]]
    confusion: list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "overall": self.overall,
                "per_attack": self.per_attack, "confusion": self.confusion, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise ValueError("not a genids evaluation report (or unsupported version)")
        return cls(d["overall"], d["per_attack"], d["confusion"], d.get("meta", {}))


def build_report(cm: ConfusionMatrix, meta: Optional[dict] = None) -> EvalReport:
    per_attack = {}
    for lab in ATTACK_LABELS:
        try:
            per_attack[lab.display] = per_attack_metrics(cm, lab)
        except ValueError:
            continue
    return EvalReport(overall_metrics(cm), per_attack, cm.counts.tolist(), meta or {})


def format_rate(v: Optional[float], scientific_below: Optional[float] = None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if scientific_below is not None and 0 < v < scientific_below:
        return f"{v:.4e}"
    return f"{v:.4f}"


_ATTACK_NAMES = {"DoS": "DoS Attack", "Fuzzy": "Fuzzy Attack", "Gear": "Gear Spoofing Attack",
                 "RPM": "RPM Spoofing Attack"}


def _text(report: EvalReport) -> str:
    o = report.overall
    lines = [
        "Overall",
        f"  accuracy  {format_rate(o['accuracy'])}",
        f"  FPR       {format_rate(o['fpr'], 1e-4)}",
        f"  FNR       {format_rate(o['fnr'], 1e-4)}",
        "",
    ]
    head = ("Attacks", "Accuracy", "Precisions", "TPR", "FPR", "F1-score")
    rows = []
    for name, m in report.per_attack.items():
        rows.append((_ATTACK_NAMES.get(name, name), format_rate(m["accuracy"]), format_rate(m["precision"]),
                     format_rate(m["tpr"]), format_rate(m["fpr"], 1e-4), format_rate(m["f1"])))
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
    fmt = " | ".join("{:<%d}" % w for w in widths)
    lines.append(fmt.format(*head))
    lines.append("-+-".join("-" * w for w in widths))
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if fmt == "text":
        return _text(report)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))
