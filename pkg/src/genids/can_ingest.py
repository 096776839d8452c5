"""CAN log ingestion, train/test splitting and balanced training subsets.

The default :class:`LogFormat` matches the Car-hacking dataset CSV layout::

    Timestamp,ID,DLC,DATA[0],...,DATA[DLC-1],Flag

i.e. frames shorter than 8 bytes also have fewer columns and the flag sits
right after the last payload byte. ``R`` marks a normal frame, ``T`` an
injected one whose attack type comes from the capture file name.
"""

import configparser
import enum
import io
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAX_STD_ID = 0x7FF
MAX_REJECT_FRACTION = 0.01


class ClassLabel(enum.IntEnum):
    NORMAL = 0
    DOS = 1
    FUZZY = 2
    GEAR_SPOOF = 3
    RPM_SPOOF = 4

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        key = re.sub(r"[^a-z]", "", text.lower())
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown class label {text!r}") from None


_DISPLAY = {
    ClassLabel.NORMAL: "Normal",
    ClassLabel.DOS: "DoS",
    ClassLabel.FUZZY: "Fuzzy",
    ClassLabel.GEAR_SPOOF: "Gear",
    ClassLabel.RPM_SPOOF: "RPM",
}
_ALIASES = {
    "normal": ClassLabel.NORMAL, "dos": ClassLabel.DOS, "fuzzy": ClassLabel.FUZZY,
    "gear": ClassLabel.GEAR_SPOOF, "gearspoof": ClassLabel.GEAR_SPOOF,
    "rpm": ClassLabel.RPM_SPOOF, "rpmspoof": ClassLabel.RPM_SPOOF,
}
N_CLASSES = len(ClassLabel)
ATTACK_LABELS = tuple(l for l in ClassLabel if l != ClassLabel.NORMAL)


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    label: ClassLabel = ClassLabel.NORMAL

    def __post_init__(self):
        if len(self.payload) != self.dlc:
            raise ValueError(f"payload length {len(self.payload)} != dlc {self.dlc}")
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"dlc {self.dlc} outside 0..8")
        if not 0 <= self.can_id <= MAX_STD_ID:
            raise ValueError("id exceeds 11-bit range")
        if not self.timestamp >= 0.0:
            raise ValueError(f"negative or NaN timestamp {self.timestamp}")


class IngestError(RuntimeError):
    """Fatal ingestion failure (unreadable file or too many malformed rows)."""


@dataclass
class LogFormat:
    """Column layout of a CSV CAN log.

    ``flag_col`` may be ``None``, meaning "the column right after the payload"
    (the Car-hacking layout). ``flags`` maps flag text to a label name, or to
    ``"@file"`` for "the attack type of this capture".
    """
    timestamp_col: int = 0
    id_col: int = 1
    dlc_col: int = 2
    payload_col: int = 3
    flag_col: Optional[int] = None
    delimiter: str = ","
    flags: Dict[str, str] = field(default_factory=lambda: {"R": "Normal", "T": "@file"})
    file_labels: Dict[str, str] = field(default_factory=lambda: {
        "dos": "DoS", "fuzzy": "Fuzzy", "gear": "Gear", "rpm": "RPM"})
    comment: str = "#"

    def label_for_file(self, name: str) -> Optional[ClassLabel]:
        """First file-name rule (case-insensitive substring) that matches."""
        low = name.lower()
        for pattern, label in self.file_labels.items():
            if pattern.lower() in low:
                return ClassLabel.parse(label)
        return None

    def to_dict(self) -> dict:
        return {
            "timestamp_col": self.timestamp_col, "id_col": self.id_col, "dlc_col": self.dlc_col,
            "payload_col": self.payload_col, "flag_col": self.flag_col, "delimiter": self.delimiter,
            "flags": dict(self.flags), "file_labels": dict(self.file_labels), "comment": self.comment,
        }

    @classmethod
    def from_config(cls, parser: configparser.ConfigParser) -> "LogFormat":
        """Read a ``[log_format]`` section plus optional ``[flags]`` / ``[file_labels]``."""
        fmt = cls()
        if parser.has_section("log_format"):
            sec = parser["log_format"]
            for key in ("timestamp_col", "id_col", "dlc_col", "payload_col"):
                if key in sec:
                    setattr(fmt, key, sec.getint(key))
            if "flag_col" in sec:
                raw = sec["flag_col"].strip().lower()
                fmt.flag_col = None if raw in ("", "auto", "none") else int(raw)
            if "delimiter" in sec:
                fmt.delimiter = sec["delimiter"].strip() or ","
        if parser.has_section("flags"):
            fmt.flags = {k.upper() if len(k) == 1 else k: v for k, v in parser["flags"].items()}
        if parser.has_section("file_labels"):
            fmt.file_labels = dict(parser["file_labels"].items())
        for target in fmt.flags.values():
            if target != "@file":
                ClassLabel.parse(target)
        return fmt


@dataclass
class Reject:
    row: int  # 1-based line number
    reason: str


@dataclass
class ParseResult:
    frames: List[CanFrame]
    rejects: List[Reject]
    rows: int


def _parse_row(fields: List[str], fmt: LogFormat, file_label: Optional[ClassLabel],
               flag_labels: Dict[str, Optional[ClassLabel]]) -> CanFrame:
    try:
        ts = float(fields[fmt.timestamp_col])
        id_text = fields[fmt.id_col].strip()
        dlc = int(fields[fmt.dlc_col])
    except (IndexError, ValueError):
        raise ValueError("unparseable timestamp, id or dlc") from None
    try:
        can_id = int(id_text, 16)
    except ValueError:
        raise ValueError(f"bad hex id {id_text!r}") from None
    if can_id > MAX_STD_ID:
        raise ValueError("id exceeds 11-bit range")
    if not 0 <= dlc <= 8:
        raise ValueError(f"dlc {dlc} outside 0..8")
    byte_fields = fields[fmt.payload_col:fmt.payload_col + dlc]
    if len(byte_fields) != dlc:
        raise ValueError(f"expected {dlc} payload bytes, found {len(byte_fields)}")
    try:
        payload = bytes(int(b, 16) for b in byte_fields)
    except ValueError:
        raise ValueError("bad payload byte") from None
    flag_idx = fmt.payload_col + dlc if fmt.flag_col is None else fmt.flag_col
    if flag_idx >= len(fields):
        raise ValueError("missing flag column")
    flag = fields[flag_idx].strip()
    if flag not in flag_labels:
        raise ValueError(f"unknown flag {flag!r}")
    label = flag_labels[flag]
    if label is None:
        if file_label is None:
            raise ValueError(f"flag {flag!r} needs an attack type from the file name")
        label = file_label
    if ts < 0.0:
        raise ValueError("negative timestamp")
    return CanFrame(ts, can_id, dlc, payload, label)


def parse_log(source: Union[str, io.TextIOBase, Iterable[str]], fmt: Optional[LogFormat] = None,
              file_label: Optional[ClassLabel] = None, strict: bool = True) -> ParseResult:
    """Parse CSV CAN log text into frames, in file order.

    Malformed rows are collected in ``rejects``; if more than 1% of rows are
    rejected the column map is almost certainly wrong and ``IngestError``
    is raised (unless ``strict`` is False).
    """
    fmt = fmt or LogFormat()
    if isinstance(source, str):
        source = io.StringIO(source)
    flag_labels = {k: (None if v == "@file" else ClassLabel.parse(v)) for k, v in fmt.flags.items()}
    # full label names are always accepted, so mixed-attack logs round-trip
    for lab in ClassLabel:
        flag_labels.setdefault(lab.display, lab)
    frames: List[CanFrame] = []
    rejects: List[Reject] = []
    rows = 0
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith(fmt.comment):
            continue
        rows += 1
        try:
            frames.append(_parse_row(line.split(fmt.delimiter), fmt, file_label, flag_labels))
        except ValueError as exc:
            rejects.append(Reject(lineno, str(exc)))
    if strict and rows and len(rejects) > MAX_REJECT_FRACTION * rows:
        first = "; ".join(f"row {r.row}: {r.reason}" for r in rejects[:3])
        raise IngestError(f"{len(rejects)} of {rows} rows rejected (wrong column map?): {first}")
    if rejects:
        logger.warning("rejected %d of %d rows", len(rejects), rows)
    return ParseResult(frames, rejects, rows)


def read_log(path: Union[str, Path], fmt: Optional[LogFormat] = None, strict: bool = True) -> ParseResult:
    fmt = fmt or LogFormat()
    path = Path(path)
    try:
        with path.open("r", newline="") as fh:
            return parse_log(fh, fmt, fmt.label_for_file(path.name), strict)
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


# --- splits --------------------------------------------------------------------------

def parse_ratio(text: Union[str, float, Fraction, Tuple[int, int]]) -> Fraction:
    """Accept "3:1", "2/1", 3, 3.0 or (3, 1)."""
    if isinstance(text, tuple):
        r = Fraction(text[0], text[1])
    elif isinstance(text, str) and ":" in text:
        a, b = text.split(":")
        r = Fraction(int(a), int(b))
    else:
        r = Fraction(text).limit_denominator(10_000)
    if r <= 0:
        raise ValueError(f"ratio must be positive, got {text}")
    return r


def label_counts(labels: Iterable[int]) -> Dict[str, int]:
    c = Counter(int(l) for l in labels)
    return {lab.display: c.get(int(lab), 0) for lab in ClassLabel}


@dataclass
class DatasetSplit:
    """Index-based train/test partition of a frame (or feature) sequence.

    Indices refer to positions in the source sequence, so features computed
    on the full log (inter-arrival times!) can be split afterwards.
    """
    train_idx: np.ndarray
    test_idx: np.ndarray
    labels: np.ndarray
    seed: int
    ratio: Fraction
    frames: Optional[Sequence[CanFrame]] = None

    @property
    def train(self) -> List[CanFrame]:
        return [self.frames[i] for i in self.train_idx]

    @property
    def test(self) -> List[CanFrame]:
        return [self.frames[i] for i in self.test_idx]

    @property
    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": f"{self.ratio.numerator}:{self.ratio.denominator}",
            "train": label_counts(self.labels[self.train_idx]),
            "test": label_counts(self.labels[self.test_idx]),
            "n_train": int(len(self.train_idx)),
            "n_test": int(len(self.test_idx)),
        }


def _labels_of(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.astype(np.int64)
    return np.fromiter((int(f.label) for f in items), dtype=np.int64, count=len(items))


def split_train_test(frames, ratio="3:1", seed: int = 0) -> DatasetSplit:
    """Uniform random partition with |train|/|test| as close to ``ratio`` as possible.

    ``frames`` may be a frame sequence or an array of integer labels.
    """
    r = parse_ratio(ratio)
    n = len(frames)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train = int(round(n * r / (1 + r)))
    perm = np.random.default_rng(seed).permutation(n)
    labels = _labels_of(frames)
    frame_seq = None if isinstance(frames, np.ndarray) else frames
    return DatasetSplit(np.sort(perm[:n_train]), np.sort(perm[n_train:]), labels, seed, r, frame_seq)


class InsufficientFrames(ValueError):
    pass


def balanced_subset_indices(labels: np.ndarray, pool: Optional[np.ndarray] = None,
                            per_attack: int = 90_000, normal_ratio="2:1",
                            seed: int = 0) -> np.ndarray:
    """Indices of a training subset with ``per_attack`` frames per attack type.

    Each per-attack block holds normal and attack frames in ``normal_ratio``;
    normal frames are drawn without replacement across all blocks.
    """
    r = parse_ratio(normal_ratio)
    labels = np.asarray(labels)
    pool = np.arange(len(labels)) if pool is None else np.asarray(pool)
    n_normal_each = int(round(per_attack * r / (1 + r)))
    n_attack_each = per_attack - n_normal_each
    pool_labels = labels[pool]
    by_label = {lab: pool[pool_labels == int(lab)] for lab in ClassLabel}
    shortfalls = []
    need_normal = n_normal_each * len(ATTACK_LABELS)
    if len(by_label[ClassLabel.NORMAL]) < need_normal:
        shortfalls.append(f"Normal short by {need_normal - len(by_label[ClassLabel.NORMAL])}")
    for lab in ATTACK_LABELS:
        if len(by_label[lab]) < n_attack_each:
            shortfalls.append(f"{lab.display} short by {n_attack_each - len(by_label[lab])}")
    if shortfalls:
        raise InsufficientFrames("insufficient frames: " + ", ".join(shortfalls))
    rng = np.random.default_rng(seed)
    normal = rng.choice(by_label[ClassLabel.NORMAL], size=need_normal, replace=False)
    blocks = []
    for j, lab in enumerate(ATTACK_LABELS):
        blocks.append(normal[j * n_normal_each:(j + 1) * n_normal_each])
        blocks.append(rng.choice(by_label[lab], size=n_attack_each, replace=False))
    out = np.concatenate(blocks)
    rng.shuffle(out)
    return out


def build_balanced_train_subset(split: DatasetSplit, per_attack: int = 90_000,
                                normal_ratio="2:1", seed: int = 0) -> List[CanFrame]:
    if split.frames is None:
        raise ValueError("split was built from labels only; use balanced_subset_indices")
    idx = balanced_subset_indices(split.labels, split.train_idx, per_attack, normal_ratio, seed)
    return [split.frames[i] for i in idx]
