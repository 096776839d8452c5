"""Command-line entry point: ``genids {gen,split,train,predict,eval}``.

Settings come from built-in defaults, then an optional INI config file
(``--config``), then command-line flags. The effective configuration and its
hash are embedded in every artifact a command writes.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import diff_net as dn
from .can_ingest import (ClassLabel, IngestError, InsufficientFrames, LogFormat, balanced_subset_indices,
                         label_counts, parse_ratio, read_log, split_train_test)
from .eval_harness import build_report, confusion_from_arrays, emit_report
from .features import FeatureConfig, NonMonotonicTimestamp, extract_stream
from .gen_classifier import (GenClassifier, ModelConfig, TrainConfig, TrainingDiverged, decide,
                             predict_proba, train)
from .traffic_synth import default_scenarios, generate, load_profile, load_scenarios, write_log

logger = logging.getLogger("genids")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


@dataclass
class DataConfig:
    split_ratio: str = "3:1"
    split_seed: int = 0
    per_attack: Optional[int] = None  # None: no balanced subset
    normal_ratio: str = "2:1"
    subset_seed: int = 0


@dataclass
class GenConfig:
    duration: float = 10.0
    seed: int = 0
    scenarios: Optional[str] = None
    profile: Optional[str] = None
    attacks: bool = True


@dataclass
class RunConfig:
    command: str = ""
    log_format: LogFormat = field(default_factory=LogFormat)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    predict_seed: int = 0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "log_format": self.log_format.to_dict(),
            "features": asdict(self.features),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "gen": asdict(self.gen),
            "predict_seed": self.predict_seed,
            "paths": self.paths,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --- config loading -------------------------------------------------------------------

def _coerce(cls_fields, section, name):
    ftype = cls_fields[name].type
    raw = section[name].strip()
    t = str(ftype)
    if raw.lower() in ("none", "") and "Optional" in t:
        return None
    if "Tuple" in t or "tuple" in t:
        return tuple(int(v) for v in raw.split(","))
    if "bool" in t:
        return section.getboolean(name)
    if "int" in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw


def _apply_section(obj, parser, section):
    if not parser.has_section(section):
        return obj
    cls_fields = {f.name: f for f in fields(obj)}
    updates = {}
    for key in parser[section]:
        if key not in cls_fields:
            raise UsageError(f"unknown key {key!r} in [{section}]")
        try:
            updates[key] = _coerce(cls_fields, parser[section], key)
        except ValueError as exc:
            raise UsageError(f"[{section}] {key}: {exc}") from None
    return replace(obj, **updates)


def load_config(path: Optional[str]) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep flag names like "R" case-sensitive
    try:
        if not parser.read(path):
            raise UsageError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from None
    known = {"log_format", "flags", "file_labels", "features", "model", "train", "data", "gen", "predict"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        cfg.log_format = LogFormat.from_config(parser)
        cfg.features = _apply_section(cfg.features, parser, "features")
        cfg.model = _apply_section(cfg.model, parser, "model")
        cfg.train = _apply_section(cfg.train, parser, "train")
        cfg.data = _apply_section(cfg.data, parser, "data")
        cfg.gen = _apply_section(cfg.gen, parser, "gen")
        if parser.has_section("predict") and "seed" in parser["predict"]:
            cfg.predict_seed = parser["predict"].getint("seed")
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _override(obj, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(obj, **kw) if kw else obj
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg.command = args.command
    g = lambda name: getattr(args, name, None)  # noqa: E731
    cfg.features = _override(cfg.features, t_max=g("t_max"))
    cfg.model = _override(cfg.model, mode=g("mode"), z_dim=g("z_dim"), m_dim=g("m_dim"),
                          k_samples=g("k"), dec_log_var=g("dec_log_var"))
    cfg.train = _override(cfg.train, batch_size=g("batch_size"), iterations=g("iterations"),
                          iteration_unit=g("iteration_unit"), lr=g("lr"), seed=g("train_seed"),
                          eval_every=g("eval_every"), eval_samples=g("eval_samples"))
    cfg.data = _override(cfg.data, split_ratio=g("ratio"), split_seed=g("split_seed"),
                         per_attack=g("per_attack"), normal_ratio=g("normal_ratio"),
                         subset_seed=g("subset_seed"))
    cfg.gen = _override(cfg.gen, duration=g("duration"), seed=g("gen_seed"), scenarios=g("scenarios"),
                        profile=g("profile"))
    if g("no_attacks"):
        cfg.gen = replace(cfg.gen, attacks=False)
    if g("seed") is not None and args.command in ("predict", "eval"):
        cfg.predict_seed = args.seed
    for r in (cfg.data.split_ratio, cfg.data.normal_ratio):
        try:
            parse_ratio(r)
        except (ValueError, ZeroDivisionError) as exc:
            raise UsageError(f"bad ratio {r!r}: {exc}") from None
    cfg.paths = {k: (v if isinstance(v, str) or v is None else list(v))
                 for k, v in sorted(vars(args).items())
                 if k in ("out", "log", "model", "data_manifest", "trace", "manifest", "out_json", "out_text")}
    return cfg


# --- shared helpers ---------------------------------------------------------------------

def load_features(paths: List[str], cfg: RunConfig):
    """Parse each log and extract features with a fresh per-id history per file."""
    Xs, Ys = [], []
    for p in paths:
        result = read_log(p, cfg.log_format)
        X, Y = extract_stream(result.frames, cfg.features)
        logger.info("%s: %d frames, %d rejected", p, len(X), len(result.rejects))
        Xs.append(X)
        Ys.append(Y)
    if not Xs:
        return np.empty((0, 20)), np.empty(0, dtype=np.int64)
    return np.concatenate(Xs), np.concatenate(Ys)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_data_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read data manifest {path}: {exc}") from None
    if m.get("kind") != "genids-split":
        raise UsageError(f"{path} is not a split manifest")
    return m


def _split_from_manifest(m: dict, Y: np.ndarray):
    split = split_train_test(Y, m["ratio"], m["seed"])
    if split.manifest["train"] != m["train"] or split.manifest["test"] != m["test"]:
        raise UsageError("logs do not match the split manifest (counts differ)")
    return split


def load_checkpoint(path):
    try:
        blocks, meta, adam = dn.load_container(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    return GenClassifier.from_blocks(blocks, meta), meta, adam


def _check_feature_hash(meta: dict, cfg: RunConfig):
    want = meta.get("feature_hash")
    have = cfg.features.digest()
    if want != have:
        raise UsageError(f"feature config hash mismatch: checkpoint {want}, current {have}")


# --- commands -------------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    try:
        profile = load_profile(cfg.gen.profile) if cfg.gen.profile else None
        if not cfg.gen.attacks:
            scenarios = []
        elif cfg.gen.scenarios:
            scenarios = load_scenarios(cfg.gen.scenarios)
        else:
            scenarios = default_scenarios(cfg.gen.duration)
        frames = generate(profile, scenarios, cfg.gen.duration, cfg.gen.seed)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from None
    digest = cfg.digest()
    write_log(frames, cfg.log_format, args.out, header=f"config_hash={digest}")
    manifest = {
        "kind": "genids-synthetic",
        "config": cfg.to_dict(),
        "config_hash": digest,
        "scenarios": [s.to_obj() for s in scenarios],
        "counts": label_counts(f.label for f in frames),
        "n_frames": len(frames),
    }
    _dump_json(args.manifest or f"{args.out}.manifest.json", manifest)
    logger.info("wrote %d frames to %s", len(frames), args.out)
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    Y = np.concatenate([np.fromiter((int(f.label) for f in read_log(p, cfg.log_format).frames), dtype=np.int64)
                        for p in args.log])
    if len(Y) == 0:
        raise UsageError("no frames in the input logs")
    split = split_train_test(Y, cfg.data.split_ratio, cfg.data.split_seed)
    manifest = {"kind": "genids-split", "source_files": list(args.log), **split.manifest,
                "config": cfg.to_dict(), "config_hash": cfg.digest()}
    if cfg.data.per_attack is not None:
        idx = balanced_subset_indices(Y, split.train_idx, cfg.data.per_attack, cfg.data.normal_ratio,
                                      cfg.data.subset_seed)
        manifest["subset"] = {"per_attack": cfg.data.per_attack, "normal_ratio": cfg.data.normal_ratio,
                              "seed": cfg.data.subset_seed, "counts": label_counts(Y[idx]),
                              "n_frames": int(len(idx))}
    _dump_json(args.out, manifest)
    return 0


def _training_data(args, cfg: RunConfig):
    if args.data_manifest:
        m = read_data_manifest(args.data_manifest)
        X, Y = load_features(m["source_files"], cfg)
        split = _split_from_manifest(m, Y)
        pool = split.train_idx
        sub = m.get("subset")
        if sub is not None and args.per_attack is None:
            idx = balanced_subset_indices(Y, pool, sub["per_attack"], sub["normal_ratio"], sub["seed"])
            return X[idx], Y[idx]
    else:
        if not args.log:
            raise UsageError("train needs --log or --data-manifest")
        X, Y = load_features(args.log, cfg)
        pool = np.arange(len(Y))
    if cfg.data.per_attack is not None:
        idx = balanced_subset_indices(Y, pool, cfg.data.per_attack, cfg.data.normal_ratio, cfg.data.subset_seed)
        return X[idx], Y[idx]
    return X[pool], Y[pool]


def _checkpoint_meta(model: GenClassifier, cfg: RunConfig) -> dict:
    meta = model.metadata()
    meta.update({"train": cfg.train.to_dict(), "features": asdict(cfg.features),
                 "feature_hash": cfg.features.digest(), "seed": cfg.train.seed,
                 "config": cfg.to_dict(), "config_hash": cfg.digest()})
    return meta


def cmd_train(args, cfg: RunConfig) -> int:
    X, Y = _training_data(args, cfg)
    if len(X) == 0:
        raise UsageError("no training frames")
    logger.info("training on %d frames: %s", len(Y), label_counts(Y))
    model = GenClassifier.create(cfg.model, seed=cfg.train.seed)
    trace_path = args.trace or f"{args.out}.trace.csv"

    def progress(tp):
        logger.info("step %d  neg-ELBO %.4f  train acc %.4f", tp.step, tp.neg_elbo, tp.train_accuracy)

    try:
        model, trace, adam = train(model, X, Y, cfg.train, progress=progress)
    except TrainingDiverged as exc:
        dn.save_container(f"{args.out}.partial", exc.last_good.to_blocks(), _checkpoint_meta(exc.last_good, cfg))
        _write_trace(trace_path, exc.trace, cfg)
        logger.error("%s; last finite model saved to %s.partial", exc, args.out)
        return 1
    dn.save_container(args.out, model.to_blocks(), _checkpoint_meta(model, cfg), adam)
    _write_trace(trace_path, trace, cfg)
    return 0


def _write_trace(path, trace, cfg: RunConfig):
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.digest()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "neg_elbo", "train_accuracy"])
    for tp in trace:
        w.writerow([tp.step, repr(tp.neg_elbo), repr(tp.train_accuracy)])
    Path(path).write_text(buf.getvalue())


def cmd_predict(args, cfg: RunConfig) -> int:
    model, meta, _ = load_checkpoint(args.model)
    _check_feature_hash(meta, cfg)
    X, _ = load_features([args.log], cfg)
    proba = predict_proba(model, X, cfg.predict_seed) if len(X) else np.empty((0, 5))
    pred = decide(proba)
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.digest()} model_config_hash={meta.get('config_hash')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "predicted"] + [f"p_{lab.display}" for lab in ClassLabel])
    for i, (c, p) in enumerate(zip(pred, proba)):
        w.writerow([i, ClassLabel(int(c)).display] + [repr(float(v)) for v in p])
    Path(args.out).write_text(buf.getvalue())
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, meta, _ = load_checkpoint(args.model)
    _check_feature_hash(meta, cfg)
    if args.data_manifest:
        m = read_data_manifest(args.data_manifest)
        X, Y = load_features(m["source_files"], cfg)
        split = _split_from_manifest(m, Y)
        X, Y = X[split.test_idx], Y[split.test_idx]
        dataset = {k: m[k] for k in ("source_files", "seed", "ratio", "test")}
    elif args.log:
        X, Y = load_features(args.log, cfg)
        dataset = {"source_files": list(args.log), "counts": label_counts(Y)}
    else:
        raise UsageError("eval needs --log or --data-manifest")
    if len(X) == 0:
        raise UsageError("empty test log")
    pred = decide(predict_proba(model, X, cfg.predict_seed))
    report = build_report(confusion_from_arrays(Y, pred), {
        "model_hash": hashlib.sha256(Path(args.model).read_bytes()).hexdigest()[:16],
        "dataset": dataset, "seed": cfg.predict_seed,
        "config": cfg.to_dict(), "config_hash": cfg.digest()})
    Path(args.out_json).write_text(emit_report(report, "json"))
    text = f"# config_hash={cfg.digest()}\n" + emit_report(report, "text")
    if args.out_text:
        Path(args.out_text).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genids", description="Generative-classifier CAN intrusion detection")
    p.add_argument("--config", help="INI config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def features(sp):
        sp.add_argument("--t-max", type=float, help="interval clamp in seconds (default 0.1)")

    g = sub.add_parser("gen", help="generate a synthetic labeled CAN log")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", help="scenario manifest path (default: <out>.manifest.json)")
    g.add_argument("--duration", type=float)
    g.add_argument("--seed", dest="gen_seed", type=int)
    g.add_argument("--scenarios", help="JSON list of attack scenarios")
    g.add_argument("--profile", help="JSON bus profile")
    g.add_argument("--no-attacks", action="store_true")

    s = sub.add_parser("split", help="train/test split manifest for one or more logs")
    s.add_argument("--log", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratio")
    s.add_argument("--seed", dest="split_seed", type=int)
    s.add_argument("--per-attack", type=int, help="balanced training subset size per attack type")
    s.add_argument("--normal-ratio")
    s.add_argument("--subset-seed", type=int)

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--log", action="append")
    t.add_argument("--data-manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--iteration-unit", choices=["epoch", "batch"])
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", dest="train_seed", type=int)
    t.add_argument("--mode", choices=["full_elbo", "paper_literal"])
    t.add_argument("--z-dim", type=int)
    t.add_argument("--m-dim", type=int)
    t.add_argument("--k", type=int, help="importance samples per class at prediction")
    t.add_argument("--dec-log-var", type=float)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-samples", type=int)
    t.add_argument("--per-attack", type=int)
    t.add_argument("--normal-ratio")
    t.add_argument("--subset-seed", type=int)
    features(t)

    pr = sub.add_parser("predict", help="per-frame predictions as CSV")
    pr.add_argument("--model", required=True)
    pr.add_argument("--log", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int)
    features(pr)

    e = sub.add_parser("eval", help="evaluate a model on a labeled log or test split")
    e.add_argument("--model", required=True)
    e.add_argument("--log", action="append")
    e.add_argument("--data-manifest")
    e.add_argument("--out-json", required=True)
    e.add_argument("--out-text", help="text table path (default: stdout)")
    e.add_argument("--seed", type=int)
    features(e)
    return p


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"genids {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IngestError, InsufficientFrames, NonMonotonicTimestamp, dn.NumericError, OSError,
            ValueError) as exc:
        print(f"genids {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
