"""``skelconv`` command-line entry point.

Every subcommand reads one JSON config (``--config``), applies flag
overrides, and writes the fully resolved config next to its outputs so the
run can be repeated from that file alone::

    skelconv synth --seed 0 --out-dir runs/data
    skelconv train-cls --data runs/data --out-dir runs/cls
    skelconv eval-det --checkpoint runs/det/checkpoint.npz --data runs/det_data --theta 0.1 --theta 0.5

Exit codes: 0 success, 1 any other error, 2 missing input path,
3 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import CheckpointError, ModelCheckpoint, SgdConfig
from .classifier import (
    ClassifierConfig, SkeletonClassifier, TrainConfig, encode_dataset, evaluate_arrays, init_classifier_params, predict,
    train_classifier,
)
from .detector import (
    DetectorConfig, DetTrainConfig, TemporalDetector, forward_detect, init_detector_params, train_detector,
)
from .evaluation import DEFAULT_THETAS, EvalReport, accuracy, format_detections, mean_average_precision
from .skeleton_data import load_sequence, read_dataset, write_dataset
from .synthetic import SynthConfig, synthesize_dataset

log = logging.getLogger("skelconv")

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3
COMMANDS = ("synth", "train-cls", "train-det", "eval-cls", "eval-det", "predict")


class CliError(Exception):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


def default_config() -> dict:
    cls = ClassifierConfig().to_dict()
    cls["class_count"] = None  # inferred from the training labels
    det = DetectorConfig().to_dict()
    det["n_classes"] = None  # inferred from the segment labels
    return {
        "command": None,
        "seed": 0,
        "data": None,
        "val_data": None,
        "checkpoint": None,
        "out_dir": "runs/latest",
        "thetas": list(DEFAULT_THETAS),
        "synth": SynthConfig().to_dict(),
        "classifier": cls,
        "detector": det,
        "sgd": asdict(SgdConfig()),
        "train": TrainConfig().to_dict(),
        "det_train": DetTrainConfig().to_dict(),
    }


def merge(base: dict, over: dict, path="") -> dict:
    """Recursive dict merge that rejects keys the defaults do not know."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise CliError(f"unknown config key {path + k!r}")
        out[k] = merge(out[k], v, path + k + ".") if isinstance(out[k], dict) and isinstance(v, dict) else v
    return out


def resolve(args) -> tuple:
    """(resolved config, raw user config) from ``--config`` plus flags."""
    user = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise CliError(f"config file not found: {p}", EXIT_MISSING)
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"{p}: invalid JSON ({e})") from None
    cfg = merge(default_config(), user)
    for key in ("seed", "data", "val_data", "checkpoint", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.theta:
        cfg["thetas"] = list(args.theta)
    if getattr(args, "mode", None):
        cfg["synth"]["mode"] = args.mode
    cfg["command"] = args.command
    return cfg, user


def write_resolved(cfg: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def write_jsonl(path: Path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def load_data(path, what="dataset") -> list:
    if path is None:
        raise CliError(f"no {what} given (use --data or the config's data key)", EXIT_MISSING)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} path does not exist: {p}", EXIT_MISSING)
    if p.is_file():
        seq = load_sequence(p)
        seq.seq_id = seq.seq_id or p.stem
        return [seq]
    if not (p / "manifest.json").exists():
        raise CliError(f"{what} path has no manifest.json: {p}", EXIT_MISSING)
    return read_dataset(p)


def load_checkpoint(cfg: dict, kind: str, user: dict) -> ModelCheckpoint:
    path = cfg["checkpoint"]
    if path is None:
        raise CliError("no checkpoint given (use --checkpoint)", EXIT_MISSING)
    if not Path(path).exists():
        raise CliError(f"checkpoint path does not exist: {path}", EXIT_MISSING)
    try:
        ck = ModelCheckpoint.load(path)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_MISMATCH) from None
    if kind is not None and ck.kind != kind:
        raise CliError(f"{path}: {ck.kind} checkpoint cannot be used by {cfg['command']}", EXIT_MISMATCH)
    section = "classifier" if ck.kind == "classifier" else "detector"
    clash = _first_difference(user.get(section, {}), ck.config, section)
    if clash:
        raise CliError(f"{path}: checkpoint disagrees with the config on {clash}", EXIT_MISMATCH)
    _check_param_shapes(ck, path)
    return ck


def _first_difference(given: dict, stored: dict, path: str):
    """Dotted name of the first key set in ``given`` whose value differs in ``stored``."""
    for k, v in given.items():
        have = stored.get(k)
        if isinstance(v, dict) and isinstance(have, dict):
            sub = _first_difference(v, have, f"{path}.{k}")
            if sub:
                return sub
        elif have != v:
            return f"{path}.{k} (checkpoint {have!r}, config {v!r})"
    return None


def _check_param_shapes(ck: ModelCheckpoint, path):
    try:
        if ck.kind == "classifier":
            c = ClassifierConfig.from_dict(ck.config)
            want = init_classifier_params(c, np.random.default_rng(0))
        else:
            c = DetectorConfig.from_dict(ck.config)
            want = init_detector_params(c, np.random.default_rng(0))
    except (TypeError, ValueError) as e:
        raise CliError(f"{path}: stored config is invalid ({e})", EXIT_MISMATCH) from None
    got = {k: np.shape(v) for k, v in ck.params.items()}
    if got != {k: v.shape for k, v in want.items()}:
        raise CliError(f"{path}: parameters do not match the stored config", EXIT_MISMATCH)


def _check_joints(data, n_joints, path):
    bad = [s for s in data if s.n_joints != n_joints]
    if bad:
        raise CliError(f"{path}: model expects {n_joints} joints, {bad[0].seq_id} has {bad[0].n_joints}",
                       EXIT_MISMATCH)


def _infer_joints(section: dict, given: dict, data):
    """Take the joint count from the data unless the config file fixes it."""
    if "n_joints" not in given:
        section["n_joints"] = data[0].n_joints
        if "m_joints" not in given:
            section["m_joints"] = None


def _sgd(cfg):
    return SgdConfig(**cfg["sgd"])


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, user, out: Path):
    syn = SynthConfig(**cfg["synth"])
    data = synthesize_dataset(syn, cfg["seed"])
    write_dataset(data, out, with_labels_csv=syn.mode == "untrimmed")
    write_resolved(cfg, out)
    print(f"wrote {len(data)} {syn.mode} sequences to {out}")


def cmd_train_cls(cfg, user, out: Path):
    data = load_data(cfg["data"])
    val = load_data(cfg["val_data"], "validation dataset") if cfg["val_data"] else None
    labels = [s.label for s in data]
    if any(l is None for l in labels):
        raise CliError(f"{cfg['data']}: every training sequence needs a class label")
    if cfg["classifier"]["class_count"] is None:
        cfg["classifier"]["class_count"] = int(max(labels)) + 1
    _infer_joints(cfg["classifier"], user.get("classifier", {}), data)
    ccfg = ClassifierConfig.from_dict(cfg["classifier"])
    cfg["classifier"] = ccfg.to_dict()
    _check_joints(data, ccfg.n_joints, cfg["data"])
    write_resolved(cfg, out)
    res = train_classifier(data, ccfg, _sgd(cfg), cfg["seed"], val=val, train_cfg=TrainConfig(**cfg["train"]),
                           on_epoch=lambda r: log.info("epoch %s", r))
    res.checkpoint.save(out / "checkpoint.npz")
    write_jsonl(out / "metrics.jsonl", res.metrics)
    last = res.metrics[-1]
    print(f"epochs {len(res.metrics)} train_acc {last.get('train_acc', float('nan')):.4f}"
          + (f" val_acc {last['val_acc']:.4f}" if "val_acc" in last else ""))


def cmd_train_det(cfg, user, out: Path):
    data = load_data(cfg["data"])
    if any(s.segments is None for s in data):
        raise CliError(f"{cfg['data']}: every training sequence needs segment labels")
    if cfg["detector"]["n_classes"] is None:
        cfg["detector"]["n_classes"] = max((int(w.class_id) for s in data for w in s.segments), default=1)
    _infer_joints(cfg["detector"]["backbone"], user.get("detector", {}).get("backbone", {}), data)
    dcfg = DetectorConfig.from_dict(cfg["detector"])
    cfg["detector"] = dcfg.to_dict()
    _check_joints(data, dcfg.backbone.n_joints, cfg["data"])
    write_resolved(cfg, out)
    every = max(1, cfg["det_train"].get("log_every") or 50)
    res = train_detector(data, dcfg, _sgd(cfg), cfg["seed"], DetTrainConfig(**cfg["det_train"]),
                         on_iteration=lambda r: r["iteration"] % every or log.info("iteration %s", r))
    res.checkpoint.save(out / "checkpoint.npz")
    write_jsonl(out / "metrics.jsonl", res.losses)
    tail = res.losses[-len(data):]
    print(f"iterations {len(res.losses)} final_epoch_loss {np.mean([r['loss'] for r in tail]):.4f}")


def cmd_eval_cls(cfg, user, out: Path):
    ck = load_checkpoint(cfg, "classifier", user)
    model = SkeletonClassifier.from_checkpoint(ck)
    data = load_data(cfg["data"])
    _check_joints(data, model.config.n_joints, cfg["data"])
    cfg["classifier"] = model.config.to_dict()
    write_resolved(cfg, out)
    X, y = encode_dataset(data, model.config)
    _, _, preds = evaluate_arrays(model, X, y)
    rep = EvalReport(accuracy=accuracy(preds, y) if (y >= 0).all() else None, counts={"sequences": len(data)})
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "predictions.csv").write_text("".join(f"{s.seq_id},{int(p)}\n" for s, p in zip(data, preds)))
    write_jsonl(out / "metrics.jsonl", [{"accuracy": rep.accuracy, "sequences": len(data)}])
    print(f"accuracy {rep.accuracy:.4f}" if rep.accuracy is not None else "accuracy n/a (unlabelled data)")


def _detect_all(model, data):
    dets, gts = [], []
    for s in data:
        dets += [w.with_(seq_id=s.seq_id) for w in forward_detect(s, model)]
        gts += [w.with_(seq_id=s.seq_id) for w in (s.segments or [])]
    return dets, gts


def cmd_eval_det(cfg, user, out: Path):
    ck = load_checkpoint(cfg, "detector", user)
    model = TemporalDetector.from_checkpoint(ck)
    data = load_data(cfg["data"])
    _check_joints(data, model.config.backbone.n_joints, cfg["data"])
    cfg["detector"] = model.config.to_dict()
    write_resolved(cfg, out)
    dets, gts = _detect_all(model, data)
    rep = mean_average_precision(dets, gts, tuple(float(t) for t in cfg["thetas"]))
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "per_class_ap.csv").write_text(rep.per_class_csv())
    (out / "detections.csv").write_text(format_detections(dets))
    write_jsonl(out / "metrics.jsonl", [{"theta": t, "map": m} for t, m in rep.map_at_theta.items()])
    for t, m in rep.map_at_theta.items():
        print(f"mAP@{t:g} {m:.4f}")


def cmd_predict(cfg, user, out: Path):
    ck = load_checkpoint(cfg, None, user)
    data = load_data(cfg["data"])
    write_resolved(cfg, out)
    if ck.kind == "detector":
        model = TemporalDetector.from_checkpoint(ck)
        _check_joints(data, model.config.backbone.n_joints, cfg["data"])
        text = format_detections(_detect_all(model, data)[0])
    else:
        model = SkeletonClassifier.from_checkpoint(ck)
        _check_joints(data, model.config.n_joints, cfg["data"])
        rows = []
        for s in data:
            c, scores = predict(s, model)
            rows.append(f"{s.seq_id},{c},{scores[c]:.6f}\n")
        text = "".join(rows)
    (out / "predictions.csv").write_text(text)
    sys.stdout.write(text)


HANDLERS = {
    "synth": cmd_synth, "train-cls": cmd_train_cls, "train-det": cmd_train_det,
    "eval-cls": cmd_eval_cls, "eval-det": cmd_eval_det, "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skelconv", description="Skeleton action classification and detection.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--theta", type=float, action="append", help="IoU threshold; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", help="dataset directory (or a single .skel file for predict)")
        if name.startswith("train"):
            p.add_argument("--val-data", dest="val_data")
        if name in ("eval-cls", "eval-det", "predict"):
            p.add_argument("--checkpoint")
        if name == "synth":
            p.add_argument("--mode", choices=("trimmed", "untrimmed"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SKELCONV_THREADS")
    limit = contextlib.nullcontext()
    if threads:
        try:
            limit = threadpool_limits(limits=int(threads))
        except ValueError:
            print(f"error: SKELCONV_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_ERROR
    try:
        with limit:
            cfg, user = resolve(args)
            HANDLERS[args.command](cfg, user, Path(cfg["out_dir"]))
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
