"""Desk-scale experiments on synthetic data: classifier overfit, ablations, detection.

Shared by the runnable scripts and the acceptance tests so that both exercise
the same settings.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .autodiff import SgdConfig
from .classifier import (
    ClassifierConfig, TrainConfig, ablation_configs, encode_dataset, evaluate_arrays, train_classifier,
)
from .detector import AnchorConfig, DetectorConfig, DetTrainConfig, train_detector
from .evaluation import EvalReport
from .skeleton_data import write_dataset
from .synthetic import SynthConfig, synthesize_dataset

DESK_ANCHOR_SCALES = (32, 64, 128, 256)  # synthetic segments span 40-120 frames


@dataclass
class OverfitConfig:
    n_classes: int = 4
    per_class: int = 10
    train_seed: int = 0
    heldout_seed: int = 1
    model_seed: int = 0
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 0.01
    stop_at_train_accuracy: float = 1.0


def tiny_classifier_config(n_classes=4) -> ClassifierConfig:
    """Default architecture with the class count of the synthetic set."""
    return ClassifierConfig(class_count=n_classes)


def overfit_data(cfg: OverfitConfig) -> tuple:
    syn = SynthConfig(n_classes=cfg.n_classes, per_class=cfg.per_class)
    return synthesize_dataset(syn, cfg.train_seed), synthesize_dataset(syn, cfg.heldout_seed)


def run_overfit(cfg: OverfitConfig, model_cfg: ClassifierConfig | None = None, data=None) -> dict:
    model_cfg = model_cfg or tiny_classifier_config(cfg.n_classes)
    train, held = data or overfit_data(cfg)
    t0 = time.perf_counter()
    res = train_classifier(train, model_cfg, SgdConfig(learning_rate=cfg.learning_rate), cfg.model_seed,
                           train_cfg=TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                                 stop_at_train_accuracy=cfg.stop_at_train_accuracy))
    X, y = encode_dataset(train, model_cfg)
    _, train_acc, _ = evaluate_arrays(res.model, X, y)
    Xh, yh = encode_dataset(held, model_cfg)
    _, held_acc, _ = evaluate_arrays(res.model, Xh, yh)
    return {"train_acc": train_acc, "heldout_acc": held_acc, "epochs": len(res.metrics),
            "seconds": time.perf_counter() - t0, "metrics": res.metrics}


def run_ablation(cfg: OverfitConfig, skip=()) -> dict:
    """Train every motion/transformer variant on the same overfit set."""
    data = overfit_data(cfg)
    variants = ablation_configs(tiny_classifier_config(cfg.n_classes))
    return {name: run_overfit(cfg, c, data) for name, c in variants.items() if name not in skip}


@dataclass
class DetectionExperiment:
    n_sequences: int = 20
    n_classes: int = 3
    segments_range: tuple = (2, 4)
    data_seed: int = 0
    model_seed: int = 0
    epochs: int = 40
    learning_rate: float = 0.01
    decay_epoch: int = 30
    anchor_scales: tuple = DESK_ANCHOR_SCALES
    thetas: tuple = (0.1, 0.5)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(mode="untrimmed", n_classes=self.n_classes, n_sequences=self.n_sequences,
                           segments_range=self.segments_range)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(n_classes=self.n_classes, anchors=AnchorConfig(scales=self.anchor_scales))


def run_detection(exp: DetectionExperiment, out_dir, on_iteration=None) -> dict:
    """Synthesize, train, then score with the ``eval-det`` command on the training set."""
    from .cli import main

    out = Path(out_dir)
    data = synthesize_dataset(exp.synth_config(), exp.data_seed)
    write_dataset(data, out / "data", with_labels_csv=True)
    t0 = time.perf_counter()
    res = train_detector(data, exp.detector_config(),
                         SgdConfig(learning_rate=exp.learning_rate, step_size=exp.decay_epoch), exp.model_seed,
                         DetTrainConfig(epochs=exp.epochs), on_iteration=on_iteration)
    train_s = time.perf_counter() - t0
    (out / "train").mkdir(parents=True, exist_ok=True)
    res.checkpoint.save(out / "train" / "checkpoint.npz")
    (out / "train" / "experiment.json").write_text(json.dumps(asdict(exp), indent=2))
    argv = ["eval-det", "--data", str(out / "data"), "--checkpoint", str(out / "train" / "checkpoint.npz"),
            "--out-dir", str(out / "eval")]
    for t in exp.thetas:
        argv += ["--theta", str(t)]
    code = main(argv)
    if code != 0:
        raise RuntimeError(f"eval-det exited with {code}")
    rep = EvalReport.from_json((out / "eval" / "report.json").read_text())
    return {"map": rep.map_at_theta, "per_class": rep.per_class_ap, "train_seconds": train_s,
            "iterations": len(res.losses), "final_loss": res.losses[-1]["loss"], "model": res.model}
