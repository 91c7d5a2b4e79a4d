import hashlib
import json

import pytest

from skelconv.cli import main
from skelconv.evaluation import EvalReport, parse_detections
from skelconv.skeleton_data import read_dataset

TINY = {
    "synth": {"n_joints": 8, "per_class": 2, "n_classes": 3, "n_sequences": 3, "segments_range": [1, 2],
              "segment_length_range": [16, 40], "gap_range": [8, 20]},
    "classifier": {"conv_channels": [4, 4, 6], "fc_hidden": [16, 12], "t_fixed": 16},
    "detector": {"backbone": {"conv_channels": [4, 4, 6], "fc_hidden": [16, 12]},
                 "anchors": {"scales": [8, 16, 32]}, "wpn_channels": 8},
    "train": {"epochs": 2},
    "det_train": {"epochs": 1},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def digest(root):
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file() and f.name != "resolved_config.json":
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def run(*args):
    return main([str(a) for a in args])


def test_synth_deterministic(tmp_path, tiny):
    assert run("synth", "--config", tiny, "--seed", 3, "--out-dir", tmp_path / "a") == 0
    assert run("synth", "--config", tiny, "--seed", 3, "--out-dir", tmp_path / "b") == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert run("synth", "--config", tiny, "--seed", 4, "--out-dir", tmp_path / "c") == 0
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_synth_modes(tmp_path, tiny):
    run("synth", "--config", tiny, "--out-dir", tmp_path / "cls")
    run("synth", "--config", tiny, "--mode", "untrimmed", "--out-dir", tmp_path / "det")
    cls = read_dataset(tmp_path / "cls")
    assert all(s.label is not None and s.segments is None for s in cls)
    assert not (tmp_path / "cls" / "labels").exists()
    det = read_dataset(tmp_path / "det")
    assert all(s.segments is not None and len(s.segments) >= 1 for s in det)
    assert len(list((tmp_path / "det" / "labels").glob("*.txt"))) == 3


def test_missing_dataset_exit_code(tmp_path, capsys):
    missing = tmp_path / "no_such_dir"
    assert run("train-cls", "--data", missing, "--out-dir", tmp_path / "o") == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"clasifier": {}}')
    assert run("synth", "--config", p, "--out-dir", tmp_path / "o") == 1
    assert "clasifier" in capsys.readouterr().err


def test_bad_thread_env(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("SKELCONV_THREADS", "many")
    assert run("synth", "--config", tiny, "--out-dir", tmp_path / "o") == 1
    monkeypatch.setenv("SKELCONV_THREADS", "1")
    assert run("synth", "--config", tiny, "--out-dir", tmp_path / "o") == 0


@pytest.fixture
def cls_run(tmp_path, tiny):
    run("synth", "--config", tiny, "--out-dir", tmp_path / "data")
    assert run("train-cls", "--config", tiny, "--data", tmp_path / "data", "--out-dir", tmp_path / "run") == 0
    return tmp_path


def test_train_cls_outputs_and_eval(cls_run, tiny, capsys):
    run_dir = cls_run / "run"
    assert {p.name for p in run_dir.iterdir()} == {"checkpoint.npz", "metrics.jsonl", "resolved_config.json"}
    resolved = json.loads((run_dir / "resolved_config.json").read_text())
    assert resolved["classifier"]["class_count"] == 3 and resolved["classifier"]["n_joints"] == 8
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 2
    assert run("eval-cls", "--data", cls_run / "data", "--checkpoint", run_dir / "checkpoint.npz",
               "--out-dir", cls_run / "ev") == 0
    rep = EvalReport.from_json((cls_run / "ev" / "report.json").read_text())
    assert 0.0 <= rep.accuracy <= 1.0


def test_train_cls_repeatable(cls_run, tiny):
    run("train-cls", "--config", tiny, "--data", cls_run / "data", "--out-dir", cls_run / "again")
    assert (cls_run / "run" / "metrics.jsonl").read_text() == (cls_run / "again" / "metrics.jsonl").read_text()


def test_resolved_config_reproduces_run(cls_run):
    resolved = cls_run / "run" / "resolved_config.json"
    cfg = json.loads(resolved.read_text())
    cfg["out_dir"] = str(cls_run / "replay")
    replay = cls_run / "replay.json"
    replay.write_text(json.dumps(cfg))
    assert run("train-cls", "--config", replay) == 0
    assert (cls_run / "run" / "metrics.jsonl").read_text() == (cls_run / "replay" / "metrics.jsonl").read_text()


def test_checkpoint_config_mismatch(cls_run, capsys):
    ck = cls_run / "run" / "checkpoint.npz"
    bad = cls_run / "bad.json"
    bad.write_text('{"classifier": {"t_fixed": 32}}')
    assert run("eval-cls", "--config", bad, "--data", cls_run / "data", "--checkpoint", ck,
               "--out-dir", cls_run / "x") == 3
    assert "t_fixed" in capsys.readouterr().err
    assert run("eval-det", "--data", cls_run / "data", "--checkpoint", ck, "--out-dir", cls_run / "x") == 3
    junk = cls_run / "junk.npz"
    junk.write_bytes(b"not a checkpoint")
    assert run("eval-cls", "--data", cls_run / "data", "--checkpoint", junk, "--out-dir", cls_run / "x") == 3


def test_predict_classifier(cls_run, capsys):
    seq = sorted((cls_run / "data" / "sequences").glob("*.skel"))[0]
    capsys.readouterr()
    assert run("predict", "--data", seq, "--checkpoint", cls_run / "run" / "checkpoint.npz",
               "--out-dir", cls_run / "p") == 0
    sid, cls, score = capsys.readouterr().out.strip().split(",")
    assert sid == seq.stem and 0 <= int(cls) < 3 and 0 < float(score) <= 1


def test_detection_commands(tmp_path, tiny, capsys):
    run("synth", "--config", tiny, "--mode", "untrimmed", "--out-dir", tmp_path / "data")
    assert run("train-det", "--config", tiny, "--data", tmp_path / "data", "--out-dir", tmp_path / "run") == 0
    ck = tmp_path / "run" / "checkpoint.npz"
    assert run("eval-det", "--data", tmp_path / "data", "--checkpoint", ck, "--out-dir", tmp_path / "ev") == 0
    rep = EvalReport.from_json((tmp_path / "ev" / "report.json").read_text())
    assert set(rep.map_at_theta) == {0.1, 0.5}
    assert rep.map_at_theta[0.1] >= rep.map_at_theta[0.5]
    assert run("eval-det", "--data", tmp_path / "data", "--checkpoint", ck, "--theta", 0.3,
               "--out-dir", tmp_path / "ev3") == 0
    assert set(EvalReport.from_json((tmp_path / "ev3" / "report.json").read_text()).map_at_theta) == {0.3}
    seq = sorted((tmp_path / "data" / "sequences").glob("*.skel"))[0]
    capsys.readouterr()
    assert run("predict", "--data", seq, "--checkpoint", ck, "--out-dir", tmp_path / "p") == 0
    out = capsys.readouterr().out
    dets = parse_detections(out)
    assert len(dets) == len(out.splitlines())
    assert all(w.seq_id == seq.stem for w in dets)
