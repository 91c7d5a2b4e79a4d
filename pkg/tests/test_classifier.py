import numpy as np
import pytest

from gradcheck import TOL, check_op
from skelconv import autodiff as ad
from skelconv.autodiff import SgdConfig
from skelconv.classifier import (
    ClassifierConfig, SkeletonClassifier, TrainConfig, ablation_configs, count_parameters, forward_classify,
    init_dense, predict, skeleton_transform, train_classifier,
)
from skelconv.skeleton_data import SkeletonSequence, encode_sequence
from skelconv.synthetic import SynthConfig, synthesize_dataset

# Logits of the tiny float64 model below (seed 7) on a fixed normal input; frozen once.
GOLDEN_LOGITS = [3.11062335368538, 2.279545824753818, -7.076535334187555, -0.9816025490208917, -0.9400639550024514]


def tiny_cfg(**kw):
    base = dict(n_joints=8, t_fixed=16, p_fixed=2, class_count=5, conv_channels=(4, 4, 6), fc_hidden=(16, 12),
                dtype="float64")
    base.update(kw)
    return ClassifierConfig(**base)


# ---------------------------------------------------------------- transformer

def test_transform_identity():
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 3))
    np.testing.assert_array_equal(skeleton_transform(x, np.eye(4)).data, x)


def test_transform_midpoint_joint():
    x = np.random.default_rng(1).normal(size=(5, 4, 3))
    w = np.zeros((4, 1))
    w[0, 0] = w[1, 0] = 0.5
    np.testing.assert_allclose(skeleton_transform(x, w).data[:, 0], (x[:, 0] + x[:, 1]) / 2)


def test_transform_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(3, 6, 5, 3)), rng.normal(size=(5, 7))
    out = np.zeros((3, 6, 7, 3))
    for b in range(3):
        for t in range(6):
            for m in range(7):
                for c in range(3):
                    out[b, t, m, c] = sum(w[n, m] * x[b, t, n, c] for n in range(5))
    np.testing.assert_allclose(skeleton_transform(x, w).data, out, rtol=1e-12)


def test_transform_shape_error():
    with pytest.raises(ad.ShapeError):
        skeleton_transform(np.zeros((2, 4, 3)), np.zeros((5, 5)))


@pytest.mark.parametrize("seed", range(4))
def test_transform_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 4, 3)), rng.normal(size=(4, 5))
    assert check_op(skeleton_transform, [x, w]) < TOL


# ---------------------------------------------------------------- model

def test_golden_logits():
    m = SkeletonClassifier.create(tiny_cfg(), 7)
    x = np.random.default_rng(11).normal(size=(1, 2, 2, 16, 8, 3))
    np.testing.assert_allclose(m.logits(x).data[0], GOLDEN_LOGITS, rtol=1e-10)


def test_maxout_person_permutation_invariant():
    m = SkeletonClassifier.create(tiny_cfg(p_fixed=3), 0)
    x = np.random.default_rng(3).normal(size=(2, 3, 2, 16, 8, 3))
    a = m.logits(x).data
    b = m.logits(x[:, [2, 0, 1]]).data
    np.testing.assert_array_equal(a, b)


def test_maxout_duplicate_person_is_noop():
    m = SkeletonClassifier.create(tiny_cfg(p_fixed=1), 0)
    x = np.random.default_rng(4).normal(size=(1, 1, 2, 16, 8, 3))
    one = m.logits(x).data
    two = m.logits(np.concatenate([x, x], axis=1)).data
    np.testing.assert_array_equal(one, two)


def test_forward_classify_accepts_pairs():
    cfg = tiny_cfg()
    m = SkeletonClassifier.create(cfg, 0)
    seq = synthesize_dataset(SynthConfig(n_joints=8, per_class=1, n_classes=2), 0)[0]
    enc = encode_sequence(seq, cfg.t_fixed, cfg.p_fixed)
    np.testing.assert_allclose(forward_classify(enc, m), m.logits(enc[None]).data[0])


def test_wrong_temporal_length_is_rejected():
    m = SkeletonClassifier.create(tiny_cfg(), 0)
    with pytest.raises(ad.ShapeError):
        m.logits(np.zeros((1, 2, 2, 24, 8, 3)))
    with pytest.raises(ad.ShapeError):
        m.logits(np.zeros((1, 2, 2, 16, 9, 3)))


def test_ablations_build_and_run():
    x = np.random.default_rng(5).normal(size=(1, 2, 2, 16, 8, 3))
    for name, cfg in ablation_configs(tiny_cfg(m_joints=12)).items():
        m = SkeletonClassifier.create(cfg, 0)
        assert m.logits(x).shape == (1, 5), name
        assert ("transformer" in m.params) == cfg.use_transformer
        assert ("conv1_motion.w" in m.params) == cfg.use_motion


def test_motion_stream_ignored_without_motion():
    m = SkeletonClassifier.create(tiny_cfg(use_motion=False), 0)
    x = np.random.default_rng(6).normal(size=(1, 2, 2, 16, 8, 3))
    y = x.copy()
    y[:, :, 1] = 0
    np.testing.assert_array_equal(m.logits(x).data, m.logits(y).data)


# ---------------------------------------------------------------- parameter count

def test_count_transformer_and_dense():
    cfg = ClassifierConfig(n_joints=25, m_joints=32, use_motion=False, conv_channels=(1, 1, 1), fc_hidden=(1, 1),
                           class_count=1)
    m = SkeletonClassifier.create(cfg, 0)
    assert m.params["transformer"].data.size == 800
    p = {}
    init_dense(p, "d", 10, 20, np.random.default_rng(0), np.float32, bias=False)
    assert count_parameters(p) == 200


def test_default_count_closed_form():
    cfg = ClassifierConfig()
    c1, c2, c3 = cfg.conv_channels
    k2 = cfg.kernel ** 2
    n, m = cfg.n_joints, cfg.m_joints
    flat = c3 * (cfg.t_fixed // 8) * (m // 8)
    want = (n * m + 2 * (c1 * 3 * k2 + c1) + (c2 * 2 * c1 * k2 + c2) + (c3 * c2 * k2 + c3)
            + (flat * 1024 + 1024) + (1024 * 512 + 512) + (512 * 60 + 60))
    got = count_parameters(SkeletonClassifier.create(cfg, 0))
    assert got == want == 1_382_413
    assert 1_000_000 <= got <= 2_000_000


# ---------------------------------------------------------------- training

def small_train_set(n_joints=8, per_class=3):
    return synthesize_dataset(SynthConfig(n_joints=n_joints, per_class=per_class, n_classes=3), 0)


def test_zero_learning_rate_keeps_parameters():
    cfg = tiny_cfg(class_count=3)
    data = small_train_set()
    res = train_classifier(data, cfg, SgdConfig(learning_rate=0.0, weight_decay=0.0), 1, train_cfg=TrainConfig(epochs=2))
    init = SkeletonClassifier.create(cfg, 1)
    for k, v in init.params.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], v.data)


def test_training_deterministic():
    cfg = tiny_cfg(class_count=3)
    data = small_train_set()
    runs = [train_classifier(data, cfg, SgdConfig(), 5, train_cfg=TrainConfig(epochs=2)) for _ in range(2)]
    assert runs[0].metrics == runs[1].metrics
    for k in runs[0].checkpoint.params:
        np.testing.assert_array_equal(runs[0].checkpoint.params[k], runs[1].checkpoint.params[k])


def test_training_reduces_loss():
    cfg = tiny_cfg(class_count=3)
    res = train_classifier(small_train_set(), cfg, SgdConfig(learning_rate=0.02), 0, train_cfg=TrainConfig(epochs=15))
    assert res.metrics[-1]["train_loss"] < res.metrics[0]["train_loss"]


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        train_classifier(small_train_set(), tiny_cfg(class_count=2), SgdConfig(), 0)


def test_predict_scores_and_tie_rule(tmp_path):
    cfg = tiny_cfg(class_count=3)
    m = SkeletonClassifier.create(cfg, 0)
    seq = small_train_set()[0]
    cls, scores = predict(seq, m)
    assert scores.sum() == pytest.approx(1.0) and cls == int(np.argmax(scores))
    # zero final layer gives uniform scores; ties go to class 0
    m.params["fc3.w"].data[:] = 0
    m.params["fc3.b"].data[:] = 0
    path = m.checkpoint().save(tmp_path / "m.npz")
    cls, scores = predict(seq, ad.ModelCheckpoint.load(path))
    assert cls == 0
    np.testing.assert_allclose(scores, 1 / 3)


def test_predict_rejects_joint_mismatch():
    m = SkeletonClassifier.create(tiny_cfg(), 0)
    seq = SkeletonSequence.from_array(np.zeros((20, 1, 9, 3)))
    with pytest.raises(ValueError):
        predict(seq, m)


def test_wrong_checkpoint_kind():
    ck = ad.ModelCheckpoint("detector", {}, {})
    with pytest.raises(ad.CheckpointError):
        SkeletonClassifier.from_checkpoint(ck)
