import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from skelconv.windows import (
    RegressionTarget, Window, decode_array, decode_window, encode_array, encode_window, iou_1d, iou_matrix, nms,
)


def brute_force_nms(windows, threshold):
    """Re-scan the kept set for every candidate, in priority order."""
    remaining = sorted(enumerate(windows), key=lambda p: (-p[1].score, p[1].start, p[0]))
    kept = []
    for _, w in remaining:
        if all(iou_1d(w, k) <= threshold for k in kept):
            kept.append(w)
    return kept


def random_windows(rng, n, span=100.0):
    s = rng.uniform(0, span, n)
    l = rng.uniform(1, span / 2, n)
    sc = rng.uniform(0, 1, n)
    return [Window(float(a), float(a + b), float(c)) for a, b, c in zip(s, l, sc)]


windows = st.builds(
    lambda s, l: Window(s, s + l),
    st.floats(-1e3, 1e3, allow_nan=False), st.floats(1e-2, 1e3, allow_nan=False),
)


def test_window_validation():
    with pytest.raises(ValueError):
        Window(5.0, 5.0)
    with pytest.raises(ValueError):
        Window(0.0, float("inf"))


def test_iou_examples():
    a = Window(0.0, 10.0)
    assert iou_1d(a, a) == 1.0
    assert iou_1d(a, Window(20.0, 30.0)) == 0.0
    assert iou_1d(a, Window(10.0, 30.0)) == 0.0
    assert iou_1d(a, Window(5.0, 15.0)) == pytest.approx(5 / 15)


@given(windows, windows)
def test_iou_symmetric_and_bounded(a, b):
    v = iou_1d(a, b)
    assert v == iou_1d(b, a)
    assert 0.0 <= v <= 1.0
    if v == 1.0:
        assert math.isclose(a.start, b.start, abs_tol=1e-9) and math.isclose(a.end, b.end, abs_tol=1e-9)


@given(windows, windows, st.floats(-100, 100), st.floats(0.1, 10))
def test_iou_shift_and_scale_invariant(a, b, shift, k):
    moved = [Window(w.start * k + shift, w.end * k + shift) for w in (a, b)]
    assert iou_1d(*moved) == pytest.approx(iou_1d(a, b), abs=1e-6)


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    ws = random_windows(rng, 12)
    m = iou_matrix([[w.start, w.end] for w in ws], [[w.start, w.end] for w in ws[:5]])
    for i, a in enumerate(ws):
        for j, b in enumerate(ws[:5]):
            assert m[i, j] == pytest.approx(iou_1d(a, b), abs=1e-12)


def test_encode_identity_and_formula():
    a = Window(75.0, 125.0)
    assert encode_window(a, a) == RegressionTarget(0.0, 0.0)
    t = encode_window(a, Window(60.0, 160.0))
    assert t.t_c == pytest.approx(0.2)
    assert t.t_l == pytest.approx(math.log(2))
    assert t.t_l == pytest.approx(0.6931, abs=1e-4)


def test_decode_inverts_encode_on_random_pairs():
    rng = np.random.default_rng(1)
    a = random_windows(rng, 500, span=1000)
    g = random_windows(rng, 500, span=1000)
    for x, y in zip(a, g):
        back = decode_window(x, encode_window(x, y))
        assert abs(back.start - y.start) < 1e-9 and abs(back.end - y.end) < 1e-9


@given(windows, windows, st.floats(0.05, 20))
def test_targets_invariant_under_common_scaling(a, g, k):
    t1 = encode_window(a, g)
    t2 = encode_window(Window(a.start * k, a.end * k), Window(g.start * k, g.end * k))
    assert t2.t_c == pytest.approx(t1.t_c, rel=1e-6, abs=1e-6)
    assert t2.t_l == pytest.approx(t1.t_l, rel=1e-6, abs=1e-6)


def test_array_coders_match_scalar():
    rng = np.random.default_rng(2)
    a = random_windows(rng, 50)
    g = random_windows(rng, 50)
    A = np.array([[w.start, w.end] for w in a])
    G = np.array([[w.start, w.end] for w in g])
    T = encode_array(A, G)
    for i in range(50):
        t = encode_window(a[i], g[i])
        assert T[i, 0] == pytest.approx(t.t_c) and T[i, 1] == pytest.approx(t.t_l)
    np.testing.assert_allclose(decode_array(A, T), G, atol=1e-9)


def test_encode_rejects_degenerate():
    class Fake:
        start, end, center = 0.0, 0.0, 0.0

    with pytest.raises(ValueError):
        encode_window(Fake(), Window(0.0, 1.0))


def test_nms_single_and_duplicate():
    w = Window(0.0, 10.0, 0.5)
    assert nms([w], 0.5) == [w]
    hi, lo = Window(0.0, 10.0, 0.9), Window(0.0, 10.0, 0.8)
    assert nms([lo, hi], 0.7) == [hi]


def test_nms_tie_breaks_on_start_then_index():
    a, b = Window(5.0, 15.0, 0.5), Window(0.0, 10.0, 0.5)
    assert nms([a, b], 0.1) == [b]
    c, d = Window(0.0, 10.0, 0.5, class_id=1), Window(0.0, 10.0, 0.5, class_id=2)
    assert nms([c, d], 0.1) == [c]


@pytest.mark.parametrize("seed", range(20))
def test_nms_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    ws = random_windows(rng, 20)
    th = float(rng.uniform(0.1, 0.9))
    assert nms(ws, th) == brute_force_nms(ws, th)


@given(st.lists(windows, min_size=1, max_size=15), st.floats(0.0, 1.0))
def test_nms_output_is_antichain(ws, th):
    kept = nms(ws, th)
    assert all(iou_1d(a, b) <= th for i, a in enumerate(kept) for b in kept[i + 1:])
