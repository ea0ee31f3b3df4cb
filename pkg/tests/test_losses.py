import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatocc.losses import (LossWeights, class_balance_weights, label_histogram, segmentation_loss,
                             silog_depth_loss, total_loss)
from splatocc.oracle import finite_diff_gradient
from splatocc.scene import GroundTruth2D


def _truth(rng, h=4, w=4, n_cls=3, valid_frac=0.8):
    valid = rng.random((h, w)) < valid_frac
    valid[0, 0] = True
    sem = np.where(valid, rng.integers(0, n_cls, (h, w)), -1).astype(np.int16)
    return GroundTruth2D(sem, np.where(valid, rng.uniform(1, 10, (h, w)), 0.0), valid,
                         valid & (rng.random((h, w)) < 0.4))


def test_one_hot_prediction_has_no_loss():
    gt = _truth(np.random.default_rng(0))
    logits = np.full((4, 4, 3), -50.0)
    for (i, j), c in np.ndenumerate(gt.semantic):
        if c >= 0:
            logits[i, j, c] = 50.0
    assert segmentation_loss(logits, gt, LossWeights(), False).value < 1e-30


def test_uniform_logits_give_log_c():
    gt = _truth(np.random.default_rng(1), n_cls=5)
    t = segmentation_loss(np.zeros((4, 4, 5)), gt, LossWeights(), False)
    assert t.value == pytest.approx(np.log(5), abs=1e-12)


@pytest.mark.parametrize("adjacent", [False, True])
def test_segmentation_gradient(adjacent, rng):
    gt = _truth(rng)
    w = LossWeights(beta=np.array([0.5, 1.0, 2.0]))
    z = rng.normal(size=(4, 4, 3))
    an = segmentation_loss(z, gt, w, adjacent).grad
    fd = finite_diff_gradient(lambda x: segmentation_loss(x, gt, w, adjacent).value, z)
    assert np.abs(an - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


def test_no_valid_pixels():
    gt = GroundTruth2D.empty(4, 4)
    s = segmentation_loss(np.ones((4, 4, 3)), gt, LossWeights(), False)
    d = silog_depth_loss(np.ones((4, 4)), gt, LossWeights(), False)
    for t in (s, d):
        assert t.value == 0.0 and t.empty and not t.grad.any()


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0, 10.0])
def test_silog_scale_invariance(c):
    gt = _truth(np.random.default_rng(2))
    assert silog_depth_loss(c * gt.depth, gt, LossWeights(), False).value < 1e-9


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_silog_scale_invariance_random_prediction(seed, c):
    rng = np.random.default_rng(seed)
    gt = _truth(rng)
    pred = rng.uniform(0.5, 20, (4, 4))
    w = LossWeights()
    a = silog_depth_loss(pred, gt, w, False).value
    b = silog_depth_loss(c * pred, gt, w, False).value
    assert abs(a - b) < 1e-9


@pytest.mark.parametrize("adjacent", [False, True])
def test_silog_gradient(adjacent, rng):
    gt = _truth(rng)
    pred = rng.uniform(0.5, 12, (4, 4))
    w = LossWeights()
    an = silog_depth_loss(pred, gt, w, adjacent).grad
    fd = finite_diff_gradient(lambda x: silog_depth_loss(x, gt, w, adjacent).value, pred)
    assert np.abs(an - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


def test_silog_kink_has_zero_gradient():
    gt = _truth(np.random.default_rng(3))
    t = silog_depth_loss(gt.depth * 3.0, gt, LossWeights(), False)
    assert not t.grad.any()


def test_depth_floor_excludes_pixels():
    gt = _truth(np.random.default_rng(4), valid_frac=1.0)
    pred = gt.depth.copy()
    pred[0, 0] = 0.0
    t = silog_depth_loss(pred, gt, LossWeights(), False)
    assert t.n_valid == 15 and t.grad[0, 0] == 0.0


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.0, 0.9))
def test_lower_alpha_lowers_dynamic_contribution(seed, alpha):
    """Holding predictions fixed, a smaller dynamic weight shrinks the dynamic-pixel share."""
    rng = np.random.default_rng(seed)
    gt = _truth(rng)
    gt.dynamic_mask = gt.valid_mask.copy()
    z = rng.normal(size=(4, 4, 3))
    lo = segmentation_loss(z, gt, LossWeights(alpha_dynamic=alpha), True).value
    hi = segmentation_loss(z, gt, LossWeights(alpha_dynamic=alpha + 0.1), True).value
    assert lo < hi


def test_balance_weight_examples():
    assert np.allclose(class_balance_weights([5, 5, 5]), 1.0)
    assert np.allclose(class_balance_weights([90, 10]), [0.2, 1.8])
    assert np.allclose(class_balance_weights([90, 10], exponent=0), 1.0)
    assert np.allclose(class_balance_weights([0, 0, 0]), 1.0)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=10), st.floats(0, 2))
def test_balance_weights_finite_nonnegative(hist, exponent):
    b = class_balance_weights(hist, exponent)
    assert np.all(np.isfinite(b)) and np.all(b >= 0)
    present = np.asarray(hist) > 0
    if present.any():
        assert b[present].mean() == pytest.approx(1.0)


def test_label_histogram():
    gt = _truth(np.random.default_rng(5))
    h = label_histogram([gt, gt], 3)
    assert h.sum() == 2 * gt.valid_mask.sum()


def test_total_loss_examples():
    assert total_loss(2.0, 0.0, [], [], []).total == 2.0
    assert total_loss(2.0, 0.0, [1.0], [0.0], [0.8]).total == pytest.approx(2.8)
    assert total_loss(1.5, 0.5, [3.0], [4.0], [0.0]).total == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, [1.0], [1.0, 2.0], [0.8])


@given(st.floats(0, 10), st.floats(0, 10), st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10),
                                                               st.floats(0, 2)), max_size=4),
       st.floats(0, 3))
def test_total_loss_decomposition(sc, dc, adj, lam):
    rep = total_loss(sc, dc, [a[0] for a in adj], [a[1] for a in adj], [a[2] for a in adj], lam)
    want = sc + lam * dc + sum(w * (s + lam * d) for s, d, w in adj)
    assert abs(rep.total - want) <= 1e-12 * max(1.0, abs(want))
