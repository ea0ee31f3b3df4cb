import numpy as np
import pytest

from splatocc.geometry import GridGeometry
from splatocc.oracle import (FiniteDiffSpec, NonFiniteEvaluation, finite_diff_gradient, naive_render,
                             ray_march_reference, trilinear_reference)
from splatocc.projection import Gaussian2D
from splatocc.scene import VoxelGrid


def _g(x, y, depth, opacity, logits, sigma=1.0, idx=0):
    cov = np.eye(2) * sigma ** 2
    return Gaussian2D(np.array([x, y]), cov, np.linalg.inv(cov), depth, idx, opacity, np.array(logits))


def test_finite_diff_square():
    g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_constant_and_coords():
    g = finite_diff_gradient(lambda x: 4.0, np.ones((2, 3)))
    assert g.shape == (2, 3) and not g.any()
    g = finite_diff_gradient(lambda x: float(x.sum() * 2), np.zeros(4), coords=[1])
    assert np.allclose(g, [0, 2, 0, 0])


def test_finite_diff_non_finite():
    with pytest.raises(NonFiniteEvaluation):
        finite_diff_gradient(lambda x: float(np.log(x[0])), np.array([0.0]))
    with pytest.raises(ValueError):
        FiniteDiffSpec(step=0.0)


def test_naive_render_single_center_pixel():
    out = naive_render([_g(2.5, 1.5, 3.0, 0.5, [1.0, 0.0])], 5, 3)
    assert out.alpha_acc[1, 2] == pytest.approx(0.5)
    assert out.depth[1, 2] == pytest.approx(1.5)
    assert np.allclose(out.semantic[1, 2], [0.5, 0.0])
    assert out.alpha_acc[1, 3] == pytest.approx(0.5 * np.exp(-0.5))


def test_naive_render_orders_by_depth_then_index():
    near = _g(0.5, 0.5, 1.0, 0.5, [1.0, 0.0], sigma=100.0, idx=5)
    far = _g(0.5, 0.5, 2.0, 0.5, [0.0, 1.0], sigma=100.0, idx=0)
    a = naive_render([far, near], 1, 1)
    assert a.depth[0, 0] == pytest.approx(0.5 * 1.0 + 0.25 * 2.0, rel=1e-8)
    assert a.alpha_acc[0, 0] == pytest.approx(0.75, rel=1e-8)
    tie1 = _g(0.5, 0.5, 1.0, 0.5, [1.0, 0.0], sigma=100.0, idx=0)
    tie2 = _g(0.5, 0.5, 1.0, 0.5, [0.0, 1.0], sigma=100.0, idx=1)
    b = naive_render([tie2, tie1], 1, 1)
    assert b.semantic[0, 0, 0] > b.semantic[0, 0, 1]


def test_naive_render_empty():
    out = naive_render([], 4, 2, 3)
    assert out.semantic.shape == (2, 4, 3) and not out.alpha_acc.any()


def test_ray_march_reference():
    geom = GridGeometry((4, 1, 1), (0.0, 0.0, 0.0), 1.0)
    lab = np.full((4, 1, 1), 2, np.uint8)
    lab[2] = 1
    grid = VoxelGrid(geom, lab, 3)
    cls, t = ray_march_reference(grid, (0.0, 0.5, 0.5), (1.0, 0.0, 0.0), 0.01)
    assert cls == 1 and t == pytest.approx(2.0, abs=0.01)
    assert ray_march_reference(grid, (0.0, 0.5, 0.5), (-1.0, 0.0, 0.0), 0.01) is None
    with pytest.raises(ValueError):
        ray_march_reference(grid, (0, 0, 0), (1, 0, 0), 0.2)


def test_trilinear_reference():
    vals = np.arange(8.0).reshape(2, 2, 2, 1)
    assert trilinear_reference(vals, (0, 0, 0), 1.0, (0.5, 0.5, 0.5))[0] == 0.0
    assert trilinear_reference(vals, (0, 0, 0), 1.0, (1.0, 1.0, 1.0))[0] == pytest.approx(3.5)
    assert trilinear_reference(vals, (0, 0, 0), 1.0, (1.5, 0.5, 0.5))[0] == 4.0
