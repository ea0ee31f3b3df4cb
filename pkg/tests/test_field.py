import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatocc.field import (FieldConfig, GaussianGrads, NonFiniteParameterError, ParameterGrid,
                            delta_mu_statistics, extract_occupancy, init_field, materialize,
                            materialize_backward, scale_statistics)
from splatocc.geometry import GridGeometry
from splatocc.oracle import finite_diff_gradient

GEOM = GridGeometry((3, 4, 2), (-1.0, -1.0, 0.0), 0.5)


@pytest.mark.parametrize("dims", [(1, 1, 1), (3, 4, 2), (5, 2, 3)])
def test_init_means_at_centers(dims):
    g = GridGeometry(dims, (0.25, -2.0, 1.0), 0.4)
    gs = materialize(init_field(g, 5), FieldConfig())
    assert np.array_equal(gs.means, g.centers())
    assert np.abs(gs.opacities - 0.1).max() < 1e-12
    assert np.allclose(gs.scales, 0.5 * 0.4)


def test_init_same_seed_identical():
    a = init_field(GEOM, 6, seed=3)
    b = init_field(GEOM, 6, seed=3)
    assert a.data.tobytes() == b.data.tobytes()


def test_mean_offset_limits():
    p = init_field(GEOM, 4)
    fc = FieldConfig(clamp_radius_voxels=3)
    p.data[..., p.sl_mu] = 50.0
    gs = materialize(p, fc)
    assert np.allclose(gs.means - gs.centers, 1.5)


@settings(max_examples=30)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(0.1, 5.0))
def test_clamp_bound_strict(raw, radius):
    p = init_field(GEOM, 4)
    p.data[..., p.sl_mu] = raw
    gs = materialize(p, FieldConfig(clamp_radius_voxels=radius))
    bound = radius * GEOM.voxel_size
    assert np.all(np.abs(gs.means - gs.centers) <= bound * (1 + 1e-12))
    if abs(raw) < 5:
        assert np.all(np.abs(gs.means - gs.centers) < bound)


def test_disabled_delta_mu_pins_means():
    p = init_field(GEOM, 4)
    p.data[..., p.sl_mu] = np.random.default_rng(0).normal(size=p.data[..., p.sl_mu].shape)
    gs = materialize(p, FieldConfig(enable_delta_mu=False))
    assert np.array_equal(gs.means, GEOM.centers())


def test_non_finite_names_voxel():
    p = init_field(GEOM, 4)
    p.data[2, 1, 0, 5] = np.nan
    with pytest.raises(NonFiniteParameterError, match=r"\(2, 1, 0\)"):
        materialize(p, FieldConfig())


def test_extract_threshold_is_inclusive():
    p = init_field(GEOM, 4)
    p.data[..., p.ch_opacity] = 0.0  # sigmoid(0) = tau
    p.data[..., p.sl_logits] = [2.0, 1.0, 0.0]
    grid = extract_occupancy(materialize(p, FieldConfig(tau=0.5)), FieldConfig(tau=0.5))
    assert np.all(grid.labels == 0)


def test_extract_all_transparent_is_free():
    p = init_field(GEOM, 4)
    p.data[..., p.ch_opacity] = -40.0
    grid = extract_occupancy(materialize(p, FieldConfig()), FieldConfig())
    assert np.all(grid.labels == 3)


def test_extract_argmax():
    p = init_field(GEOM, 4)
    p.data[..., p.ch_opacity] = np.log(0.9 / 0.1)
    p.data[..., p.sl_logits] = [0.0, 3.0, 1.0]
    fc = FieldConfig()
    g1 = extract_occupancy(materialize(p, fc), fc)
    g2 = extract_occupancy(materialize(p, fc), fc)
    assert np.all(g1.labels == 1)
    assert np.array_equal(g1.labels, g2.labels)


def test_delta_mu_statistics_examples():
    p = init_field(GEOM, 4)
    p.data[..., p.ch_opacity] = 5.0
    fc = FieldConfig()
    h = delta_mu_statistics(materialize(p, fc), fc)
    assert h.fraction_within_half_all == 1.0
    assert h.n_retained == GEOM.n_voxels
    p.data[0, 0, 0, 0] = 100.0
    h = delta_mu_statistics(materialize(p, fc), fc)
    assert h.counts[0, -1] == 1 and h.bin_centers[-1] == pytest.approx(3.0)


def test_scale_statistics_examples():
    p = init_field(GEOM, 4)
    p.data[..., p.ch_opacity] = 5.0
    fc = FieldConfig()
    h = scale_statistics(materialize(p, fc), fc)
    assert h.mean == pytest.approx(fc.base_scale_voxels * GEOM.voxel_size) and h.std == 0.0
    p.data[..., p.sl_s] = 20.0
    h = scale_statistics(materialize(p, fc), fc)
    assert np.all(h.counts[:, -1] == GEOM.n_voxels)
    assert h.bin_centers[-1] == pytest.approx(fc.scale_max_voxels * GEOM.voxel_size)


def _random_grads(rng, n, n_logits):
    return GaussianGrads(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 4)),
                         rng.normal(size=n), rng.normal(size=(n, n_logits)))


@pytest.mark.parametrize("fc", [FieldConfig(enable_delta_r=True), FieldConfig(),
                                FieldConfig(enable_delta_mu=False, enable_delta_s=False)])
def test_materialize_backward_matches_finite_differences(fc, rng):
    p = init_field(GEOM, 4, fc)
    p.data[:] += rng.normal(scale=0.7, size=p.data.shape)
    g = _random_grads(rng, GEOM.n_voxels, 3)

    def scalar(x):
        gs = materialize(p.with_data(x), fc)
        return float(sum(np.sum(getattr(gs, k) * getattr(g, k))
                         for k in ("means", "scales", "rotations", "opacities", "logits")))

    fd = finite_diff_gradient(scalar, p.data)
    an = materialize_backward(p, fc, g)
    assert np.abs(an - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())
    mask = p.channel_mask(fc)
    assert np.all(an[..., ~mask] == 0)


def test_parameter_grid_layout():
    p = init_field(GEOM, 8, FieldConfig(enable_delta_r=True))
    assert p.data.shape == (3, 4, 2, 7 + 7 + 4)
    assert p.sl_logits == slice(7, 14) and p.sl_rot == slice(14, 18)
    with pytest.raises(ValueError):
        ParameterGrid(GEOM, 8, np.zeros((3, 4, 2, 5)))


@pytest.mark.parametrize("kw", [{"tau": 0.0}, {"tau": 1.0}, {"clamp_radius_voxels": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FieldConfig(**kw)


def test_ablation_tokens():
    fc = FieldConfig()
    assert not fc.ablate("no-delta-s").enable_delta_s
    assert not fc.ablate("no-delta-mu").enable_delta_mu
    assert fc.ablate("with-delta-r").enable_delta_r
    assert fc.ablate("clamp-0.2").clamp_radius_voxels == 0.2
    with pytest.raises(ValueError):
        fc.ablate("bogus")
