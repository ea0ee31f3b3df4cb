import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatocc.geometry import GeometryError, GridGeometry
from splatocc.metrics import (RayFan, RayQuery, compute_miou, compute_rayiou, count_runs,
                              dda_first_hit, duplicate_ratio, evaluate, rayiou_from_hits, traverse)
from splatocc.scene import SceneRecipe, VoxelGrid, generate_scene
from splatocc.verify import dda_agrees

VS = 0.5
GEOM = GridGeometry((16, 16, 16), (0.0, 0.0, 0.0), VS)


def _grid(labels, geom=GEOM, n=4):
    return VoxelGrid(geom, labels, n)


def _free(geom=GEOM, n=4):
    return VoxelGrid.empty(geom, n)


def test_empty_grid_misses():
    assert dda_first_hit(_free(), RayQuery([1, 1, 1], [1, 0, 0])) is None


def test_face_distance():
    g = _free()
    g.labels[2, 5, 5] = 1
    c = 5.5 * VS
    hit = dda_first_hit(g, RayQuery([0.5 * VS, c, c], [1, 0, 0]))
    assert hit == (1, pytest.approx(1.5 * VS))


def test_origin_inside_occupied():
    g = _free()
    g.labels[3, 3, 3] = 2
    assert dda_first_hit(g, RayQuery(GEOM.center_of((3, 3, 3)), [0, 0, 1])) == (2, 0.0)


def test_origin_outside_grid():
    g = _free()
    g.labels[0, 4, 4] = 1
    hit = dda_first_hit(g, RayQuery([-1.0, 4.25 * VS, 4.25 * VS], [1, 0, 0]))
    assert hit == (1, pytest.approx(1.0))


def test_random_rays_match_ray_march():
    rng = np.random.default_rng(0)
    geom = GridGeometry((16, 16, 16), (-4.0, -4.0, -4.0), VS)
    labels = np.where(rng.random(geom.dims) < 0.05, rng.integers(0, 3, geom.dims), 3)
    g = _grid(labels, geom)
    for _ in range(1000):
        d = rng.normal(size=3)
        assert dda_agrees(g, RayQuery(rng.uniform(-4, 4, 3), d / np.linalg.norm(d)), VS / 100)


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_traversal_steps_are_face_adjacent(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    ray = RayQuery(rng.uniform(-2, 10, 3), d / np.linalg.norm(d))
    path = traverse(_free(), ray)
    if len(path) > 1:
        steps = np.abs(np.diff(path, axis=0))
        assert np.all(steps.sum(axis=1) == 1)
    assert len({tuple(p) for p in path}) == len(path)


def test_miou_examples():
    g = GridGeometry((2, 2, 1), (0, 0, 0), 1.0)
    gt = _grid(np.array([[[0], [1]], [[1], [3]]]), g)
    assert compute_miou(gt, gt).miou == 1.0
    assert compute_miou(_free(g), gt).per_class_iou == {0: 0.0, 1: 0.0}
    pred = _grid(np.array([[[0], [0]], [[1], [3]]]), g)
    m = compute_miou(pred, gt)
    # class 0: inter 1, union 2; class 1: inter 1, union 2
    assert m.per_class_iou == {0: 0.5, 1: 0.5} and m.miou == 0.5


def test_dims_mismatch():
    with pytest.raises(GeometryError):
        compute_miou(_free(), _free(GridGeometry((2, 2, 2), (0, 0, 0), 1.0)))


FAN = RayFan(90, 8)


def _scene_pair(seed):
    s = generate_scene(seed, (16, 16, 6), 1, SceneRecipe(occluder_pair=False))
    return s.frames[0]


def test_rayiou_perfect_and_empty():
    gt = _scene_pair(1)
    o = np.array([[0.0, 0.0, 0.5]])
    r = compute_rayiou(gt, gt, o, FAN)
    assert r.rayiou_1m == r.rayiou_2m == r.rayiou_4m == 1.0
    r = compute_rayiou(_free(gt.geometry, gt.num_classes), gt, o, FAN)
    assert r.rayiou_mean == 0.0
    r = compute_rayiou(gt, _free(gt.geometry, gt.num_classes), o, FAN)
    assert r.empty


def _wall(offset_voxels, geom, thickness=1):
    lab = np.full(geom.dims, 3)
    lab[8 + offset_voxels:8 + offset_voxels + thickness, :, :] = 1
    return _grid(lab, geom)


@pytest.mark.parametrize("shift_m,tp", [(0.75, {1.0: True, 2.0: True, 4.0: True}),
                                        (2.5, {1.0: False, 2.0: False, 4.0: True})])
def test_displacement_fixtures(shift_m, tp):
    """A wall displaced along the +x rays is a TP only where the threshold exceeds the shift."""
    geom = GridGeometry((40, 4, 4), (0.0, -0.6, -0.6), 0.25)
    gt = _wall(0, geom)
    pred = _wall(int(round(shift_m / geom.voxel_size)), geom)
    o = np.zeros((1, 3))
    d = np.array([[1.0, 0, 0]])
    gc, gd = dda_first_hit(gt, RayQuery(o[0], d[0]))
    pc, pd = dda_first_hit(pred, RayQuery(o[0], d[0]))
    assert pd - gd == pytest.approx(shift_m)
    per = rayiou_from_hits([gc], [gd], [pc], [pd])
    for th, want in tp.items():
        assert (per[th][1] == 1.0) is want


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_rayiou_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    geom = GridGeometry((10, 10, 4), (-2.5, -2.5, -1.0), VS)
    gt = _grid(np.where(rng.random(geom.dims) < 0.15, rng.integers(0, 3, geom.dims), 3), geom)
    pred = _grid(np.where(rng.random(geom.dims) < 0.15, rng.integers(0, 3, geom.dims), 3), geom)
    r = compute_rayiou(pred, gt, np.zeros((1, 3)), RayFan(36, 4))
    if not r.empty:
        assert r.rayiou_1m <= r.rayiou_2m <= r.rayiou_4m
        assert 0.0 <= r.rayiou_1m and r.rayiou_4m <= 1.0
        assert r.rayiou_mean == pytest.approx((r.rayiou_1m + r.rayiou_2m + r.rayiou_4m) / 3)


def test_duplicate_ratio_examples():
    geom = GridGeometry((20, 20, 4), (-5.0, -5.0, -1.0), VS)
    ring = np.full(geom.dims, 3)
    idx = geom.voxel_indices()
    r = np.linalg.norm(geom.centers()[:, :2], axis=1)
    shell = (r >= 3.0) & (r < 3.5)
    ring.reshape(-1)[shell] = 1
    gt = _grid(ring, geom)
    o = np.array([[0.0, 0.0, 0.25]])
    fan = RayFan(72, 1, 0.0, 0.0)
    assert duplicate_ratio(gt, gt, o, fan) == 0.0
    assert duplicate_ratio(_free(geom), gt, o, fan) == 0.0
    thick = ring.copy()
    thick.reshape(-1)[(r >= 3.0) & (r < 4.0)] = 1
    assert duplicate_ratio(_grid(thick, geom), gt, o, fan) == 0.0
    detached = ring.copy()
    detached.reshape(-1)[(r >= 4.25) & (r < 4.75)] = 2
    assert duplicate_ratio(_grid(detached, geom), gt, o, fan) == 1.0
    assert idx.shape[0] == geom.n_voxels


def test_count_runs():
    g = _free()
    g.labels[3:5, 5, 5] = 1
    g.labels[8, 5, 5] = 2
    c = 5.5 * VS
    assert count_runs(g, [[0.1, c, c]], [[1.0, 0, 0]])[0] == 2


def test_evaluate_combines_reports():
    gt = _scene_pair(2)
    r = evaluate(gt, gt, np.array([[0, 0, 0.5]]), FAN)
    assert r.miou == 1.0 and r.rayiou_mean == 1.0 and r.duplicate_ratio == 0.0
    d = r.to_dict()
    assert list(d)[:6] == ["miou", "rayiou", "rayiou_1m", "rayiou_2m", "rayiou_4m", "duplicate_ratio"]
    assert len(r.csv_row()) == len(r.CSV_FIELDS)


def test_thickening_hurts_rayiou_not_surface_iou():
    """Thickening surfaces toward the sensor keeps every GT voxel covered but shortens first hits."""
    geom = GridGeometry((20, 20, 4), (-5.0, -5.0, -1.0), VS)
    r = np.linalg.norm(geom.centers()[:, :2], axis=1)
    ring = np.full(geom.dims, 3)
    ring.reshape(-1)[(r >= 3.0) & (r < 3.5)] = 1
    thick = ring.copy()
    thick.reshape(-1)[(r >= 1.5) & (r < 3.5)] = 1
    gt, pred = _grid(ring, geom), _grid(thick, geom)
    assert np.all(pred.labels[gt.labels == 1] == 1)
    o = np.array([[0.0, 0.0, 0.25]])
    fan = RayFan(72, 1, 0.0, 0.0)
    assert compute_rayiou(pred, gt, o, fan).rayiou_1m < compute_rayiou(gt, gt, o, fan).rayiou_1m
