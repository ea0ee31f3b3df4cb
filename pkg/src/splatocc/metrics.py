"""Occupancy evaluation: voxel mIoU, first-contact RayIoU and the duplicate-run diagnostic.

All ray work goes through an Amanatides-Woo traversal compiled with numba; rays
are independent, so the batch kernels run under ``prange`` and the result does
not depend on the thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .geometry import GeometryError

MISS = -1
DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class RayQuery:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RayFan:
    n_azimuth: int = 360
    n_elevation: int = 32
    elevation_min_deg: float = -10.0
    elevation_max_deg: float = 20.0

    def directions(self) -> np.ndarray:
        return fan_directions(self.n_azimuth, self.n_elevation,
                              self.elevation_min_deg, self.elevation_max_deg)


@dataclass
class MetricReport:
    per_class_iou: dict[int, float] = field(default_factory=dict)
    miou: float = float("nan")
    rayiou_1m: float = float("nan")
    rayiou_2m: float = float("nan")
    rayiou_4m: float = float("nan")
    rayiou_mean: float = float("nan")
    duplicate_ratio: float = float("nan")
    per_class_rayiou: dict[float, dict[int, float]] = field(default_factory=dict)
    n_gt_rays: int = 0
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "rayiou": self.rayiou_mean,
            "rayiou_1m": self.rayiou_1m,
            "rayiou_2m": self.rayiou_2m,
            "rayiou_4m": self.rayiou_4m,
            "duplicate_ratio": self.duplicate_ratio,
            "n_gt_rays": self.n_gt_rays,
            "empty": self.empty,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
        }

    CSV_FIELDS = ("miou", "rayiou", "rayiou_1m", "rayiou_2m", "rayiou_4m",
                  "duplicate_ratio", "n_gt_rays")

    def csv_row(self) -> list:
        d = self.to_dict()
        return [d[k] for k in self.CSV_FIELDS]


def fan_directions(n_az: int, n_el: int, el_min_deg: float, el_max_deg: float) -> np.ndarray:
    """Uniform azimuth x elevation unit directions, azimuth-major: shape (n_el * n_az, 3)."""
    az = 2.0 * np.pi * np.arange(n_az) / n_az
    if n_el == 1:
        el = np.array([np.deg2rad(0.5 * (el_min_deg + el_max_deg))])
    else:
        el = np.deg2rad(np.linspace(el_min_deg, el_max_deg, n_el))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1)
    return d.reshape(-1, 3)


# --------------------------------------------------------------------------- traversal

@njit(cache=True)
def _slab(o, d, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if d[a] != 0.0:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o[a] < lo[a] or o[a] >= hi[a]:
            return np.inf, -np.inf
    return t0, t1


@njit(cache=True)
def _setup(o, d, lo, hi, vs, dims):
    """Entry voxel and stepping state; ``ok`` false when the ray misses the box."""
    idx = np.zeros(3, np.int64)
    step = np.zeros(3, np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    t0, t1 = _slab(o, d, lo, hi)
    if t0 < 0.0:
        t0 = 0.0
    if t1 <= t0:
        return False, idx, step, tmax, tdelta, t0, t1
    for a in range(3):
        p = o[a] + t0 * d[a]
        i = int(math.floor((p - lo[a]) / vs))
        if i < 0:
            i = 0
        if i > dims[a] - 1:
            i = dims[a] - 1
        idx[a] = i
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (lo[a] + (i + 1) * vs - o[a]) / d[a]
            tdelta[a] = vs / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (lo[a] + i * vs - o[a]) / d[a]
            tdelta[a] = -vs / d[a]
    return True, idx, step, tmax, tdelta, t0, t1


@njit(cache=True)
def _advance(idx, step, tmax, tdelta, dims):
    """Step into the next voxel. Returns (entry t, still inside)."""
    if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
        a = 0
    elif tmax[1] <= tmax[2]:
        a = 1
    else:
        a = 2
    t = tmax[a]
    idx[a] += step[a]
    tmax[a] += tdelta[a]
    inside = 0 <= idx[a] < dims[a]
    return t, inside


@njit(cache=True)
def _first_hit(labels, free, lo, hi, vs, dims, o, d):
    ok, idx, step, tmax, tdelta, t, t1 = _setup(o, d, lo, hi, vs, dims)
    if not ok:
        return -1, np.inf
    while True:
        lab = labels[idx[0], idx[1], idx[2]]
        if lab != free:
            return lab, t
        t, inside = _advance(idx, step, tmax, tdelta, dims)
        if not inside:
            return -1, np.inf


@njit(cache=True, parallel=True)
def _first_hits(labels, free, lo, hi, vs, dims, origins, dirs, out_cls, out_dist):
    for r in prange(origins.shape[0]):
        c, t = _first_hit(labels, free, lo, hi, vs, dims, origins[r], dirs[r])
        out_cls[r] = c
        out_dist[r] = t


@njit(cache=True)
def _visit(labels, lo, hi, vs, dims, o, d, out):
    ok, idx, step, tmax, tdelta, t, t1 = _setup(o, d, lo, hi, vs, dims)
    n = 0
    if not ok:
        return n
    while True:
        out[n, 0] = idx[0]
        out[n, 1] = idx[1]
        out[n, 2] = idx[2]
        n += 1
        t, inside = _advance(idx, step, tmax, tdelta, dims)
        if not inside:
            return n


@njit(cache=True, parallel=True)
def _count_runs(occ, lo, hi, vs, dims, origins, dirs, out_runs):
    for r in prange(origins.shape[0]):
        ok, idx, step, tmax, tdelta, t, t1 = _setup(origins[r], dirs[r], lo, hi, vs, dims)
        runs = 0
        prev = False
        if ok:
            while True:
                cur = occ[idx[0], idx[1], idx[2]] != 0
                if cur and not prev:
                    runs += 1
                prev = cur
                t, inside = _advance(idx, step, tmax, tdelta, dims)
                if not inside:
                    break
        out_runs[r] = runs


def _grid_args(grid):
    g = grid.geometry
    return (g.origin_array, g.upper, g.voxel_size, np.array(g.dims, dtype=np.int64))


def _as_rays(origins, dirs):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if origins.shape[0] == 1 and dirs.shape[0] > 1:
        origins = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape))
    return origins, dirs


def cast_rays(grid, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
    """First non-free voxel along each ray: (class or MISS, entry distance or inf)."""
    origins, dirs = _as_rays(origins, dirs)
    n = origins.shape[0]
    cls = np.empty(n, np.int64)
    dist = np.empty(n, np.float64)
    lo, hi, vs, dims = _grid_args(grid)
    labels = np.ascontiguousarray(grid.labels, dtype=np.int64)
    _first_hits(labels, grid.free_label, lo, hi, vs, dims, origins, dirs, cls, dist)
    return cls, dist


def dda_first_hit(grid, ray: RayQuery):
    """``(class, distance)`` of the first occupied voxel, or ``None`` on a miss."""
    cls, dist = cast_rays(grid, ray.origin[None], ray.direction[None])
    if cls[0] == MISS:
        return None
    return int(cls[0]), float(dist[0])


def traverse(grid, ray: RayQuery) -> np.ndarray:
    """Voxel indices visited by the ray inside the grid, in order: shape (n, 3)."""
    lo, hi, vs, dims = _grid_args(grid)
    out = np.empty((int(dims.sum()) + 4, 3), np.int64)
    n = _visit(np.zeros(1, np.int64), lo, hi, vs, dims, ray.origin, ray.direction, out)
    return out[:n].copy()


def count_runs(grid, origins, dirs) -> np.ndarray:
    """Number of contiguous occupied runs each ray crosses."""
    origins, dirs = _as_rays(origins, dirs)
    lo, hi, vs, dims = _grid_args(grid)
    occ = np.ascontiguousarray(grid.labels != grid.free_label, dtype=np.uint8)
    out = np.empty(origins.shape[0], np.int64)
    _count_runs(occ, lo, hi, vs, dims, origins, dirs, out)
    return out


# --------------------------------------------------------------------------- metrics

def _check_pair(pred, gt):
    if pred.geometry != gt.geometry or pred.labels.shape != gt.labels.shape:
        raise GeometryError(f"grid mismatch: {pred.geometry} vs {gt.geometry}")
    if pred.num_classes != gt.num_classes:
        raise GeometryError("class count mismatch between prediction and ground truth")


def compute_miou(pred, gt, eval_classes=None) -> MetricReport:
    _check_pair(pred, gt)
    if eval_classes is None:
        eval_classes = range(gt.num_classes - 1)
    p = pred.labels.ravel()
    g = gt.labels.ravel()
    per_class = {}
    for c in eval_classes:
        pc, gc = p == c, g == c
        union = np.count_nonzero(pc | gc)
        if union == 0:
            continue
        per_class[int(c)] = np.count_nonzero(pc & gc) / union
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return MetricReport(per_class_iou=per_class, miou=miou)


def ray_outcomes(pred, gt, origins, fan: RayFan | None = None, dirs=None):
    """Cast the same fan from every origin into both grids."""
    if dirs is None:
        dirs = (fan or RayFan()).directions()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    all_o = np.repeat(origins, dirs.shape[0], axis=0)
    all_d = np.tile(dirs, (origins.shape[0], 1))
    gc, gd = cast_rays(gt, all_o, all_d)
    pc, pd = cast_rays(pred, all_o, all_d)
    return all_o, all_d, gc, gd, pc, pd


def rayiou_from_hits(gt_cls, gt_dist, pred_cls, pred_dist, thresholds=DEFAULT_THRESHOLDS,
                     classes=None):
    """Class-averaged IoU over ray queries at each distance threshold."""
    gt_cls = np.asarray(gt_cls)
    pred_cls = np.asarray(pred_cls)
    if classes is None:
        classes = np.unique(gt_cls[gt_cls != MISS])
    same = (gt_cls == pred_cls) & (gt_cls != MISS)
    err = np.full(gt_cls.shape, np.inf)
    err[same] = np.abs(np.asarray(pred_dist)[same] - np.asarray(gt_dist)[same])
    out = {}
    for th in thresholds:
        tp_ray = same & (err < th)
        per = {}
        for c in classes:
            tp = np.count_nonzero(tp_ray & (gt_cls == c))
            n_gt = np.count_nonzero(gt_cls == c)
            n_pred = np.count_nonzero(pred_cls == c)
            denom = n_gt + n_pred - tp
            per[int(c)] = tp / denom if denom else float("nan")
        out[float(th)] = per
    return out


def compute_rayiou(pred, gt, origins, fan: RayFan | None = None,
                   thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    _check_pair(pred, gt)
    _, _, gc, gd, pc, pd = ray_outcomes(pred, gt, origins, fan)
    report = MetricReport(n_gt_rays=int(np.count_nonzero(gc != MISS)))
    if report.n_gt_rays == 0:
        report.empty = True
        return report
    per = rayiou_from_hits(gc, gd, pc, pd, thresholds)
    report.per_class_rayiou = per
    vals = {th: float(np.nanmean(list(v.values()))) for th, v in per.items()}
    names = {1.0: "rayiou_1m", 2.0: "rayiou_2m", 4.0: "rayiou_4m"}
    for th, v in vals.items():
        if th in names:
            setattr(report, names[th], v)
    report.rayiou_mean = float(np.mean(list(vals.values())))
    return report


def duplicate_ratio(pred, gt, origins, fan: RayFan | None = None) -> float:
    """Fraction of GT-hitting rays along which the prediction has more occupied runs than GT."""
    _check_pair(pred, gt)
    dirs = (fan or RayFan()).directions()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    all_o = np.repeat(origins, dirs.shape[0], axis=0)
    all_d = np.tile(dirs, (origins.shape[0], 1))
    gc, _ = cast_rays(gt, all_o, all_d)
    hit = gc != MISS
    if not hit.any():
        return 0.0
    runs_p = count_runs(pred, all_o[hit], all_d[hit])
    runs_g = count_runs(gt, all_o[hit], all_d[hit])
    return float(np.mean(runs_p > runs_g))


def evaluate(pred, gt, origins, fan: RayFan | None = None,
             thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    report = compute_rayiou(pred, gt, origins, fan, thresholds)
    m = compute_miou(pred, gt)
    report.per_class_iou = m.per_class_iou
    report.miou = m.miou
    report.duplicate_ratio = duplicate_ratio(pred, gt, origins, fan)
    return report
