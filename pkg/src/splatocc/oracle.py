"""Brute-force references for the optimized code paths.

Nothing here imports the rasterizer, the sampler or the DDA traversal: each
reference recomputes its answer from the defining formula so that agreement
is evidence of correctness rather than of shared bugs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NaiveImage:
    semantic: np.ndarray
    depth: np.ndarray
    alpha_acc: np.ndarray
    contrib_count: np.ndarray


def naive_render(gaussians2d, width: int, height: int, n_logits: int | None = None) -> NaiveImage:
    """Blend every Gaussian at every pixel in (depth, source index) order with no cutoffs."""
    gs = sorted(gaussians2d, key=lambda g: (g.depth, g.source_index))
    if n_logits is None:
        n_logits = len(gs[0].logits) if gs else 0
    sem = np.zeros((height, width, n_logits))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))
    count = np.zeros((height, width), np.int64)
    if not gs:
        return NaiveImage(sem, depth, alpha, count)
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
    trans = np.ones(pix.shape[0])
    sem = sem.reshape(-1, n_logits)
    depth = depth.reshape(-1)
    count = count.reshape(-1)
    for g in gs:
        d = pix - g.mean2d
        q = np.einsum("pi,ij,pj->p", d, g.inv_cov2d, d)
        a = g.opacity * np.exp(-0.5 * q)
        w = a * trans
        sem += w[:, None] * np.asarray(g.logits)[None, :]
        depth += w * g.depth
        count += a > 0
        trans = trans * (1.0 - a)
    return NaiveImage(sem.reshape(height, width, n_logits), depth.reshape(height, width),
                      (1.0 - trans).reshape(height, width), count.reshape(height, width))


@dataclass(frozen=True)
class FiniteDiffSpec:
    step: float = 1e-5
    relative: bool = True
    tolerance: float = 1e-4

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("finite-difference step must be positive")


class NonFiniteEvaluation(ArithmeticError):
    pass


def finite_diff_gradient(fn, x, spec: FiniteDiffSpec | None = None, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``; ``coords`` limits which entries are probed."""
    spec = spec or FiniteDiffSpec()
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        h = spec.step * max(1.0, abs(flat[i])) if spec.relative else spec.step
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def ray_march_reference(grid, origin, direction, step: float, max_distance: float | None = None):
    """Fixed-step march; returns (class, distance) of the first non-free sample or ``None``."""
    geom = grid.geometry
    vs = geom.voxel_size
    if step > vs / 10.0:
        raise ValueError("step must not exceed a tenth of the voxel size")
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lo = np.asarray(geom.origin, dtype=np.float64)
    dims = np.asarray(geom.dims)
    if max_distance is None:
        far = np.maximum(np.abs(lo - o), np.abs(lo + dims * vs - o))
        max_distance = float(np.linalg.norm(far)) + vs
    n = int(np.ceil(max_distance / step)) + 1
    t = np.arange(n) * step
    p = o[None, :] + t[:, None] * d[None, :]
    idx = np.floor((p - lo) / vs).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    lab = np.full(n, grid.free_label)
    ii = idx[inside]
    lab[inside] = grid.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    hit = lab != grid.free_label
    k = np.flatnonzero(hit)
    if k.size == 0:
        return None
    return int(lab[k[0]]), float(t[k[0]])


def trilinear_reference(values: np.ndarray, origin, voxel_size: float, point) -> np.ndarray:
    """Weighted sum over the 8 surrounding voxel centers of a (H, W, Z, C) array."""
    H, W, Z = values.shape[:3]
    u = (np.asarray(point, float) - np.asarray(origin, float)) / voxel_size - 0.5
    base = np.floor(u).astype(int)
    out = np.zeros(values.shape[3])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = base + (dx, dy, dz)
                w = np.prod(1.0 - np.abs(u - c))
                c = np.clip(c, 0, [H - 1, W - 1, Z - 1])
                out += w * values[c[0], c[1], c[2]]
    return out
