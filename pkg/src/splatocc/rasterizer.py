"""Tile-based alpha-blending rasterizer for semantic logits and depth, with its exact backward.

Every pixel blends the Gaussians of its tile front to back in (depth, source
index) order. Each tile is handled by one thread and writes only its own
pixels, and backward gradients are stored per (tile, Gaussian) instance and
reduced serially in instance order, so outputs are bit-identical for any
thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange

from .field import GaussianGrads
from .projection import (BLUR_FLOOR, SIGMA_EXTENT, ProjectedGaussians, project_backward,
                         project_gaussians)


class TranscriptError(RuntimeError):
    """Backward called with a transcript that does not match its forward pass."""


@dataclass(frozen=True)
class RenderConfig:
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    tile_size: int = 16
    sigma_extent: float = SIGMA_EXTENT
    blur_floor: float = BLUR_FLOOR
    normalize_depth: bool = False

    def exact(self) -> "RenderConfig":
        """All cutoffs disabled: every Gaussian in front of the camera reaches every pixel."""
        return replace(self, alpha_min=0.0, t_min=0.0, sigma_extent=float("inf"))


@dataclass
class RenderOutput:
    semantic: np.ndarray       # (H, W, L-1)
    depth: np.ndarray          # (H, W)
    alpha_acc: np.ndarray      # (H, W)
    contrib_count: np.ndarray  # (H, W)

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class PixelGradients:
    d_semantic: np.ndarray
    d_depth: np.ndarray
    d_alpha: np.ndarray | None = None


@dataclass
class Transcript:
    width: int
    height: int
    tile_size: int
    tiles_x: int
    inst_gauss: np.ndarray
    inst_tile: np.ndarray
    tile_start: np.ndarray
    tile_end: np.ndarray
    boxes: np.ndarray
    means: np.ndarray
    conics: np.ndarray
    opac: np.ndarray
    feats: np.ndarray
    alpha_min: float
    t_min: float
    count: np.ndarray
    blended: np.ndarray
    normalize_depth: bool
    n_gauss: int


@dataclass
class RasterGrads:
    d_mean2d: np.ndarray
    d_conic: np.ndarray
    d_opacity: np.ndarray
    d_logits: np.ndarray
    d_depth: np.ndarray


def gaussian_weight(g2d, pixel) -> float:
    d = np.asarray(pixel, dtype=np.float64) - g2d.mean2d
    return float(np.exp(-0.5 * d @ g2d.inv_cov2d @ d))


# --------------------------------------------------------------------------- kernels

@njit(cache=True, parallel=True)
def _forward_kernel(tile_start, tile_end, inst, boxes, means, conics, opac, feats,
                    width, height, tile, tiles_x, alpha_min, t_min, out, t_out, n_out):
    C = feats.shape[1]
    for t in prange(tile_start.shape[0]):
        s0, s1 = tile_start[t], tile_end[t]
        if s0 == s1:
            continue
        x0 = (t % tiles_x) * tile
        y0 = (t // tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                n = 0
                for s in range(s0, s1):
                    g = inst[s]
                    if px < boxes[g, 0] or px > boxes[g, 2] or py < boxes[g, 1] or py > boxes[g, 3]:
                        continue
                    dx = px + 0.5 - means[g, 0]
                    dy = py + 0.5 - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    a = opac[g] * np.exp(power)
                    if a < alpha_min:
                        continue
                    w = a * T
                    for c in range(C):
                        out[py, px, c] += w * feats[g, c]
                    T = T * (1.0 - a)
                    n += 1
                    if T < t_min:
                        break
                t_out[py, px] = T
                n_out[py, px] = n


@njit(cache=True, parallel=True)
def _backward_kernel(tile_start, tile_end, inst, boxes, means, conics, opac, feats,
                     width, height, tile, tiles_x, alpha_min, t_min, d_out, g_inst):
    C = feats.shape[1]
    for t in prange(tile_start.shape[0]):
        s0, s1 = tile_start[t], tile_end[t]
        if s0 == s1:
            continue
        L = s1 - s0
        sidx = np.empty(L, np.int64)
        avals = np.empty(L)
        gvals = np.empty(L)
        tvals = np.empty(L)
        dxs = np.empty(L)
        dys = np.empty(L)
        R = np.empty(C)
        x0 = (t % tiles_x) * tile
        y0 = (t // tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                n = 0
                for s in range(s0, s1):
                    g = inst[s]
                    if px < boxes[g, 0] or px > boxes[g, 2] or py < boxes[g, 1] or py > boxes[g, 3]:
                        continue
                    dx = px + 0.5 - means[g, 0]
                    dy = py + 0.5 - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    G = np.exp(power)
                    a = opac[g] * G
                    if a < alpha_min:
                        continue
                    sidx[n] = s
                    avals[n] = a
                    gvals[n] = G
                    tvals[n] = T
                    dxs[n] = dx
                    dys[n] = dy
                    T = T * (1.0 - a)
                    n += 1
                    if T < t_min:
                        break
                for c in range(C):
                    R[c] = 0.0
                for m in range(n - 1, -1, -1):
                    s = sidx[m]
                    g = inst[s]
                    a = avals[m]
                    Tk = tvals[m]
                    dl_da = 0.0
                    for c in range(C):
                        gc = d_out[py, px, c]
                        f = feats[g, c]
                        g_inst[s, 6 + c] += a * Tk * gc
                        dl_da += (f - R[c]) * gc
                        R[c] = a * f + (1.0 - a) * R[c]
                    dl_da *= Tk
                    G = gvals[m]
                    g_inst[s, 5] += dl_da * G
                    dl_dp = dl_da * opac[g] * G
                    dx = dxs[m]
                    dy = dys[m]
                    g_inst[s, 0] += dl_dp * (conics[g, 0] * dx + conics[g, 1] * dy)
                    g_inst[s, 1] += dl_dp * (conics[g, 1] * dx + conics[g, 2] * dy)
                    g_inst[s, 2] += dl_dp * (-0.5 * dx * dx)
                    g_inst[s, 3] += dl_dp * (-dx * dy)
                    g_inst[s, 4] += dl_dp * (-0.5 * dy * dy)


@njit(cache=True)
def _reduce_instances(inst, g_inst, out):
    for s in range(inst.shape[0]):
        g = inst[s]
        for c in range(g_inst.shape[1]):
            out[g, c] += g_inst[s, c]


# --------------------------------------------------------------------------- binning

def _bin(proj: ProjectedGaussians, width: int, height: int, tile: int):
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    n_tiles = tiles_x * tiles_y
    M = len(proj)
    if M == 0:
        empty = np.zeros(0, np.int64)
        z = np.zeros(n_tiles, np.int64)
        return tiles_x, empty, empty, z, z
    tx0 = proj.boxes[:, 0] // tile
    tx1 = proj.boxes[:, 2] // tile
    ty0 = proj.boxes[:, 1] // tile
    ty1 = proj.boxes[:, 3] // tile
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    g = np.repeat(np.arange(M), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(g.size) - first
    tile_id = (ty0[g] + local // nx[g]) * tiles_x + tx0[g] + local % nx[g]
    order = np.lexsort((proj.index[g], proj.depth[g], tile_id))
    inst = g[order]
    inst_tile = tile_id[order]
    starts = np.searchsorted(inst_tile, np.arange(n_tiles), "left")
    ends = np.searchsorted(inst_tile, np.arange(n_tiles), "right")
    return tiles_x, inst, inst_tile, starts, ends


def _features(proj: ProjectedGaussians) -> np.ndarray:
    M = len(proj)
    return np.ascontiguousarray(np.concatenate(
        [proj.logits.reshape(M, proj.logits.shape[-1]), proj.depth[:, None], np.ones((M, 1))], axis=1))


def rasterize_forward(proj: ProjectedGaussians, width: int, height: int,
                      config: RenderConfig | None = None):
    """Blend projected Gaussians into per-pixel logits, depth and accumulated alpha."""
    cfg = config or RenderConfig()
    n_logits = proj.logits.shape[1]
    tile = int(cfg.tile_size)
    tiles_x, inst, inst_tile, starts, ends = _bin(proj, width, height, tile)
    feats = _features(proj)
    C = feats.shape[1]
    blended = np.zeros((height, width, C))
    t_out = np.ones((height, width))
    n_out = np.zeros((height, width), np.int64)
    means = np.ascontiguousarray(proj.mean2d)
    conics = np.ascontiguousarray(proj.conic)
    opac = np.ascontiguousarray(proj.opacity, dtype=np.float64)
    boxes = np.ascontiguousarray(proj.boxes)
    if inst.size:
        _forward_kernel(starts, ends, inst, boxes, means, conics, opac, feats, width, height,
                        tile, tiles_x, float(cfg.alpha_min), float(cfg.t_min), blended, t_out, n_out)
    alpha = blended[..., -1]
    depth = blended[..., n_logits]
    if cfg.normalize_depth:
        depth = np.where(alpha > 0, depth / np.where(alpha > 0, alpha, 1.0), 0.0)
    out = RenderOutput(blended[..., :n_logits].copy(), depth.copy(), 1.0 - t_out, n_out)
    tr = Transcript(width, height, tile, tiles_x, inst, inst_tile, starts, ends, boxes, means,
                    conics, opac, feats, float(cfg.alpha_min), float(cfg.t_min), n_out, blended,
                    bool(cfg.normalize_depth), len(proj))
    return out, tr


def _check_transcript(tr: Transcript, grads: PixelGradients, n_logits: int):
    if grads.d_semantic.shape != (tr.height, tr.width, n_logits):
        raise TranscriptError(f"semantic gradient shape {grads.d_semantic.shape} does not match "
                              f"render of {tr.height}x{tr.width}x{n_logits}")
    if grads.d_depth.shape != (tr.height, tr.width):
        raise TranscriptError("depth gradient shape does not match the rendered image")
    if tr.feats.shape[0] != tr.n_gauss or tr.inst_gauss.shape != tr.inst_tile.shape:
        raise TranscriptError("transcript size mismatch")
    if tr.inst_gauss.size:
        if tr.inst_gauss.max() >= tr.n_gauss or np.any(np.diff(tr.inst_tile) < 0):
            raise TranscriptError("transcript instance list is not in tile order")
        same = np.diff(tr.inst_tile) == 0
        d = tr.feats[tr.inst_gauss, n_logits]
        if np.any(np.diff(d)[same] < 0):
            raise TranscriptError("transcript instance list is not depth-sorted within tiles")


def rasterize_backward(tr: Transcript, grads: PixelGradients) -> RasterGrads:
    """Exact reverse-mode gradients of the blending w.r.t. every projected Gaussian input."""
    n_logits = tr.feats.shape[1] - 2
    _check_transcript(tr, grads, n_logits)
    d_out = np.zeros((tr.height, tr.width, tr.feats.shape[1]))
    d_out[..., :n_logits] = grads.d_semantic
    d_depth = np.asarray(grads.d_depth, dtype=np.float64)
    d_alpha = np.zeros((tr.height, tr.width)) if grads.d_alpha is None else np.array(grads.d_alpha, float)
    if tr.normalize_depth:
        raw = tr.blended[..., n_logits]
        alpha = tr.blended[..., -1]
        safe = np.where(alpha > 0, alpha, 1.0)
        d_out[..., n_logits] = np.where(alpha > 0, d_depth / safe, 0.0)
        d_alpha = d_alpha - np.where(alpha > 0, d_depth * raw / (safe * safe), 0.0)
    else:
        d_out[..., n_logits] = d_depth
    d_out[..., -1] = d_alpha
    g = np.zeros((tr.n_gauss, 6 + tr.feats.shape[1]))
    if tr.inst_gauss.size:
        g_inst = np.zeros((tr.inst_gauss.size, g.shape[1]))
        _backward_kernel(tr.tile_start, tr.tile_end, tr.inst_gauss, tr.boxes, tr.means, tr.conics,
                         tr.opac, tr.feats, tr.width, tr.height, tr.tile_size, tr.tiles_x,
                         tr.alpha_min, tr.t_min, d_out, g_inst)
        _reduce_instances(tr.inst_gauss, g_inst, g)
    return RasterGrads(d_mean2d=g[:, 0:2], d_conic=g[:, 2:5], d_opacity=g[:, 5],
                       d_logits=g[:, 6:6 + n_logits], d_depth=g[:, 6 + n_logits])


# --------------------------------------------------------------------------- full view

@dataclass
class ViewContext:
    view: object
    proj: ProjectedGaussians
    transcript: Transcript


def render_gaussians(gaussians, view, config: RenderConfig | None = None):
    """Project and rasterize one camera view; returns the output and a backward context."""
    cfg = config or RenderConfig()
    proj = project_gaussians(gaussians, view, cfg.blur_floor, cfg.sigma_extent)
    out, tr = rasterize_forward(proj, view.width, view.height, cfg)
    return out, ViewContext(view, proj, tr)


def render_gaussians_backward(ctx: ViewContext, grads: PixelGradients) -> GaussianGrads:
    rg = rasterize_backward(ctx.transcript, grads)
    proj = ctx.proj
    d_means, d_scales, d_rot = project_backward(proj, ctx.view, rg.d_mean2d, rg.d_conic, rg.d_depth)
    out = GaussianGrads.zeros(proj.n_source, proj.logits.shape[1])
    idx = proj.index
    out.means[idx] = d_means
    out.scales[idx] = d_scales
    out.rotations[idx] = d_rot
    out.opacities[idx] = rg.d_opacity
    out.logits[idx] = rg.d_logits
    return out
