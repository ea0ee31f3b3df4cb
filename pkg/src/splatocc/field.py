"""Per-voxel Gaussian properties field.

Each voxel owns one Gaussian whose raw parameters are stored in a dense
``ParameterGrid``; ``materialize`` applies the activation head (bounded mean
offset, clamped exponential scale, sigmoid opacity, pass-through logits) and
``materialize_backward`` is its exact vector-Jacobian product.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import GridGeometry
from .scene import VoxelGrid

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class NonFiniteParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    enable_delta_mu: bool = True
    enable_delta_s: bool = True
    enable_delta_r: bool = False
    clamp_radius_voxels: float = 3.0
    tau: float = 0.5
    base_scale_voxels: float = 0.5
    # scale bounds are stored in voxel units and converted with the grid's voxel size
    scale_min_voxels: float = 0.05
    scale_max_voxels: float = 4.0
    init_opacity: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not self.clamp_radius_voxels > 0:
            raise ValueError("clamp_radius_voxels must be positive")
        if not 0 < self.scale_min_voxels <= self.base_scale_voxels <= self.scale_max_voxels:
            raise ValueError("need 0 < scale_min <= base_scale <= scale_max")
        if not 0.0 < self.init_opacity < 1.0:
            raise ValueError("init_opacity must lie in (0, 1)")

    def ablate(self, token: str) -> "FieldConfig":
        if token == "no-delta-mu":
            return replace(self, enable_delta_mu=False)
        if token == "no-delta-s":
            return replace(self, enable_delta_s=False)
        if token == "with-delta-r":
            return replace(self, enable_delta_r=True)
        if token.startswith("clamp-"):
            return replace(self, clamp_radius_voxels=float(token[len("clamp-"):]))
        raise ValueError(f"unknown field ablation {token!r}")


@dataclass
class ParameterGrid:
    """Raw per-voxel parameters, shape (H, W, Z, C).

    Channel layout: ``[delta_mu(3), delta_s(3), opacity(1), logits(L-1), delta_r(4)?]``.
    """

    geometry: GridGeometry
    num_classes: int
    data: np.ndarray
    has_rotation: bool = False

    def __post_init__(self):
        want = (*self.geometry.dims, self.channel_count(self.num_classes, self.has_rotation))
        if self.data.shape != want:
            raise ValueError(f"parameter array shape {self.data.shape} != {want}")

    @staticmethod
    def channel_count(num_classes: int, has_rotation: bool) -> int:
        return 7 + (num_classes - 1) + (4 if has_rotation else 0)

    @property
    def n_logits(self) -> int:
        return self.num_classes - 1

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.data.shape[-1])

    sl_mu = slice(0, 3)
    sl_s = slice(3, 6)
    ch_opacity = 6

    @property
    def sl_logits(self) -> slice:
        return slice(7, 7 + self.n_logits)

    @property
    def sl_rot(self) -> slice:
        if not self.has_rotation:
            raise AttributeError("grid has no rotation channels")
        start = 7 + self.n_logits
        return slice(start, start + 4)

    def copy(self) -> "ParameterGrid":
        return ParameterGrid(self.geometry, self.num_classes, self.data.copy(), self.has_rotation)

    def with_data(self, data) -> "ParameterGrid":
        return ParameterGrid(self.geometry, self.num_classes, data, self.has_rotation)

    def channel_mask(self, config: FieldConfig) -> np.ndarray:
        """Boolean per channel: True where the channel influences the materialized set."""
        m = np.ones(self.data.shape[-1], bool)
        if not config.enable_delta_mu:
            m[self.sl_mu] = False
        if not config.enable_delta_s:
            m[self.sl_s] = False
        if self.has_rotation and not config.enable_delta_r:
            m[self.sl_rot] = False
        return m


@dataclass
class GaussianSet:
    means: np.ndarray       # (N, 3) metres
    scales: np.ndarray      # (N, 3) metres
    rotations: np.ndarray   # (N, 4) unit quaternions, (w, x, y, z)
    opacities: np.ndarray   # (N,)
    logits: np.ndarray      # (N, L-1)
    home: np.ndarray        # (N, 3) integer voxel index
    geometry: GridGeometry

    def __len__(self):
        return self.means.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.geometry.origin_array + (self.home + 0.5) * self.geometry.voxel_size

    def subset(self, keep) -> "GaussianSet":
        return GaussianSet(self.means[keep], self.scales[keep], self.rotations[keep],
                           self.opacities[keep], self.logits[keep], self.home[keep], self.geometry)


@dataclass
class GaussianGrads:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    logits: np.ndarray

    @classmethod
    def zeros(cls, n: int, n_logits: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, n_logits)))

    def add_(self, other: "GaussianGrads", weight: float = 1.0) -> "GaussianGrads":
        for name in ("means", "scales", "rotations", "opacities", "logits"):
            getattr(self, name).__iadd__(weight * getattr(other, name))
        return self


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def init_field(geometry: GridGeometry, num_classes: int, config: FieldConfig | None = None,
               seed: int = 0) -> ParameterGrid:
    config = config or FieldConfig()
    has_rot = config.enable_delta_r
    C = ParameterGrid.channel_count(num_classes, has_rot)
    data = np.zeros((*geometry.dims, C))
    grid = ParameterGrid(geometry, num_classes, data, has_rot)
    data[..., grid.ch_opacity] = _logit(config.init_opacity)
    rng = np.random.default_rng(seed)
    data[..., grid.sl_logits] = rng.uniform(-1e-2, 1e-2, size=(*geometry.dims, num_classes - 1))
    return grid


def _check_finite(params: ParameterGrid):
    bad = ~np.isfinite(params.data)
    if bad.any():
        i, j, k, c = np.argwhere(bad)[0]
        raise NonFiniteParameterError(f"non-finite parameter at voxel ({i}, {j}, {k}), channel {c}")


def materialize(params: ParameterGrid, config: FieldConfig) -> GaussianSet:
    _check_finite(params)
    geom = params.geometry
    vs = geom.voxel_size
    flat = params.flat
    home = geom.voxel_indices()
    centers = geom.origin_array + (home + 0.5) * vs
    if config.enable_delta_mu:
        means = centers + config.clamp_radius_voxels * vs * np.tanh(flat[:, params.sl_mu])
    else:
        means = centers
    base = config.base_scale_voxels * vs
    if config.enable_delta_s:
        scales = np.clip(base * np.exp(flat[:, params.sl_s]),
                         config.scale_min_voxels * vs, config.scale_max_voxels * vs)
    else:
        scales = np.full((flat.shape[0], 3), base)
    if config.enable_delta_r and params.has_rotation:
        q = IDENTITY_QUAT + flat[:, params.sl_rot]
        rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    else:
        rotations = np.tile(IDENTITY_QUAT, (flat.shape[0], 1))
    opac = _sigmoid(flat[:, params.ch_opacity])
    logits = flat[:, params.sl_logits].copy()
    return GaussianSet(means, scales, rotations, opac, logits, home, geom)


def materialize_backward(params: ParameterGrid, config: FieldConfig,
                         grads: GaussianGrads) -> np.ndarray:
    """Gradient w.r.t. the raw parameter array given gradients w.r.t. the Gaussian set."""
    vs = params.geometry.voxel_size
    flat = params.flat
    out = np.zeros_like(flat)
    if config.enable_delta_mu:
        th = np.tanh(flat[:, params.sl_mu])
        out[:, params.sl_mu] = grads.means * config.clamp_radius_voxels * vs * (1.0 - th * th)
    if config.enable_delta_s:
        raw = config.base_scale_voxels * vs * np.exp(flat[:, params.sl_s])
        inside = (raw > config.scale_min_voxels * vs) & (raw < config.scale_max_voxels * vs)
        out[:, params.sl_s] = np.where(inside, grads.scales * raw, 0.0)
    if config.enable_delta_r and params.has_rotation:
        q = IDENTITY_QUAT + flat[:, params.sl_rot]
        n = np.linalg.norm(q, axis=1, keepdims=True)
        u = q / n
        g = grads.rotations
        out[:, params.sl_rot] = (g - u * np.sum(u * g, axis=1, keepdims=True)) / n
    o = _sigmoid(flat[:, params.ch_opacity])
    out[:, params.ch_opacity] = grads.opacities * o * (1.0 - o)
    out[:, params.sl_logits] = grads.logits
    return out.reshape(params.data.shape)


def extract_occupancy(gaussians: GaussianSet, config: FieldConfig, num_classes: int | None = None,
                      keep=None) -> VoxelGrid:
    """Threshold opacity at ``tau``; occupied voxels take the argmax class of their own Gaussian."""
    L = num_classes or gaussians.logits.shape[1] + 1
    occupied = gaussians.opacities >= config.tau
    if keep is not None:
        occupied &= keep
    labels = np.where(occupied, np.argmax(gaussians.logits, axis=1), L - 1)
    dims = gaussians.geometry.dims
    grid = np.full(dims, L - 1, np.uint8)
    h = gaussians.home
    grid[h[:, 0], h[:, 1], h[:, 2]] = labels
    return VoxelGrid(gaussians.geometry, grid, L)


def within_home_voxel(gaussians: GaussianSet) -> np.ndarray:
    """True where the Gaussian mean has not left its own voxel."""
    off = np.abs(gaussians.means - gaussians.centers) / gaussians.geometry.voxel_size
    return np.all(off <= 0.5, axis=1)


# --------------------------------------------------------------------------- statistics

@dataclass
class Histogram:
    bin_centers: np.ndarray
    counts: np.ndarray          # (n_axes, n_bins)
    n_retained: int
    fraction_within_half: np.ndarray | None = None   # per axis
    fraction_within_half_all: float = float("nan")
    mean: float = float("nan")
    std: float = float("nan")


def _centered_bins(lo: float, hi: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    n = int(round((hi - lo) / step)) + 1
    centers = lo + step * np.arange(n)
    edges = np.concatenate([centers - step / 2, centers[-1:] + step / 2])
    return centers, edges


def delta_mu_statistics(gaussians: GaussianSet, config: FieldConfig, bin_width: float = 0.25) -> Histogram:
    """Histogram of mean offsets (voxel units) over Gaussians with opacity >= tau."""
    keep = gaussians.opacities >= config.tau
    off = (gaussians.means[keep] - gaussians.centers[keep]) / gaussians.geometry.voxel_size
    R = config.clamp_radius_voxels
    centers, edges = _centered_bins(-R, R, bin_width)
    counts = np.stack([np.histogram(np.clip(off[:, a], -R, R), edges)[0] for a in range(3)])
    h = Histogram(centers, counts, int(keep.sum()))
    if h.n_retained:
        inside = np.abs(off) <= 0.5
        h.fraction_within_half = inside.mean(axis=0)
        h.fraction_within_half_all = float(np.all(inside, axis=1).mean())
        h.mean = float(np.abs(off).mean())
        h.std = float(off.std())
    return h


def scale_statistics(gaussians: GaussianSet, config: FieldConfig, n_bins: int = 40) -> Histogram:
    """Per-axis histogram of retained scales in metres, bins centred from scale_min to scale_max."""
    vs = gaussians.geometry.voxel_size
    keep = gaussians.opacities >= config.tau
    vals = gaussians.scales[keep]
    lo, hi = config.scale_min_voxels * vs, config.scale_max_voxels * vs
    centers, edges = _centered_bins(lo, hi, (hi - lo) / (n_bins - 1))
    counts = np.stack([np.histogram(np.clip(vals[:, a], lo, hi), edges)[0] for a in range(3)])
    h = Histogram(centers, counts, int(keep.sum()))
    if vals.size:
        h.mean = float(vals.mean())
        h.std = float(vals.std())
    return h
