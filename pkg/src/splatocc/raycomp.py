"""Supervising the current-frame field from adjacent ego poses.

The feature-level path moves adjacent-frame voxel centers into the current
ego frame and trilinearly resamples the raw parameter grid there; the
logits-level path instead rigidly moves the already materialized Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import GaussianGrads, GaussianSet, ParameterGrid
from .geometry import GridGeometry, check_rigid, transform_points
from .projection import rotmat_to_quat

EMPTY_OPACITY_LOGIT = -10.0


@dataclass(frozen=True)
class FramePlan:
    offsets: tuple = (1,)
    omega: tuple = (0.8,)
    alpha_dynamic: float = 0.1

    def __post_init__(self):
        offsets = tuple(int(k) for k in self.offsets)
        omega = tuple(float(w) for w in self.omega)
        if len(omega) == 1 and len(offsets) > 1:
            omega = omega * len(offsets)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "omega", omega)
        if 0 in offsets:
            raise ValueError("frame offset 0 is the current frame, not an adjacent one")
        if len(set(offsets)) != len(offsets):
            raise ValueError("duplicate frame offsets")
        if len(omega) != len(offsets):
            raise ValueError("need one omega per offset")
        if any(not np.isfinite(w) or w < 0 for w in omega):
            raise ValueError("omega weights must be finite and >= 0")
        if not 0.0 <= self.alpha_dynamic <= 1.0:
            raise ValueError("alpha_dynamic must lie in [0, 1]")

    @classmethod
    def none(cls) -> "FramePlan":
        return cls(offsets=(), omega=())


def adjacent_voxel_coords(geometry: GridGeometry, T_adj_to_curr) -> np.ndarray:
    """Adjacent-frame voxel centers (C order) expressed in current-frame ego coordinates."""
    T = check_rigid(T_adj_to_curr, "T_adj_to_curr")
    return transform_points(T, geometry.centers())


@dataclass
class SamplePlan:
    """Corner indices and trilinear weights for a batch of sample points."""
    corners: np.ndarray   # (N, 8) flat voxel index
    weights: np.ndarray   # (N, 8)
    inside: np.ndarray    # (N,) bool
    n_source: int
    extra: dict = field(default_factory=dict)


INDEX_SNAP = 1e-9


def trilinear_plan(geometry: GridGeometry, coords) -> SamplePlan:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    dims = np.array(geometry.dims)
    rel = coords - geometry.origin_array
    inside = np.all((rel >= 0) & (rel <= dims * geometry.voxel_size), axis=1)
    u = geometry.continuous_index(coords)
    # a center that went through a transform round trip lands within roundoff of an
    # integer index; snap it so center samples copy their voxel exactly
    r = np.rint(u)
    u = np.where(np.abs(u - r) < INDEX_SNAP, r, u)
    i0 = np.floor(u)
    f = u - i0
    i0 = i0.astype(np.int64)
    corners = np.empty((coords.shape[0], 8), np.int64)
    weights = np.empty((coords.shape[0], 8))
    for c in range(8):
        bits = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        idx = np.clip(i0 + bits, 0, dims - 1)
        corners[:, c] = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        w = np.where(bits == 1, f, 1.0 - f)
        weights[:, c] = w[:, 0] * w[:, 1] * w[:, 2]
    weights[~inside] = 0.0
    return SamplePlan(corners, weights, inside, int(np.prod(dims)))


def empty_vector(params: ParameterGrid) -> np.ndarray:
    v = np.zeros(params.data.shape[-1])
    v[params.ch_opacity] = EMPTY_OPACITY_LOGIT
    return v


def sample_grid(params: ParameterGrid, coords, plan: SamplePlan | None = None) -> ParameterGrid:
    """Resample every channel of ``params`` at ``coords`` (one per voxel of the output grid)."""
    plan = plan or trilinear_plan(params.geometry, coords)
    if plan.corners.shape[0] != params.geometry.n_voxels:
        raise ValueError("need one sample coordinate per voxel")
    src = params.flat
    out = np.zeros((plan.corners.shape[0], src.shape[1]))
    for c in range(8):
        out += plan.weights[:, c:c + 1] * src[plan.corners[:, c]]
    out[~plan.inside] = empty_vector(params)
    return params.with_data(out.reshape(params.data.shape))


def sample_grid_backward(params: ParameterGrid, plan: SamplePlan, d_sampled) -> np.ndarray:
    """Scatter gradients of the sampled grid back onto the source voxels."""
    g = np.asarray(d_sampled).reshape(plan.corners.shape[0], -1)
    out = np.zeros_like(params.flat)
    for c in range(8):
        np.add.at(out, plan.corners[:, c], plan.weights[:, c:c + 1] * g)
    return out.reshape(params.data.shape)


def _quat_left_matrix(q) -> np.ndarray:
    """Matrix form of q ⊗ (.) for (w, x, y, z) quaternions."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z],
                     [x, w, -z, y],
                     [y, z, w, -x],
                     [z, -y, x, w]])


def shift_gaussians_logits_level(gaussians: GaussianSet, T_curr_to_adj) -> GaussianSet:
    """Rigidly move materialized Gaussians into another ego frame."""
    T = check_rigid(T_curr_to_adj, "T_curr_to_adj")
    Lq = _quat_left_matrix(rotmat_to_quat(T[:3, :3]))
    return GaussianSet(
        means=transform_points(T, gaussians.means), scales=gaussians.scales.copy(),
        rotations=gaussians.rotations @ Lq.T, opacities=gaussians.opacities.copy(),
        logits=gaussians.logits.copy(), home=gaussians.home, geometry=gaussians.geometry)


def shift_gaussians_backward(grads: GaussianGrads, T_curr_to_adj) -> GaussianGrads:
    T = np.asarray(T_curr_to_adj, dtype=np.float64)
    Lq = _quat_left_matrix(rotmat_to_quat(T[:3, :3]))
    return GaussianGrads(means=grads.means @ T[:3, :3], scales=grads.scales.copy(),
                         rotations=grads.rotations @ Lq, opacities=grads.opacities.copy(),
                         logits=grads.logits.copy())
