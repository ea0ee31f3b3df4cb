"""Rigid transforms and regular voxel-grid geometry shared by every module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RIGID_TOL = 1e-9


class GeometryError(ValueError):
    pass


def is_rigid(T: np.ndarray, tol: float = RIGID_TOL) -> bool:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        return False
    if np.linalg.det(R) < 0:
        return False
    return bool(np.all(T[3] == np.array([0.0, 0.0, 0.0, 1.0])))


def check_rigid(T: np.ndarray, name: str = "transform") -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if not is_rigid(T):
        raise GeometryError(f"{name} is not a rigid 4x4 transform")
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def transform_points(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T[:3, :3].T + T[:3, 3]


def translation(t) -> np.ndarray:
    T = np.eye(4)
    T[:3, 3] = t
    return T


def yaw_rotation(yaw_rad: float) -> np.ndarray:
    c, s = np.cos(yaw_rad), np.sin(yaw_rad)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    return T


@dataclass(frozen=True)
class GridGeometry:
    """Axis-aligned voxel lattice: ``dims`` voxels of edge ``voxel_size`` starting at ``origin``."""

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    voxel_size: float

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise GeometryError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def origin_array(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.origin_array + np.array(self.dims) * self.voxel_size

    def voxel_indices(self) -> np.ndarray:
        """All (i, j, k) indices, C order over (H, W, Z): shape (N, 3)."""
        H, W, Z = self.dims
        ii, jj, kk = np.meshgrid(np.arange(H), np.arange(W), np.arange(Z), indexing="ij")
        return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)

    def centers(self) -> np.ndarray:
        """Voxel centers in C order over (H, W, Z): shape (N, 3)."""
        return self.origin_array + (self.voxel_indices() + 0.5) * self.voxel_size

    def center_of(self, idx) -> np.ndarray:
        return self.origin_array + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def continuous_index(self, pts: np.ndarray) -> np.ndarray:
        """Fractional index such that voxel centers land on integers."""
        return (np.asarray(pts, dtype=np.float64) - self.origin_array) / self.voxel_size - 0.5
