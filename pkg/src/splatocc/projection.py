"""Camera geometry for splatting: 3D covariance, EWA projection to the image, culling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLUR_FLOOR = 0.3
SIGMA_EXTENT = 3.0


@dataclass
class Gaussian2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    source_index: int = 0
    opacity: float = 1.0
    logits: np.ndarray | None = None


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w, x, y, z) to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def rotmat_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Chain dL/dR through ``quat_to_rotmat`` (treating q components as free)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: gR[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance3d(scale, rotation) -> np.ndarray:
    """Sigma = R S S^T R^T for scale (..., 3) and quaternion (..., 4)."""
    scale = np.asarray(scale, dtype=np.float64)
    M = quat_to_rotmat(rotation) * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def _jacobian(p, fx, fy):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project(mu, cov3d, view, blur_floor: float = BLUR_FLOOR):
    """Project one Gaussian; ``None`` when it lies at or behind the near plane."""
    p = view.R @ np.asarray(mu, dtype=np.float64) + view.t
    if p[2] <= view.near_plane:
        return None
    J = _jacobian(p, view.fx, view.fy)
    T = J @ view.R
    cov2d = T @ np.asarray(cov3d) @ T.T + blur_floor * np.eye(2)
    mean2d = np.array([view.fx * p[0] / p[2] + view.cx, view.fy * p[1] / p[2] + view.cy])
    return Gaussian2D(mean2d, cov2d, np.linalg.inv(cov2d), float(p[2]))


def _boxes(mean2d, cov2d, width, height, sigma_extent):
    ex = sigma_extent * np.sqrt(cov2d[..., 0, 0])
    ey = sigma_extent * np.sqrt(cov2d[..., 1, 1])
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.floor(mean2d[..., 0] - ex), -1, width)
        x1 = np.clip(np.floor(mean2d[..., 0] + ex), -1, width)
        y0 = np.clip(np.floor(mean2d[..., 1] - ey), -1, height)
        y1 = np.clip(np.floor(mean2d[..., 1] + ey), -1, height)
    ok = (x0 <= width - 1) & (x1 >= 0) & (y0 <= height - 1) & (y1 >= 0)
    box = np.stack([np.maximum(x0, 0), np.maximum(y0, 0),
                    np.minimum(x1, width - 1), np.minimum(y1, height - 1)], axis=-1)
    return np.where(ok[..., None], box, -1).astype(np.int64), ok


def cull_and_bound(g2d: Gaussian2D, view, sigma_extent: float = SIGMA_EXTENT):
    """Inclusive pixel box ``(x0, y0, x1, y1)`` covering ``sigma_extent`` std devs, or ``None``."""
    box, ok = _boxes(g2d.mean2d, g2d.cov2d, view.width, view.height, sigma_extent)
    return tuple(int(v) for v in box) if ok else None


@dataclass
class ProjectedGaussians:
    index: np.ndarray       # (M,) source index into the Gaussian set
    mean2d: np.ndarray      # (M, 2)
    conic: np.ndarray       # (M, 3) inverse covariance (a, b, c)
    depth: np.ndarray       # (M,)
    opacity: np.ndarray     # (M,)
    logits: np.ndarray      # (M, L-1)
    boxes: np.ndarray       # (M, 4) inclusive pixel boxes
    n_source: int
    # saved for the backward pass
    p_cam: np.ndarray
    rotmat: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    T: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    def permuted(self, perm) -> "ProjectedGaussians":
        fields = {k: v[perm] if isinstance(v, np.ndarray) else v for k, v in self.__dict__.items()}
        return ProjectedGaussians(**fields)


def project_gaussians(gaussians, view, blur_floor: float = BLUR_FLOOR,
                      sigma_extent: float = SIGMA_EXTENT) -> ProjectedGaussians:
    """Batched projection of a GaussianSet; culled Gaussians are dropped."""
    Rwc, t = view.R, view.t
    p_all = gaussians.means @ Rwc.T + t
    keep = np.flatnonzero(p_all[:, 2] > view.near_plane)
    p = p_all[keep]
    scales = gaussians.scales[keep]
    rots = gaussians.rotations[keep]
    Rm = quat_to_rotmat(rots)
    Mm = Rm * scales[:, None, :]
    cov3d = Mm @ np.swapaxes(Mm, 1, 2)
    J = _jacobian(p, view.fx, view.fy)
    T = J @ Rwc
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += blur_floor
    cov2d[:, 1, 1] += blur_floor
    mean2d = np.stack([view.fx * p[:, 0] / p[:, 2] + view.cx, view.fy * p[:, 1] / p[:, 2] + view.cy], 1)
    boxes, ok = _boxes(mean2d, cov2d, view.width, view.height, sigma_extent)
    sel = np.flatnonzero(ok)
    a, b, c = cov2d[sel, 0, 0], cov2d[sel, 0, 1], cov2d[sel, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], 1)
    return ProjectedGaussians(
        index=keep[sel], mean2d=mean2d[sel], conic=conic, depth=p[sel, 2].copy(),
        opacity=gaussians.opacities[keep[sel]], logits=gaussians.logits[keep[sel]],
        boxes=boxes[sel], n_source=len(gaussians), p_cam=p[sel], rotmat=Rm[sel],
        scales=scales[sel], rotations=rots[sel], T=T[sel], cov3d=cov3d[sel], cov2d=cov2d[sel])


def project_backward(proj: ProjectedGaussians, view, d_mean2d, d_conic, d_depth):
    """Chain image-space gradients back to (means, scales, rotations) of the visible set."""
    fx, fy = view.fx, view.fy
    A, B, C = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    inv = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    gA, gB, gC = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    g_inv = np.stack([np.stack([gA, 0.5 * gB], -1), np.stack([0.5 * gB, gC], -1)], -2)
    g_cov = -inv @ g_inv @ inv
    T = proj.T
    g_sigma = np.swapaxes(T, 1, 2) @ g_cov @ T
    g_T = 2.0 * g_cov @ T @ proj.cov3d
    g_J = g_T @ view.R.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    z2, z3 = z * z, z * z * z
    dmx, dmy = d_mean2d[:, 0], d_mean2d[:, 1]
    dp = np.empty_like(proj.p_cam)
    dp[:, 0] = dmx * fx / z - g_J[:, 0, 2] * fx / z2
    dp[:, 1] = dmy * fy / z - g_J[:, 1, 2] * fy / z2
    dp[:, 2] = (-dmx * fx * x / z2 - dmy * fy * y / z2 + d_depth
                - g_J[:, 0, 0] * fx / z2 + g_J[:, 0, 2] * 2 * fx * x / z3
                - g_J[:, 1, 1] * fy / z2 + g_J[:, 1, 2] * 2 * fy * y / z3)
    d_means = dp @ view.R

    Rm, s = proj.rotmat, proj.scales
    M = Rm * s[:, None, :]
    g_M = 2.0 * g_sigma @ M
    d_scales = np.sum(g_M * Rm, axis=1)
    d_rot = rotmat_grad_to_quat(proj.rotations, g_M * s[:, None, :])
    return d_means, d_scales, d_rot


def to_gaussian2d_list(proj: ProjectedGaussians) -> list[Gaussian2D]:
    out = []
    for m in range(len(proj)):
        cov = proj.cov2d[m]
        out.append(Gaussian2D(proj.mean2d[m].copy(), cov.copy(), np.linalg.inv(cov),
                              float(proj.depth[m]), int(proj.index[m]), float(proj.opacity[m]),
                              proj.logits[m].copy()))
    return out
