"""Cross-checks of the optimized code against the brute-force references, runnable from the CLI."""

from __future__ import annotations

import numpy as np

from .field import FieldConfig, GaussianSet, init_field
from .geometry import GridGeometry, translation
from .metrics import RayQuery, dda_first_hit
from .oracle import finite_diff_gradient, naive_render, ray_march_reference, trilinear_reference
from .optim import Problem, TrainConfig, forward_backward
from .projection import project_gaussians, to_gaussian2d_list
from .rasterizer import RenderConfig, rasterize_forward
from .raycomp import FramePlan, sample_grid
from .scene import GroundTruth2D, SceneSequence, VoxelGrid, make_camera_rig


def random_gaussians(rng, n: int, n_logits: int = 5) -> GaussianSet:
    """Gaussians scattered in front of a +x-facing camera at the origin."""
    means = np.stack([rng.uniform(1, 8, n), rng.uniform(-4, 4, n), rng.uniform(-2, 3, n)], 1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(means, rng.uniform(0.05, 0.5, (n, 3)), q, rng.uniform(0.05, 0.99, n),
                       rng.normal(size=(n, n_logits)), np.zeros((n, 3), np.int64),
                       GridGeometry((1, 1, 1), (0, 0, 0), 1.0))


def raster_error(rng, n: int = 200, width: int = 64, height: int = 48) -> float:
    view = make_camera_rig(1, resolution=(width, height))[0]
    cfg = RenderConfig().exact()
    proj = project_gaussians(random_gaussians(rng, n), view, cfg.blur_floor, cfg.sigma_extent)
    out, _ = rasterize_forward(proj, width, height, cfg)
    ref = naive_render(to_gaussian2d_list(proj), width, height, 5)
    return float(max(np.abs(out.semantic - ref.semantic).max(), np.abs(out.depth - ref.depth).max(),
                     np.abs(out.alpha_acc - ref.alpha_acc).max()))


def tiny_problem(rng, num_classes: int = 4, res=(16, 12)):
    """A 4x4x2 grid seen by one camera with random labels in two frames."""
    geom = GridGeometry((4, 4, 2), (0.5, -1.0, -0.5), 0.5)
    frames = [VoxelGrid(geom, rng.integers(0, num_classes, (4, 4, 2)).astype(np.uint8), num_classes)
              for _ in range(2)]
    scene = SceneSequence(frames, [np.eye(4), translation((0.2, 0.1, 0.0))], (2,), 0.5)
    rig = make_camera_rig(1, resolution=res, fov_deg=100)
    w, h = res

    def labels():
        valid = rng.random((h, w)) < 0.8
        sem = np.where(valid, rng.integers(0, num_classes - 1, (h, w)), -1).astype(np.int16)
        return GroundTruth2D(sem, np.where(valid, rng.uniform(1, 4, (h, w)), 0.0), valid,
                             rng.random((h, w)) < 0.3)

    return Problem(scene, rig, {0: [labels()], 1: [labels()]}, 0, np.zeros((1, 3)))


# central differences at a 1e-5 step carry ~1e-10 absolute roundoff, so relative error is
# measured against at least this magnitude
GRADIENT_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = GRADIENT_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_error(rng, rc_mode: str = "feature") -> float:
    """Worst relative error between analytic and central-difference gradients of the total loss."""
    problem = tiny_problem(rng)
    fc = FieldConfig(enable_delta_r=True)
    cfg = TrainConfig(rc_mode=rc_mode, field_config=fc, render=RenderConfig().exact(), clip_norm=None,
                      frame_plan=FramePlan((1,), (0.8,), 0.1))
    p = init_field(problem.scene.geometry, 4, fc, int(rng.integers(1 << 30)))
    p.data[:] += rng.normal(scale=0.5, size=p.data.shape)
    _, g = forward_backward(p, problem, cfg)
    fd = finite_diff_gradient(lambda x: forward_backward(p.with_data(x), problem, cfg)[0].total, p.data)
    return float(relative_error(g, fd).max())


def dda_agrees(grid, ray: RayQuery, step: float) -> bool:
    """DDA and the fixed-step march give the same class, distances within one step.

    A march can step over a voxel corner the ray clips for less than ``step``;
    such rays are re-marched at a step 500 times finer before being counted.
    """
    a = dda_first_hit(grid, ray)
    for s in (step, step / 500):
        b = ray_march_reference(grid, ray.origin, ray.direction, s)
        if a is None and b is None:
            return True
        if a is not None and b is not None and a[0] == b[0] and -1e-9 <= b[1] - a[1] <= s + 1e-9:
            return True
    return False


def dda_disagreement(rng, n_rays: int = 1000) -> float:
    """Fraction of random rays on a random 16^3 grid where DDA and the ray march disagree."""
    geom = GridGeometry((16, 16, 16), (-4.0, -4.0, -4.0), 0.5)
    labels = np.where(rng.random(geom.dims) < 0.05, rng.integers(0, 3, geom.dims), 3).astype(np.uint8)
    grid = VoxelGrid(geom, labels, 4)
    bad = 0
    for _ in range(n_rays):
        d = rng.normal(size=3)
        ray = RayQuery(rng.uniform(-4, 4, 3), d / np.linalg.norm(d))
        bad += not dda_agrees(grid, ray, geom.voxel_size / 100)
    return bad / n_rays


def trilinear_error(rng, n: int = 50) -> float:
    geom = GridGeometry((5, 4, 3), (-1.0, -1.0, 0.0), 0.5)
    p = init_field(geom, 4, FieldConfig(), 0)
    p.data[:] = rng.normal(size=p.data.shape)
    lo = geom.origin_array + 0.25
    hi = geom.upper - 0.25
    worst = 0.0
    for _ in range(n):
        x = rng.uniform(lo, hi)
        coords = np.tile(x, (geom.n_voxels, 1))
        got = sample_grid(p, coords).flat[0]
        ref = trilinear_reference(p.data, geom.origin, geom.voxel_size, x)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst


def run_verification(cases: int = 3, seed: int = 0, log=print) -> bool:
    rng = np.random.default_rng(seed)
    checks = []
    e = max(raster_error(rng) for _ in range(cases))
    checks.append(("rasterizer vs naive renderer", e, e <= 1e-6))
    for mode in ("feature", "logits"):
        e = gradient_error(rng, mode)
        checks.append((f"gradient vs finite differences ({mode})", e, e < 1e-4))
    e = dda_disagreement(rng)
    checks.append(("DDA vs fine ray march (disagreement rate)", e, e == 0.0))
    e = trilinear_error(rng)
    checks.append(("trilinear sampling vs 8-corner formula", e, e <= 1e-12))
    for name, value, ok in checks:
        log(f"{'ok  ' if ok else 'FAIL'} {name}: {value:.3g}")
    return all(ok for _, _, ok in checks)
