"""Full-batch gradient assembly across current and adjacent-frame branches, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .field import FieldConfig, GaussianGrads, ParameterGrid, init_field, materialize, materialize_backward
from .losses import (LossWeights, class_balance_weights, label_histogram, segmentation_loss,
                     silog_depth_loss, total_loss)
from .metrics import RayFan, evaluate
from .raycomp import (FramePlan, adjacent_voxel_coords, sample_grid, sample_grid_backward,
                      shift_gaussians_backward, shift_gaussians_logits_level, trilinear_plan)
from .rasterizer import PixelGradients, RenderConfig, render_gaussians, render_gaussians_backward
from .scene import GroundTruth2D

RC_MODES = ("off", "feature", "logits")


class NonFiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: bool = True
    lr_floor: float = 0.01
    frame_plan: FramePlan = FramePlan()
    field_config: FieldConfig = FieldConfig()
    rc_mode: str = "feature"
    seed: int = 0
    snapshot_every: int = 0
    clip_norm: float | None = 10.0
    lambda_depth: float = 1.0
    balance_exponent: float = 1.0
    # per-channel-group multipliers on the learning rate
    mu_lr_factor: float = 1.0
    scale_lr_factor: float = 1.0
    opacity_lr_factor: float = 1.0
    logits_lr_factor: float = 1.0
    rotation_lr_factor: float = 1.0
    render: RenderConfig = RenderConfig()

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.rc_mode not in RC_MODES:
            raise ValueError(f"rc_mode must be one of {RC_MODES}")
        if not 0 < self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in (0, 1]")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")
        if min(self.mu_lr_factor, self.scale_lr_factor, self.opacity_lr_factor,
               self.logits_lr_factor, self.rotation_lr_factor) < 0:
            raise ValueError("learning-rate factors must be >= 0")

    def channel_lr(self, params: ParameterGrid) -> np.ndarray:
        f = np.empty(params.data.shape[-1])
        f[params.sl_mu] = self.mu_lr_factor
        f[params.sl_s] = self.scale_lr_factor
        f[params.ch_opacity] = self.opacity_lr_factor
        f[params.sl_logits] = self.logits_lr_factor
        if params.has_rotation:
            f[params.sl_rot] = self.rotation_lr_factor
        return f

    def lr_at(self, step: int) -> float:
        if not self.lr_schedule or self.steps == 1:
            return self.learning_rate
        frac = step / (self.steps - 1)
        return self.learning_rate * (1.0 - (1.0 - self.lr_floor) * frac)


@dataclass
class Problem:
    """Everything a training run reads: scene, rig, per-frame labels, current frame."""
    scene: object
    rig: list
    gts: dict                 # frame index -> list of GroundTruth2D, one per camera
    current: int
    ray_origins: np.ndarray   # RayIoU origins in current-frame ego coordinates
    fan: RayFan | None = None

    def __post_init__(self):
        if not 0 <= self.current < self.scene.n_frames:
            raise ValueError("current frame out of range")

    def frame_of(self, offset: int) -> int:
        f = self.current + offset
        if not 0 <= f < self.scene.n_frames:
            raise ValueError(f"frame offset {offset:+d} leaves the sequence")
        return f


def stack_truth(gts) -> GroundTruth2D:
    return GroundTruth2D(np.concatenate([g.semantic for g in gts]),
                         np.concatenate([g.depth for g in gts]),
                         np.concatenate([g.valid_mask for g in gts]),
                         np.concatenate([g.dynamic_mask for g in gts]))


@dataclass
class BranchResult:
    seg: object
    depth: object
    grads: GaussianGrads | None


def render_branch(gaussians, rig, gts, weights: LossWeights, is_adjacent: bool,
                  render_cfg: RenderConfig, need_grad: bool = True) -> BranchResult:
    """Render every camera, pool pixels across cameras for the losses, and backpropagate."""
    outs, ctxs = zip(*(render_gaussians(gaussians, v, render_cfg) for v in rig))
    truth = stack_truth(gts)
    sem = np.concatenate([o.semantic for o in outs])
    dep = np.concatenate([o.depth for o in outs])
    seg = segmentation_loss(sem, truth, weights, is_adjacent)
    dl = silog_depth_loss(dep, truth, weights, is_adjacent)
    if not need_grad:
        return BranchResult(seg, dl, None)
    total = GaussianGrads.zeros(len(gaussians), gaussians.logits.shape[1])
    row = 0
    for out, ctx in zip(outs, ctxs):
        h = out.depth.shape[0]
        pg = PixelGradients(seg.grad[row:row + h], weights.lambda_depth * dl.grad[row:row + h])
        total.add_(render_gaussians_backward(ctx, pg))
        row += h
    return BranchResult(seg, dl, total)


def loss_weights(problem: Problem, config: TrainConfig, n_logits: int) -> LossWeights:
    hist = label_histogram(problem.gts[problem.current], n_logits)
    beta = class_balance_weights(hist, config.balance_exponent)
    return LossWeights(beta=beta, alpha_dynamic=config.frame_plan.alpha_dynamic,
                       lambda_depth=config.lambda_depth)


def _check(name: str, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value in the {name} branch")


def forward_backward(params: ParameterGrid, problem: Problem, config: TrainConfig,
                     weights: LossWeights | None = None):
    """Total loss over all branches and its gradient w.r.t. the raw parameter array."""
    fc = config.field_config
    weights = weights or loss_weights(problem, config, params.n_logits)
    gs = materialize(params, fc)
    cur = render_branch(gs, problem.rig, problem.gts[problem.current], weights, False, config.render)
    _check("current", cur.seg.value, cur.depth.value, cur.seg.grad, cur.depth.grad)
    grad = materialize_backward(params, fc, cur.grads)
    seg_adj, dep_adj, omega = [], [], []
    counts = {"seg_curr": cur.seg.n_valid, "depth_curr": cur.depth.n_valid}
    if config.rc_mode != "off":
        for k, w in zip(config.frame_plan.offsets, config.frame_plan.omega):
            adj = problem.frame_of(k)
            name = f"adjacent {k:+d} ({config.rc_mode})"
            need = w > 0
            if config.rc_mode == "feature":
                T = problem.scene.relative_pose(adj, problem.current)
                plan = trilinear_plan(params.geometry, adjacent_voxel_coords(params.geometry, T))
                sampled = sample_grid(params, None, plan)
                br = render_branch(materialize(sampled, fc), problem.rig, problem.gts[adj], weights,
                                   True, config.render, need)
                if need:
                    d_sampled = materialize_backward(sampled, fc, br.grads)
                    g = sample_grid_backward(params, plan, d_sampled)
            else:
                T = problem.scene.relative_pose(problem.current, adj)
                br = render_branch(shift_gaussians_logits_level(gs, T), problem.rig, problem.gts[adj],
                                   weights, True, config.render, need)
                if need:
                    g = materialize_backward(params, fc, shift_gaussians_backward(br.grads, T))
            _check(name, br.seg.value, br.depth.value)
            if need:
                _check(name, g)
                grad = grad + w * g
            seg_adj.append(br.seg.value)
            dep_adj.append(br.depth.value)
            omega.append(w)
            counts[f"seg_adj{k:+d}"] = br.seg.n_valid
            counts[f"depth_adj{k:+d}"] = br.depth.n_valid
    report = total_loss(cur.seg.value, cur.depth.value, seg_adj, dep_adj, omega,
                        weights.lambda_depth, counts)
    grad = grad * params.channel_mask(fc)
    return report, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, data: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(data), np.zeros_like(data), 0)


def clip_by_norm(grad: np.ndarray, max_norm: float | None):
    norm = float(np.sqrt(np.sum(grad * grad)))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def adam_step(data: np.ndarray, grad: np.ndarray, state: AdamState, config: TrainConfig,
              step_index: int, lr_factor=None) -> np.ndarray:
    """Bias-corrected Adam; returns the new parameter array and updates ``state`` in place."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    lr = config.lr_at(step_index) if lr_factor is None else config.lr_at(step_index) * lr_factor
    return data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


@dataclass
class TrainResult:
    params: ParameterGrid
    log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def evaluate_params(params: ParameterGrid, problem: Problem, fc: FieldConfig):
    from .field import extract_occupancy
    pred = extract_occupancy(materialize(params, fc), fc, params.num_classes)
    return evaluate(pred, problem.scene.frames[problem.current], problem.ray_origins, problem.fan)


def train(config: TrainConfig, problem: Problem, params: ParameterGrid | None = None,
          callback=None) -> TrainResult:
    """Run ``config.steps`` full-batch Adam steps; ``callback(step, row)`` sees every log row."""
    scene = problem.scene
    if params is None:
        params = init_field(scene.geometry, scene.num_classes, config.field_config, config.seed)
    weights = loss_weights(problem, config, params.n_logits)
    state = AdamState.zeros_like(params.data)
    lr_factor = config.channel_lr(params)
    result = TrainResult(params)
    for step in range(config.steps):
        try:
            report, grad = forward_backward(params, problem, config, weights)
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {step}: {exc}") from exc
        grad, norm = clip_by_norm(grad, config.clip_norm)
        row = {"step": step, "lr": config.lr_at(step), **report.row(), "grad_norm": norm}
        result.log.append(row)
        if callback is not None:
            callback(step, row)
        params = params.with_data(adam_step(params.data, grad, state, config, step, lr_factor))
        done = step + 1
        if config.snapshot_every and (done % config.snapshot_every == 0 or done == config.steps):
            rep = evaluate_params(params, problem, config.field_config)
            result.snapshots.append({"step": done, **rep.to_dict()})
    result.params = params
    return result


def with_plan(config: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``config`` with frame-plan fields replaced."""
    return replace(config, frame_plan=replace(config.frame_plan, **kw))
