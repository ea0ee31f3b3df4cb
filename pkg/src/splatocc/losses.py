"""2D supervision losses on rendered maps, each returning its exact gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_FLOOR = 1e-3
SQRT_KINK = 1e-12


@dataclass(frozen=True)
class LossWeights:
    beta: np.ndarray | None = None       # per-class balance weights, length L-1
    alpha_dynamic: float = 0.1
    lambda_depth: float = 1.0
    depth_floor: float = DEPTH_FLOOR

    def __post_init__(self):
        if self.beta is not None:
            b = np.asarray(self.beta, dtype=np.float64)
            if not np.all(np.isfinite(b)) or np.any(b < 0):
                raise ValueError("beta must be finite and >= 0")
            object.__setattr__(self, "beta", b)
        if not 0.0 <= self.alpha_dynamic <= 1.0:
            raise ValueError("alpha_dynamic must lie in [0, 1]")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be >= 0")


@dataclass
class LossTerm:
    value: float
    n_valid: int
    grad: np.ndarray
    empty: bool = False


def _pixel_weights(gt, weights: LossWeights, is_adjacent: bool) -> np.ndarray:
    w = np.ones(gt.depth.shape)
    if is_adjacent:
        w = np.where(gt.dynamic_mask, weights.alpha_dynamic, 1.0)
    return w


def segmentation_loss(semantic: np.ndarray, gt, weights: LossWeights, is_adjacent: bool) -> LossTerm:
    """Class-balanced softmax cross-entropy, averaged over pixels with a label."""
    if semantic.shape[:2] != gt.semantic.shape:
        raise ValueError(f"prediction {semantic.shape[:2]} and label {gt.semantic.shape} sizes differ")
    valid = gt.valid_mask & (gt.semantic >= 0)
    n = int(valid.sum())
    grad = np.zeros_like(semantic, dtype=np.float64)
    if n == 0:
        return LossTerm(0.0, 0, grad, empty=True)
    z = semantic[valid].astype(np.float64)
    y = gt.semantic[valid].astype(np.int64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), y]
    beta = np.ones(semantic.shape[-1]) if weights.beta is None else weights.beta
    w = beta[y] * _pixel_weights(gt, weights, is_adjacent)[valid]
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y] -= 1.0
    grad[valid] = (w / n)[:, None] * p
    return LossTerm(float(np.sum(w * nll) / n), n, grad)


def silog_depth_loss(depth: np.ndarray, gt, weights: LossWeights, is_adjacent: bool) -> LossTerm:
    """Scale-invariant log depth loss with optional per-pixel dynamic weights."""
    if depth.shape != gt.depth.shape:
        raise ValueError(f"prediction {depth.shape} and label {gt.depth.shape} sizes differ")
    valid = gt.valid_mask & (gt.depth > 0) & (depth > weights.depth_floor)
    n = int(valid.sum())
    grad = np.zeros(depth.shape)
    if n == 0:
        return LossTerm(0.0, 0, grad, empty=True)
    pred = depth[valid].astype(np.float64)
    d = np.log(pred) - np.log(gt.depth[valid].astype(np.float64))
    w = _pixel_weights(gt, weights, is_adjacent)[valid]
    B = np.sum(w * d)
    W = np.sum(w)
    # algebraically (1/n) sum w d^2 - B^2/n^2, written to avoid cancellation
    var = np.sum(w * (d - B / n) ** 2) / n + (B * B / (n * n)) * (1.0 - W / n)
    loss = float(np.sqrt(max(var, 0.0)))
    if loss > SQRT_KINK:
        grad[valid] = (w / n) * (d - B / n) / (loss * pred)
    return LossTerm(loss, n, grad)


def class_balance_weights(histogram, exponent: float = 1.0) -> np.ndarray:
    """Inverse-frequency class weights raised to ``exponent``, mean 1 over the classes present.

    Absent classes carry no pixels; they get weight 1 so they cannot skew the normalization.
    """
    h = np.asarray(histogram, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return np.ones_like(h)
    present = h > 0
    beta = np.ones_like(h)
    beta[present] = (total / h[present]) ** exponent
    beta[present] /= beta[present].mean()
    return beta


def label_histogram(gts, n_logits: int) -> np.ndarray:
    hist = np.zeros(n_logits, np.int64)
    for gt in gts:
        lab = gt.semantic[gt.valid_mask & (gt.semantic >= 0)]
        hist += np.bincount(lab, minlength=n_logits)[:n_logits]
    return hist


@dataclass
class LossReport:
    seg_curr: float
    depth_curr: float
    seg_adj: list = field(default_factory=list)
    depth_adj: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    lambda_depth: float = 1.0
    total: float = 0.0
    valid_pixel_counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = {"seg_curr": self.seg_curr, "depth_curr": self.depth_curr}
        for i, (s, d) in enumerate(zip(self.seg_adj, self.depth_adj)):
            r[f"seg_adj{i}"] = s
            r[f"depth_adj{i}"] = d
        r["total"] = self.total
        return r


def total_loss(seg_curr: float, depth_curr: float, seg_adj, depth_adj, omega,
               lambda_depth: float = 1.0, counts: dict | None = None) -> LossReport:
    seg_adj, depth_adj, omega = list(seg_adj), list(depth_adj), list(omega)
    if not len(seg_adj) == len(depth_adj) == len(omega):
        raise ValueError("adjacent loss terms do not align with the frame plan")
    total = seg_curr + lambda_depth * depth_curr
    for s, d, w in zip(seg_adj, depth_adj, omega):
        total += w * (s + lambda_depth * d)
    return LossReport(seg_curr, depth_curr, seg_adj, depth_adj, omega, lambda_depth, total,
                      dict(counts or {}))
