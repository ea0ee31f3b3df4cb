"""Desk-scale fixture and the paired ablation runs built on it."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .config import ExperimentConfig, RigSpec, SceneSpec, TrainSpec, build_experiment
from .field import delta_mu_statistics, materialize
from .optim import evaluate_params, train
from .scene import SceneRecipe


def fixture_config(seed: int = 1, steps: int = 300) -> ExperimentConfig:
    """Small occlusion scene with a dynamic box; sized so one run takes about a minute on one core."""
    return ExperimentConfig(
        seed=seed,
        scene=SceneSpec(dims=(20, 20, 6), n_frames=3, recipe=SceneRecipe(backdrop_distance=7)),
        rig=RigSpec(n_cams=4, resolution=(48, 32)),
        train=TrainSpec(steps=steps, learning_rate=0.1, mu_lr_factor=0.02, scale_lr_factor=0.2),
    )


def _with(cfg: ExperimentConfig, rc_mode=None, omega=None, alpha=None, ablate=None) -> ExperimentConfig:
    if rc_mode is not None:
        cfg = replace(cfg, train=replace(cfg.train, rc_mode=rc_mode))
    if omega is not None:
        cfg = replace(cfg, frames=replace(cfg.frames, omega=(omega,) * len(cfg.frames.offsets)))
    if alpha is not None:
        cfg = replace(cfg, frames=replace(cfg.frames, alpha_dynamic=alpha))
    if ablate is not None:
        cfg = replace(cfg, field=cfg.field.ablate(ablate))
    return cfg


# name -> overrides applied to the fixture configuration
ABLATIONS = {
    "full": {},
    "rc_off": {"rc_mode": "off"},
    "alpha_1": {"alpha": 1.0},
    "omega_0": {"omega": 0.0},
    "logits": {"rc_mode": "logits"},
    "no_delta_s": {"ablate": "no-delta-s"},
    "no_delta_mu": {"ablate": "no-delta-mu"},
    "clamp_0.2": {"ablate": "clamp-0.2"},
}


@dataclass
class RunSummary:
    name: str
    rayiou: float
    rayiou_1m: float
    rayiou_2m: float
    rayiou_4m: float
    miou: float
    duplicate_ratio: float
    first_loss: float
    final_loss: float
    within_half_voxel: float
    n_retained: int
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_one(name: str, base: ExperimentConfig, log=None) -> RunSummary:
    cfg = _with(base, **ABLATIONS[name])
    t0 = time.perf_counter()
    ex = build_experiment(cfg)
    result = train(cfg.train_config(), ex.problem)
    rep = evaluate_params(result.params, ex.problem, cfg.field)
    stats = delta_mu_statistics(materialize(result.params, cfg.field), cfg.field)
    s = RunSummary(name, rep.rayiou_mean, rep.rayiou_1m, rep.rayiou_2m, rep.rayiou_4m, rep.miou,
                   rep.duplicate_ratio, result.log[0]["total"], result.log[-1]["total"],
                   float(stats.fraction_within_half_all), int(stats.n_retained),
                   time.perf_counter() - t0)
    if log is not None:
        log(f"{name:12s} rayiou={s.rayiou:.4f} miou={s.miou:.4f} dup={s.duplicate_ratio:.4f} "
            f"within_half={s.within_half_voxel:.3f} loss {s.first_loss:.4f}->{s.final_loss:.4f} "
            f"({s.seconds:.0f}s)")
    return s


def run_ablations(base: ExperimentConfig | None = None, names=None, log=None) -> dict:
    base = base or fixture_config()
    return {n: run_one(n, base, log) for n in (names or ABLATIONS)}


def directional_checks(r: dict) -> dict:
    """Each directional claim as (passed, detail)."""
    def cmp(a, b, key="rayiou"):
        return getattr(r[a], key), getattr(r[b], key)

    out = {}
    f, o = cmp("full", "rc_off")
    fd, od = cmp("full", "rc_off", "duplicate_ratio")
    out["rc_feature_beats_off"] = (f > o + 0.01 and fd < od,
                                   f"RayIoU {f:.4f} vs {o:.4f}; duplicate ratio {fd:.4f} vs {od:.4f}")
    f, a = cmp("full", "alpha_1")
    out["alpha_0.1_beats_1"] = (f > a, f"RayIoU {f:.4f} vs {a:.4f}")
    f, w = cmp("full", "omega_0")
    out["omega_beats_zero"] = (f > w, f"RayIoU {f:.4f} vs {w:.4f}")
    f, lg = cmp("full", "logits")
    out["feature_ge_logits"] = (f >= lg, f"RayIoU {f:.4f} vs {lg:.4f}")
    f, s = cmp("full", "no_delta_s")
    out["no_delta_s_collapses"] = (s < 0.5 * f, f"RayIoU {f:.4f} vs {s:.4f}")
    f, m = cmp("full", "no_delta_mu")
    out["no_delta_mu_degrades"] = (m < f, f"RayIoU {f:.4f} vs {m:.4f}")
    f, c = cmp("full", "clamp_0.2")
    out["clamp_0.2_degrades"] = (c < f, f"RayIoU {f:.4f} vs {c:.4f}")
    h = r["full"].within_half_voxel
    out["delta_mu_mostly_within_half_voxel"] = (h > 0.5, f"fraction {h:.3f}")
    return out
