"""Command-line entry point: generate, train, eval, render, stats (and a hidden verify).

Exit codes: 0 success, 1 invalid input, 2 missing config file, 3 non-finite values
during training, 4 dimension mismatch or bad view index.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NO_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_MISMATCH = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment JSON file (defaults apply when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads for the compiled kernels")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--rc-mode", choices=["off", "feature", "logits"])
    p.add_argument("--frames", help="comma-separated adjacent frame offsets, e.g. -2,-1,+1,+2")
    p.add_argument("--omega", type=float, help="weight of every adjacent frame")
    p.add_argument("--alpha", type=float, help="dynamic-pixel weight in adjacent frames")
    p.add_argument("--tau", type=float, help="opacity threshold for occupancy")
    p.add_argument("--ablate", action="append", default=[],
                   help="no-delta-mu, no-delta-s, with-delta-r or clamp-X (repeatable or comma-separated)")
    p.add_argument("--steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatocc", description="Gaussian-splatting occupancy from 2D labels.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{generate,train,eval,render,stats}")

    p = sub.add_parser("generate", help="write the synthetic scene, manifest and 2D labels")
    _common(p)

    p = sub.add_parser("train", help="optimize the field and write a checkpoint")
    _common(p)
    _train_flags(p)
    p.add_argument("--scene", help="scene directory written by generate (default: regenerate)")

    for name, text in (("eval", "score a checkpoint against the ground-truth grid"),
                       ("render", "render one camera view of a checkpoint"),
                       ("stats", "mean-offset and scale histograms of a checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _train_flags(p)
        p.add_argument("--checkpoint", help="OPARM file (default: <out>/checkpoint.oparm)")
        p.add_argument("--scene", help="scene directory written by generate (default: regenerate)")
        if name == "render":
            p.add_argument("--view", type=int, default=0)
            p.add_argument("--frame", type=int, help="frame whose labels are shown alongside (default current)")
            p.add_argument("--filter-shifted", action="store_true",
                           help="drop Gaussians whose mean left its voxel")

    p = sub.add_parser("verify")
    _common(p)
    p.add_argument("--cases", type=int, default=3)
    # keep verify out of the usage listing
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "verify"]
    return ap


# --------------------------------------------------------------------------- config

def _parse_frames(text: str):
    try:
        offsets = tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise CliError(f"--frames: cannot parse {text!r}") from exc
    if not offsets:
        raise CliError("--frames: need at least one offset")
    return offsets


def load_config(args):
    from dataclasses import replace

    from .config import ConfigError, ExperimentConfig

    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", EXIT_NO_CONFIG)
        cfg = ExperimentConfig.from_json(path.read_text())
    else:
        cfg = ExperimentConfig()
    try:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out:
            cfg = replace(cfg, out=args.out)
        if getattr(args, "rc_mode", None):
            cfg = replace(cfg, train=replace(cfg.train, rc_mode=args.rc_mode))
        if getattr(args, "steps", None) is not None:
            cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        plan = cfg.frames
        if getattr(args, "frames", None):
            offsets = _parse_frames(args.frames)
            omega = plan.omega[:1] * len(offsets) if plan.omega else (0.8,) * len(offsets)
            plan = replace(plan, offsets=offsets, omega=omega)
        if getattr(args, "omega", None) is not None:
            plan = replace(plan, omega=(args.omega,) * len(plan.offsets))
        if getattr(args, "alpha", None) is not None:
            plan = replace(plan, alpha_dynamic=args.alpha)
        cfg = replace(cfg, frames=plan)
        field = cfg.field
        for group in getattr(args, "ablate", []) or []:
            for token in group.split(","):
                if token:
                    field = field.ablate(token)
        if getattr(args, "tau", None) is not None:
            field = replace(field, tau=args.tau)
        cfg = replace(cfg, field=field)
    except (ValueError, ConfigError) as exc:
        raise CliError(str(exc)) from exc
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return out


def _experiment(cfg, args=None, frames_needed=None):
    """Labels come from the scene directory when ``--scene`` is given, else from regeneration."""
    from .config import build_experiment
    from .formats import FormatError, read_scene

    scene_dir = getattr(args, "scene", None) if args is not None else None
    scene = None
    if scene_dir:
        try:
            scene, _, _ = read_scene(scene_dir)
        except (OSError, FormatError, ValueError) as exc:
            raise CliError(f"cannot read scene from {scene_dir}: {exc}") from exc
        want = cfg.scene
        if scene.geometry.dims != tuple(want.dims) or scene.n_frames != want.n_frames:
            raise CliError(f"scene in {scene_dir} does not match the configured grid", EXIT_MISMATCH)
    return build_experiment(cfg, frames_needed, scene)


def _load_checkpoint(args, cfg, ex):
    from .formats import FormatError, read_oparm

    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.oparm"
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        params = read_oparm(path)
    except FormatError as exc:
        raise CliError(str(exc)) from exc
    g, want = params.geometry, ex.scene.geometry
    if g.dims != want.dims or params.num_classes != ex.scene.num_classes:
        raise CliError(f"checkpoint grid {g.dims} x {params.num_classes} classes does not match "
                       f"scene grid {want.dims} x {ex.scene.num_classes} classes", EXIT_MISMATCH)
    return params


# --------------------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    import numpy as np

    from .formats import class_colors, depth_to_gray, write_pgm, write_ppm, write_scene

    cfg = load_config(args)
    out = _out_dir(cfg)
    ex = _experiment(cfg, frames_needed=set(range(cfg.scene.n_frames)))
    scene_dir = out / "scene"
    write_scene(scene_dir, ex.scene, ex.rig, {"seed": cfg.seed, "current_frame": ex.problem.current})
    for f, gts in sorted(ex.gts.items()):
        for c, gt in enumerate(gts):
            stem = scene_dir / f"gt_f{f:03d}_c{c}"
            write_ppm(f"{stem}_semantic.ppm", class_colors(gt.semantic))
            write_pgm(f"{stem}_depth.pgm", depth_to_gray(gt.depth))
            np.save(f"{stem}_depth.npy", gt.depth.astype("<f4"))
    (out / "config.json").write_text(cfg.to_json() + "\n")
    print(f"wrote {ex.scene.n_frames} frames, {len(ex.rig)} cameras to {scene_dir}")
    return EXIT_OK


def _write_csv(path, rows):
    import csv

    keys = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _metric_files(out: Path, stem: str, report):
    import json

    (out / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / f"{stem}.csv", "w") as fh:
        fh.write(",".join(report.CSV_FIELDS) + "\n" + ",".join(map(repr, report.csv_row())) + "\n")


def cmd_train(args) -> int:
    import json

    from .formats import read_oparm, write_oparm
    from .optim import NonFiniteError, evaluate_params, train

    cfg = load_config(args)
    out = _out_dir(cfg)
    ex = _experiment(cfg, args)
    tc = cfg.train_config()

    def show(step, row):
        parts = " ".join(f"{k}={v:.6f}" for k, v in row.items() if k not in ("step",))
        print(f"step {step + 1}/{tc.steps} {parts}", flush=True)

    try:
        result = train(tc, ex.problem, callback=show)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    write_oparm(out / "checkpoint.oparm", result.params)
    _write_csv(out / "train_log.csv", result.log)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    if result.snapshots:
        (out / "snapshots.json").write_text(json.dumps(result.snapshots, indent=2, sort_keys=True) + "\n")
    # score the stored (single-precision) checkpoint so train and eval agree
    report = evaluate_params(read_oparm(out / "checkpoint.oparm"), ex.problem, cfg.field)
    _metric_files(out, "metrics", report)
    print(_table(report))
    return EXIT_OK


def _table(report) -> str:
    lines = [f"{'metric':<16}{'value':>10}"]
    for k in ("rayiou_1m", "rayiou_2m", "rayiou_4m", "rayiou_mean", "miou", "duplicate_ratio"):
        lines.append(f"{k:<16}{getattr(report, k):>10.4f}")
    for c, v in sorted(report.per_class_iou.items()):
        lines.append(f"{'iou class ' + str(c):<16}{v:>10.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .optim import evaluate_params

    cfg = load_config(args)
    out = _out_dir(cfg)
    ex = _experiment(cfg, args, frames_needed={cfg.current()})
    params = _load_checkpoint(args, cfg, ex)
    report = evaluate_params(params, ex.problem, cfg.field)
    _metric_files(out, "eval", report)
    print(_table(report))
    return EXIT_OK


def cmd_render(args) -> int:
    import numpy as np

    from .field import materialize, within_home_voxel
    from .formats import class_colors, depth_to_gray, write_ornd, write_pgm, write_ppm
    from .rasterizer import render_gaussians

    cfg = load_config(args)
    out = _out_dir(cfg)
    ex = _experiment(cfg, args, frames_needed={cfg.current()})
    params = _load_checkpoint(args, cfg, ex)
    if not 0 <= args.view < len(ex.rig):
        raise CliError(f"view index {args.view} out of range [0, {len(ex.rig)})", EXIT_MISMATCH)
    gs = materialize(params, cfg.field)
    tag = f"view{args.view}"
    if args.filter_shifted:
        gs = gs.subset(within_home_voxel(gs))
        tag += "_filtered"
    view = ex.rig[args.view]
    img, _ = render_gaussians(gs, view, cfg.render)
    labels = np.where(img.alpha_acc >= 0.5, np.argmax(img.semantic, axis=-1), -1)
    write_ppm(out / f"render_{tag}_semantic.ppm", class_colors(labels))
    write_pgm(out / f"render_{tag}_depth.pgm", depth_to_gray(img.depth))
    write_ornd(out / f"render_{tag}.ornd", img)
    print(f"rendered {len(gs)} Gaussians into {out}/render_{tag}_*")
    return EXIT_OK


def _bars(title, centers, counts, width=40) -> str:
    lines = [title]
    peak = max(int(counts.max()), 1)
    for c, n in zip(centers, counts):
        lines.append(f"{c:+8.3f} | {'#' * int(round(width * n / peak))} {int(n)}")
    return "\n".join(lines)


def cmd_stats(args) -> int:
    from .field import delta_mu_statistics, materialize, scale_statistics

    cfg = load_config(args)
    out = _out_dir(cfg)
    ex = _experiment(cfg, args, frames_needed={cfg.current()})
    params = _load_checkpoint(args, cfg, ex)
    gs = materialize(params, cfg.field)
    mu = delta_mu_statistics(gs, cfg.field)
    sc = scale_statistics(gs, cfg.field)
    with open(out / "delta_mu_hist.csv", "w") as fh:
        fh.write("axis,bin_center_voxels,count\n")
        for a, name in enumerate("xyz"):
            for c, n in zip(mu.bin_centers, mu.counts[a]):
                fh.write(f"{name},{c:.6g},{int(n)}\n")
    with open(out / "scale_hist.csv", "w") as fh:
        fh.write("axis,bin_center_m,count\n")
        for a, name in enumerate("xyz"):
            for c, n in zip(sc.bin_centers, sc.counts[a]):
                fh.write(f"{name},{c:.6g},{int(n)}\n")
    print(f"retained Gaussians: {mu.n_retained}")
    if mu.n_retained:
        within = ", ".join(f"{n}={v:.3f}" for n, v in zip("xyz", mu.fraction_within_half))
        print(f"fraction with |offset| <= 0.5 voxel: {within}; all axes {mu.fraction_within_half_all:.3f}")
        for a, name in enumerate("xyz"):
            print(_bars(f"offset along {name} (voxels)", mu.bin_centers, mu.counts[a]))
        print(_bars("scale, all axes (m)", sc.bin_centers, sc.counts.sum(axis=0)))
        print(f"scale mean {sc.mean:.4f} m, std {sc.std:.4f} m")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    ok = run_verification(cases=args.cases, seed=args.seed or 0, log=print)
    return EXIT_OK if ok else EXIT_INVALID


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "stats": cmd_stats, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_INVALID
        # must precede the first numba import
        os.environ["NUMBA_NUM_THREADS"] = str(args.threads)
    from .config import ConfigError
    from .field import NonFiniteParameterError
    from .geometry import GeometryError
    from .scene import SceneCapacityError

    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except GeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, SceneCapacityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
