"""Command-line entry points.

Subcommands: gen-scene, train, render, eval, serve. Every command is
deterministic under fixed seed and flags (serve excepted for timing fields).
Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

# Numeric defaults echoed into every output manifest for provenance.
# FLOD_DEFAULTS may point at a JSON file overriding entries.
DEFAULTS = {
    "gamma": 8.0,
    "update_period": 50,
    "lambda_ssim": 0.2,
}


class UsageError(ValueError):
    pass


def _load_defaults() -> dict:
    table = dict(DEFAULTS)
    path = os.environ.get("FLOD_DEFAULTS")
    if path:
        table.update(json.loads(Path(path).read_text()))
    return table


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_level_range(text: str) -> tuple[int, int]:
    if ".." not in text:
        raise UsageError(f"level range must look like '3..5', got {text!r}")
    lo, hi = text.split("..", 1)
    try:
        return int(lo), int(hi)
    except ValueError as exc:
        raise UsageError(f"level range must be integers, got {text!r}") from exc


def cmd_gen_scene(args) -> int:
    from .io import save_dataset, generate_synthetic_scene

    outdir = Path(args.out)
    if outdir.exists() and any(outdir.iterdir()) and not args.force:
        raise UsageError(f"output directory {outdir} is not empty (use --force)")
    if args.views < 2:
        raise UsageError("--views must be >= 2")
    scene, gt = generate_synthetic_scene(
        args.seed, args.gaussians, args.views, args.res, n_test_views=args.test_views)
    outdir.mkdir(parents=True, exist_ok=True)
    save_dataset(outdir, scene, gt)
    print(f"wrote dataset: {args.views} train / {args.test_views} test views, "
          f"{args.gaussians} ground-truth Gaussians -> {outdir}")
    return 0


def cmd_train(args) -> int:
    from .io import FileTrainingSink, load_dataset, save_model
    from .trainer import TrainConfig, desk_scale_config, train_flod

    if args.tau <= 0:
        raise UsageError("--tau must be > 0")
    if args.rho <= 1:
        raise UsageError("--rho must be > 1")
    if args.lmax < 1:
        raise UsageError("--lmax must be >= 1")
    scene = load_dataset(args.scene)
    kwargs = {"seed": args.seed, "lambda_ssim": args.lambda_ssim}
    if args.iterations:
        kwargs["iterations"] = _parse_int_list(args.iterations)
    if args.horizons:
        kwargs["density_horizons"] = _parse_int_list(args.horizons)
    if args.densify_intervals:
        kwargs["densify_intervals"] = _parse_int_list(args.densify_intervals)
    if args.overlap_interval:
        kwargs["overlap_prune_interval"] = args.overlap_interval
    try:
        if args.preset == "desk":
            cfg = desk_scale_config(**kwargs)
        else:
            cfg = TrainConfig(**kwargs)
        cfg.validate_for(args.lmax)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    outdir = Path(args.out)
    sink = FileTrainingSink(outdir, tau=args.tau, rho=args.rho, l_max=args.lmax)
    model, stats = train_flod(scene, cfg, args.tau, args.rho, args.lmax, sink=sink)
    ref_pos = np.mean([c.position for c, _ in scene.train_views], axis=0)
    save_model(outdir, model, cfg=cfg, ref_pos=ref_pos, extent=scene.extent,
               defaults=_load_defaults())
    print(f"trained {args.lmax} levels, counts {model.counts()}, "
          f"scale-constraint violations {stats.constraint_violations} -> {outdir}")
    return 0


def cmd_render(args) -> int:
    from .io import load_cameras, load_model, save_image
    from .rasterizer import render
    from .selective import SelectionConfig, selective_session

    model, manifest = load_model(args.model)
    if (args.level is None) == (args.levels is None):
        raise UsageError("pass exactly one of --level or --levels")
    cameras = [cam for cam, _ in load_cameras(args.cameras)]
    if not cameras:
        raise UsageError(f"no cameras in {args.cameras}")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    defaults = _load_defaults()

    if args.level is not None:
        if not 1 <= args.level <= model.l_max:
            raise UsageError(f"unknown level {args.level} (model has 1..{model.l_max})")
        l_start = l_end = args.level
    else:
        l_start, l_end = _parse_level_range(args.levels)
        if not 1 <= l_start <= l_end <= model.l_max:
            raise UsageError(f"level range {args.levels} out of bounds 1..{model.l_max}")

    gamma = args.gamma if args.gamma is not None else float(defaults["gamma"])
    period = args.update_period if args.update_period else int(defaults["update_period"])
    cfg = SelectionConfig(l_start=l_start, l_end=l_end, gamma=gamma,
                          ref_policy=args.ref_policy, update_period=period)
    ref = manifest.get("ref_pos")
    result = selective_session(model, cameras, cfg, default_ref_pos=ref,
                               mode="sync", keep_frames=True)
    stats_path = outdir / "stats.jsonl"
    with open(stats_path, "w") as fh:
        for rec in result.stats:
            fh.write(json.dumps(rec) + "\n")
    for idx, (cam, frame) in enumerate(zip(cameras, result.frames)):
        name = cam.cam_id or f"view_{idx:03d}"
        save_image(outdir / f"{name}.npy", frame)
    print(f"rendered {len(cameras)} views (levels {l_start}..{l_end}, "
          f"gamma {gamma}) -> {outdir}")
    return 0


def cmd_eval(args) -> int:
    from .io import load_image
    from .metrics import MetricReport

    render_dir = Path(args.renders)
    gt_dir = Path(args.gt)
    render_files = sorted(render_dir.glob("*.npy"))
    gt_files = sorted(gt_dir.glob("*.npy"))
    if len(render_files) == 0:
        raise UsageError(f"no .npy renders in {render_dir}")
    if len(render_files) != len(gt_files):
        raise UsageError(
            f"image count mismatch: {len(render_files)} renders vs {len(gt_files)} gt")
    report = MetricReport()
    for rf, gf in zip(render_files, gt_files):
        report.add(rf.stem, load_image(rf), load_image(gf))
    doc = report.to_dict()
    out = Path(args.out) if args.out else render_dir / "metrics.json"
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"PSNR {report.mean_psnr:.3f} dB  SSIM {report.mean_ssim:.5f}  "
          f"({len(render_files)} images) -> {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .serve import create_app

    bind = os.environ.get("FLOD_BIND")
    host, port = args.host, args.port
    if bind:
        host, _, port_s = bind.partition(":")
        port = int(port_s) if port_s else port
    app = create_app(args.model)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flod",
                                description="multi-level Gaussian splatting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--gaussians", type=int, default=5)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--test-views", type=int, default=3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train a multi-level model")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tau", type=float, default=0.2)
    t.add_argument("--rho", type=float, default=4.0)
    t.add_argument("--lmax", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="schedule/learning-rate base: full-scale or desk-scale")
    t.add_argument("--lambda-ssim", type=float, default=DEFAULTS["lambda_ssim"])
    t.add_argument("--iterations", help="comma-separated per-level totals")
    t.add_argument("--horizons", help="comma-separated per-level horizons")
    t.add_argument("--densify-intervals", help="comma-separated per-level intervals")
    t.add_argument("--overlap-interval", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a level or a level range")
    r.add_argument("--model", required=True)
    r.add_argument("--cameras", required=True, help="CameraFileV1 JSON")
    r.add_argument("--out", required=True)
    r.add_argument("--level", type=int)
    r.add_argument("--levels", help="range like 3..5 (selective rendering)")
    r.add_argument("--gamma", type=float)
    r.add_argument("--ref-policy", choices=("average", "current"), default="average")
    r.add_argument("--update-period", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of renders against ground truth")
    e.add_argument("--renders", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="interactive frame service")
    s.add_argument("--model", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8787)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
