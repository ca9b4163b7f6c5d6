"""Command-line surface.

Subcommands: interpolate, estimate-flow, train, eval, gradcheck, gen-data,
search-range. Usage and validation problems exit with status 2; runtime
failures exit with status 1. Every command accepts --config (key=value
file) and --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ecmflow.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ecmflow.config import ConfigError, RunConfig, parse_config
from ecmflow.imageio import (FlowIOError, ImageIOError, flow_to_color,
                             read_png, write_flo, write_png)
from ecmflow.tensor import Tensor, TensorError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override config seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ecmflow",
        description="Correlation-matching optical flow and frame interpolation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interpolate", help="synthesize a frame at time t")
    p.add_argument("--frame0", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--checkpoint", help="trained weights (fresh init if absent)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--dump-intermediates", metavar="DIR",
                   help="also write warped frames, mask, and flows")
    _add_common(p)

    p = sub.add_parser("estimate-flow", help="write bidirectional flow")
    p.add_argument("--frame0", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out-prefix", required=True,
                   help="writes PREFIX_0to1.flo/.png and PREFIX_1to0.flo/.png")
    p.add_argument("--dump-levels", metavar="DIR",
                   help="per-level flow dumps and cost statistics")
    _add_common(p)

    p = sub.add_parser("train", help="train on synthetic data")
    p.add_argument("--out", required=True, help="output directory")
    for key in ("steps", "batch_size", "image_size", "levels", "channels"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-disp", type=float, default=None)
    p.add_argument("--kind", default=None)
    _add_common(p)

    p = sub.add_parser("eval", help="metrics over held-out synthetic samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--t", type=float, default=None,
                   help="fixed target time (default: per-sample random)")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default="all")
    p.add_argument("--seeds", type=int, default=20)
    _add_common(p)

    p = sub.add_parser("gen-data", help="write synthetic samples to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--kind", default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--max-disp", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("search-range", help="per-level motion coverage")
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--D-initial", type=int, default=None)
    p.add_argument("--D", type=int, default=None)
    _add_common(p)
    return ap


def _config_from_args(args, extra: dict | None = None) -> RunConfig:
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return parse_config(getattr(args, "config", None), overrides)


def _load_params(cfg: RunConfig, checkpoint: str | None):
    from ecmflow.synthesis import build_model_params

    params = build_model_params(cfg)
    if checkpoint:
        params.load_arrays(load_checkpoint(checkpoint))
    return params


def _load_frames(args) -> tuple[Tensor, Tensor]:
    f0 = read_png(args.frame0)
    f1 = read_png(args.frame1)
    if f0.shape != f1.shape:
        raise ImageIOError(
            f"frame extents differ: {f0.shape} vs {f1.shape}")
    return Tensor(f0[None]), Tensor(f1[None])


def _cmd_interpolate(args, parser: argparse.ArgumentParser) -> int:
    from ecmflow.synthesis import interpolate
    from ecmflow.warp import backward_warp

    extra = {}
    if args.t is not None:
        if not 0.0 < args.t < 1.0:
            parser.error(f"t must lie in (0,1), got {args.t}")
        extra["t"] = args.t
    cfg = _config_from_args(args, extra)
    params = _load_params(cfg, args.checkpoint)
    i0, i1 = _load_frames(args)
    bundle = interpolate(i0, i1, cfg.t, params, cfg)
    write_png(args.out, bundle.i_refine.data[0])
    if args.dump_intermediates:
        d = Path(args.dump_intermediates)
        d.mkdir(parents=True, exist_ok=True)
        i0t = backward_warp(i0, bundle.flow_t0)
        i1t = backward_warp(i1, bundle.flow_t1)
        write_png(d / "warped_from0.png", i0t.data[0])
        write_png(d / "warped_from1.png", i1t.data[0])
        write_png(d / "blend.png", bundle.i_blend.data[0])
        write_png(d / "mask.png", bundle.mask.data[0, 0])
        for name, fl in (("flow_t0", bundle.flow_t0), ("flow_t1", bundle.flow_t1),
                         ("flow_0to1", bundle.flow01), ("flow_1to0", bundle.flow10)):
            write_flo(d / f"{name}.flo", fl.data[0])
            write_png(d / f"{name}.png", flow_to_color(fl.data[0]))
    return 0


def _cmd_estimate_flow(args, parser) -> int:
    from ecmflow.estimator import estimate_biflow

    cfg = _config_from_args(args)
    params = _load_params(cfg, args.checkpoint)
    i0, i1 = _load_frames(args)

    dump = None
    if args.dump_levels:
        dump_dir = Path(args.dump_levels)
        dump_dir.mkdir(parents=True, exist_ok=True)
        stats_lines = []

        def dump(level, direction, flow, stats):
            write_flo(dump_dir / f"level{level}_{direction}.flo", flow[0])
            stats_lines.append(
                f"level {level} {direction} cost min {stats[0]:.6g} "
                f"max {stats[1]:.6g} mean {stats[2]:.6g}")

    f01, f10 = estimate_biflow(i0, i1, params, cfg, dump=dump)
    prefix = args.out_prefix
    write_flo(f"{prefix}_0to1.flo", f01.data[0])
    write_flo(f"{prefix}_1to0.flo", f10.data[0])
    max_mag = float(max(np.linalg.norm(f01.data[0], axis=0).max(),
                        np.linalg.norm(f10.data[0], axis=0).max(), 1e-6))
    write_png(f"{prefix}_0to1.png", flow_to_color(f01.data[0], max_mag))
    write_png(f"{prefix}_1to0.png", flow_to_color(f10.data[0], max_mag))
    if args.dump_levels:
        (Path(args.dump_levels) / "cost_stats.txt").write_text(
            "\n".join(stats_lines) + "\n")
    return 0


def _cmd_train(args, parser) -> int:
    from ecmflow.figures import render_loss_curve
    from ecmflow.train import train

    extra = {key: getattr(args, key) for key in
             ("steps", "batch_size", "image_size", "levels", "channels",
              "lr", "max_disp", "kind")
             if getattr(args, key) is not None}
    cfg = _config_from_args(args, extra)
    result = train(cfg, args.out)
    if result["history"]:
        render_loss_curve(result["history"], Path(args.out) / "loss_curve.png")
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss curve: {result['loss_csv']}")
    return 0


def _cmd_eval(args, parser) -> int:
    from ecmflow.figures import render_eval_summary
    from ecmflow.train import evaluate, write_eval_csv

    if args.t is not None and not 0.0 < args.t < 1.0:
        parser.error(f"t must lie in (0,1), got {args.t}")
    cfg = _config_from_args(args)
    params = _load_params(cfg, args.checkpoint)
    rows = evaluate(params, cfg, args.count, t=args.t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(rows, out / "eval.csv")
    render_eval_summary(rows, out / "eval.png")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    mean_epe = float(np.mean([r["epe"] for r in rows]))
    print(f"samples {len(rows)} mean_psnr {mean_psnr:.3f} dB "
          f"mean_ssim {mean_ssim:.4f} mean_epe {mean_epe:.3f} px")
    return 0


def _cmd_gradcheck(args, parser) -> int:
    from ecmflow.gradcheck import run_gradcheck

    try:
        reports = run_gradcheck(args.op, seeds=args.seeds)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    failed = False
    for rep in reports:
        status = "ok" if rep.passed else "FAIL"
        print(f"{rep.name:24s} max_rel_err {rep.max_rel_err:.3e} "
              f"({rep.seeds} seeds) {status}")
        failed = failed or not rep.passed
    return 1 if failed else 0


def _cmd_gen_data(args, parser) -> int:
    import csv as _csv

    from ecmflow.data import gen_synthetic

    extra = {k: getattr(args, k) for k in ("kind",) if getattr(args, k)}
    if args.size is not None:
        extra["image_size"] = args.size
    if args.max_disp is not None:
        extra["max_disp"] = args.max_disp
    cfg = _config_from_args(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.csv", "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["sample", "kind", "t", "max_disp"])
        for i in range(args.count):
            s = gen_synthetic([cfg.seed, 9, i], kind=cfg.kind,
                              size=cfg.image_size, max_disp=cfg.max_disp)
            stem = out / f"sample{i:03d}"
            write_png(f"{stem}_frame0.png", s.i0)
            write_png(f"{stem}_frame1.png", s.i1)
            write_png(f"{stem}_gt.png", s.it_gt)
            write_flo(f"{stem}_flow.flo", s.flow01)
            write_png(f"{stem}_flow.png", flow_to_color(s.flow01))
            writer.writerow([i, s.kind, repr(s.t), cfg.max_disp])
    print(f"wrote {args.count} samples to {out}")
    return 0


def _cmd_search_range(args, parser) -> int:
    from ecmflow.estimator import search_range

    extra = {}
    if args.L is not None:
        extra["levels"] = args.L
    if args.r is not None:
        extra["radius"] = args.r
    if args.D_initial is not None:
        extra["d_initial"] = args.D_initial
    if args.D is not None:
        extra["d_level"] = args.D
    cfg = _config_from_args(args, extra)
    print(" ".join(str(v) for v in search_range(cfg)))
    return 0


_COMMANDS = {
    "interpolate": _cmd_interpolate,
    "estimate-flow": _cmd_estimate_flow,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "gen-data": _cmd_gen_data,
    "search-range": _cmd_search_range,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, parser)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ImageIOError, FlowIOError, CheckpointError, TensorError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
