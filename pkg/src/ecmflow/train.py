"""Toy training loop and evaluation over the synthetic generator.

Sampling is deterministic for a given seed and config: sample i is always
drawn from SeedSequence([seed, 1, i]) no matter how many prefetch threads
run, the per-step time and frame-swap decisions come from
SeedSequence([seed, 2, step]), and all reductions in the math core have
fixed order, so two identical runs write bit-identical checkpoints and
loss curves.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ecmflow import tensor as T
from ecmflow.tensor import Tape, Tensor, NonFiniteError
from ecmflow.checkpoint import save_checkpoint
from ecmflow.config import RunConfig
from ecmflow.data import SyntheticSample, gen_synthetic, flip_sample, swap_sample
from ecmflow.losses import loss_blend, loss_refine, loss_total
from ecmflow.metrics import psnr, ssim, epe
from ecmflow.optim import Adam, ParamStore
from ecmflow.synthesis import build_model_params, interpolate


class DivergenceError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("ECM_NUM_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _make_sample(cfg: RunConfig, index: int, t: float) -> SyntheticSample:
    """Sample ``index`` of the run: generation plus per-sample flips."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 1, index])))
    s = gen_synthetic(rng, kind=cfg.kind, size=cfg.image_size,
                      max_disp=cfg.max_disp, t=t)
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=True)
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=False)
    return s


def _step_rng(cfg: RunConfig, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 2, step])))


def lr_at_step(cfg: RunConfig, step: int) -> float:
    """Base rate divided by lr_decay at each milestone fraction passed."""
    passed = sum(1 for m in cfg.milestones if step >= int(round(m * cfg.steps)))
    return cfg.lr / (cfg.lr_decay ** passed)


def train(cfg: RunConfig, out_dir, progress=None) -> dict:
    """Run the configured number of Adam steps; write checkpoint and CSV.

    Returns paths and the per-step loss history. Aborts with
    DivergenceError if any loss stops being finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = build_model_params(cfg)
    opt = Adam(params, lr=cfg.lr)
    history: list[tuple[int, float, float, float]] = []

    workers = worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        future_batches: dict[int, list] = {}

        def submit_batch(step: int) -> None:
            # sample content depends only on (cfg, index, step time), so
            # prefetching ahead cannot change what any step trains on
            if pool is None or not 0 <= step < cfg.steps or step in future_batches:
                return
            t_s = float(_step_rng(cfg, step).uniform(0.05, 0.95))
            lo = step * cfg.batch_size
            future_batches[step] = [pool.submit(_make_sample, cfg, i, t_s)
                                    for i in range(lo, lo + cfg.batch_size)]

        for step in range(cfg.steps):
            srng = _step_rng(cfg, step)
            t = float(srng.uniform(0.05, 0.95))
            do_swap = bool(srng.random() < 0.5)
            if pool is None:
                lo = step * cfg.batch_size
                samples = [_make_sample(cfg, i, t)
                           for i in range(lo, lo + cfg.batch_size)]
            else:
                submit_batch(step)
                submit_batch(step + 1)
                samples = [f.result() for f in future_batches.pop(step)]
            if do_swap:
                samples = [swap_sample(s) for s in samples]
                t = 1.0 - t

            i0 = Tensor(np.stack([s.i0 for s in samples]))
            i1 = Tensor(np.stack([s.i1 for s in samples]))
            gt = Tensor(np.stack([s.it_gt for s in samples]))

            opt.lr = lr_at_step(cfg, step)
            try:
                with Tape() as tape:
                    bundle = interpolate(i0, i1, t, params, cfg)
                    lb = loss_blend(bundle.i_blend, gt)
                    lrf = loss_refine(bundle.i_refine, gt)
                    lt = loss_total(lb, lrf)
                grad_arrays = tape.gradient(lt, params.tensors())
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"training diverged at step {step}: {exc}") from exc
            grads = dict(zip(params.names(), grad_arrays))
            opt.step(grads)
            history.append((step, lb.item(), lrf.item(), lt.item()))
            if progress is not None:
                progress(step, history[-1])
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)

    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, params.arrays())
    csv_path = out / "loss_curve.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "l_blend", "l_refine", "l_total"])
        for row in history:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    return {"checkpoint": ckpt_path, "loss_csv": csv_path,
            "history": history, "params": params}


def smoothed_endpoints(history, window: int = 25) -> tuple[float, float]:
    """Mean total loss over the first and last ``window`` steps."""
    totals = [row[3] for row in history]
    window = min(window, len(totals))
    if window == 0:
        raise ValueError("empty loss history")
    return (float(np.mean(totals[:window])), float(np.mean(totals[-window:])))


def evaluate(params: ParamStore, cfg: RunConfig, count: int,
             t: float | None = None, seed_stream: int = 3) -> list[dict]:
    """Metrics over held-out samples; sample i uses SeedSequence([seed, 3, i]).

    Each row carries PSNR/SSIM of the refined frame against the analytic
    ground truth, the flow end-point error, and the PSNR of the
    frame-average baseline for reference.
    """
    rows = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, seed_stream, i])))
        s = gen_synthetic(rng, kind=cfg.kind, size=cfg.image_size,
                          max_disp=cfg.max_disp, t=t)
        bundle = interpolate(Tensor(s.i0[None]), Tensor(s.i1[None]),
                             s.t, params, cfg)
        pred = bundle.i_refine.data[0]
        flow = bundle.flow01.data[0]
        baseline = 0.5 * (s.i0 + s.i1)
        rows.append({
            "sample": i,
            "psnr": psnr(pred, s.it_gt),
            "ssim": ssim(pred, s.it_gt),
            "epe": epe(flow, s.flow01),
            "baseline_psnr": psnr(baseline, s.it_gt),
        })
    return rows


def write_eval_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample", "psnr", "ssim", "epe"])
        for r in rows:
            writer.writerow([r["sample"], repr(r["psnr"]), repr(r["ssim"]),
                             repr(r["epe"])])
