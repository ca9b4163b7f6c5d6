"""Finite-difference verification of every differentiable operation.

Each registered case builds small float64 inputs positioned away from the
non-smooth points of its operation (fractional sampling offsets kept in
[0.2, 0.8], L1 arguments separated from zero, values clear of clamp
boundaries), evaluates a fixed random projection of the outputs to a
scalar, and compares reverse-mode gradients against central differences
(f(x+h) - f(x-h)) / 2h coordinate by coordinate.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ecmflow import tensor as T
from ecmflow.tensor import Tensor, Tape
from ecmflow.conv import conv2d
from ecmflow.warp import backward_warp, softmax_splat, splat_flow
from ecmflow.estimator import (local_correlation, soft_argmax_update,
                               rewarp_flow_to_source, upscale_flow)
from ecmflow.synthesis import blend, refine
from ecmflow.losses import loss_blend, loss_refine, loss_total

FD_STEP = 1e-4
REL_TOL = 1e-4
REL_FLOOR = 1e-3  # gradient magnitude below which errors are read absolutely


@dataclasses.dataclass
class OpReport:
    name: str
    max_rel_err: float
    seeds: int
    passed: bool


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def _proj(rng, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=shape)


def _dot(out: Tensor, p: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, _t(p)))


def _safe_flow(rng, n, h, w, reach: int = 1) -> np.ndarray:
    """Flow whose sampled positions have fractional parts in [0.2, 0.8].

    Keeps finite-difference probes of size FD_STEP from crossing the
    bilinear kernel's integer breakpoints.
    """
    ty = rng.integers(-reach, h + reach, size=(n, h, w)).astype(np.float64)
    tx = rng.integers(-reach, w + reach, size=(n, h, w)).astype(np.float64)
    ty += rng.uniform(0.2, 0.8, size=(n, h, w))
    tx += rng.uniform(0.2, 0.8, size=(n, h, w))
    grid_y = np.arange(h, dtype=np.float64)[:, None]
    grid_x = np.arange(w, dtype=np.float64)[None, :]
    return np.stack([tx - grid_x, ty - grid_y], axis=1)


# ---------------------------------------------------------------------------
# cases: each returns (inputs, fn) with fn(inputs) -> scalar Tensor


def _case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(0, 1, (2, 3, 6, 6)))
    w = _t(rng.normal(0, 0.3, (4, 3, 3, 3)))
    b = _t(rng.normal(0, 0.3, (4,)))
    p1 = _proj(rng, (2, 4, 3, 3))
    p2 = _proj(rng, (2, 4, 6, 6))

    def fn(ins):
        xi, wi, bi = ins
        strided = conv2d(xi, wi, bi, stride=2, padding=1)
        dilated = conv2d(xi, wi, None, stride=1, dilation=2, padding=2)
        return T.add(_dot(strided, p1), _dot(dilated, p2))

    return [x, w, b], fn


def _case_softmax(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.uniform(-2, 2, (2, 9, 3, 3)))
    p = _proj(rng, (2, 9, 3, 3))

    def fn(ins):
        return _dot(T.softmax(ins[0], axis=1), p)

    return [x], fn


def _case_backward_warp(seed):
    rng = np.random.default_rng(seed)
    src = _t(rng.normal(0, 1, (1, 2, 5, 5)))
    flow = _t(_safe_flow(rng, 1, 5, 5))
    p = _proj(rng, (1, 2, 5, 5))

    def fn(ins):
        return _dot(backward_warp(ins[0], ins[1]), p)

    return [src, flow], fn


def _case_softmax_splat(seed):
    rng = np.random.default_rng(seed)
    src = _t(rng.normal(0, 1, (1, 2, 5, 5)))
    flow = _t(_safe_flow(rng, 1, 5, 5))
    w = _t(rng.normal(0, 0.7, (1, 1, 5, 5)))
    p1 = _proj(rng, (1, 2, 5, 5))
    p2 = _proj(rng, (1, 1, 5, 5))

    def fn(ins):
        out, cov = softmax_splat(ins[0], ins[1], ins[2])
        return T.add(_dot(out, p1), _dot(cov, p2))

    return [src, flow, w], fn


def _case_splat_flow(seed):
    rng = np.random.default_rng(seed)
    flow = _t(_safe_flow(rng, 1, 5, 5))
    w = _t(rng.normal(0, 0.7, (1, 1, 5, 5)))
    p1 = _proj(rng, (1, 2, 5, 5))
    p2 = _proj(rng, (1, 1, 5, 5))

    def fn(ins):
        rev, cov = splat_flow(ins[0], 0.5, ins[1])
        return T.add(_dot(rev, p1), _dot(cov, p2))

    return [flow, w], fn


def _case_local_correlation(seed):
    rng = np.random.default_rng(seed)
    warped = _t(rng.normal(0, 1, (1, 3, 5, 5)))
    target = _t(rng.normal(0, 1, (1, 3, 5, 5)))
    p = _proj(rng, (1, 25, 5, 5))
    # out-of-bounds taps hold the NEG_CORR constant; probing them adds a
    # ~1e10 constant to the loss whose float64 quantum swamps the FD signal
    ys = np.arange(5)[:, None]
    xs = np.arange(5)[None, :]
    for i, (dy, dx) in enumerate(
            (dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)):
        p[:, i] *= (ys + dy >= 0) & (ys + dy < 5) & (xs + dx >= 0) & (xs + dx < 5)

    def fn(ins):
        return _dot(local_correlation(ins[0], ins[1], 2), p)

    return [warped, target], fn


def _case_soft_argmax_update(seed):
    rng = np.random.default_rng(seed)
    cost = _t(rng.uniform(-2, 2, (1, 9, 4, 4)))
    flow = _t(rng.normal(0, 1, (1, 2, 4, 4)))
    p = _proj(rng, (1, 2, 4, 4))

    def fn(ins):
        return _dot(soft_argmax_update(ins[0], ins[1], 3.0), p)

    return [cost, flow], fn


def _case_rewarp(seed):
    rng = np.random.default_rng(seed)
    updated = _t(rng.normal(0, 0.8, (1, 2, 5, 5)))
    carrier = _t(_safe_flow(rng, 1, 5, 5))
    w = _t(rng.normal(0, 0.5, (1, 1, 5, 5)))
    p = _proj(rng, (1, 2, 5, 5))

    def fn(ins):
        return _dot(rewarp_flow_to_source(ins[0], ins[1], ins[2]), p)

    return [updated, carrier, w], fn


def _case_upscale_flow(seed):
    rng = np.random.default_rng(seed)
    c = 4
    names = ["up.c0.w", "up.c0.b", "up.c1.w", "up.c1.b",
             "up.flow.w", "up.flow.b", "up.weight.w", "up.weight.b"]
    arrays = [rng.normal(0, 0.3, (c, 6 + 2 * c, 3, 3)), rng.normal(0, 0.1, (c,)),
              rng.normal(0, 0.3, (c, c, 3, 3)), rng.normal(0, 0.1, (c,)),
              rng.normal(0, 0.3, (4, c, 3, 3)), rng.normal(0, 0.1, (4,)),
              rng.normal(0, 0.3, (2, c, 3, 3)), rng.normal(0, 0.1, (2,))]
    flow01 = _t(rng.normal(0, 1, (1, 2, 3, 3)))
    flow10 = _t(rng.normal(0, 1, (1, 2, 3, 3)))
    w0 = _t(rng.normal(0, 0.5, (1, 1, 3, 3)))
    w1 = _t(rng.normal(0, 0.5, (1, 1, 3, 3)))
    f0n = _t(rng.normal(0, 1, (1, c, 6, 6)))
    f1n = _t(rng.normal(0, 1, (1, c, 6, 6)))
    ps = [_proj(rng, (1, 2, 6, 6)), _proj(rng, (1, 2, 6, 6)),
          _proj(rng, (1, 1, 6, 6)), _proj(rng, (1, 1, 6, 6))]
    inputs = [flow01, flow10, w0, w1, f0n, f1n] + [_t(a) for a in arrays]

    def fn(ins):
        params = dict(zip(names, ins[6:]))
        o01, o10, nw0, nw1 = upscale_flow(ins[0], ins[1], ins[2], ins[3],
                                          ins[4], ins[5], 2, params)
        return T.add(T.add(_dot(o01, ps[0]), _dot(o10, ps[1])),
                     T.add(_dot(nw0, ps[2]), _dot(nw1, ps[3])))

    return inputs, fn


def _case_blend(seed):
    rng = np.random.default_rng(seed)
    i0 = _t(rng.uniform(0.1, 0.9, (1, 3, 5, 5)))
    i1 = _t(rng.uniform(0.1, 0.9, (1, 3, 5, 5)))
    ft0 = _t(_safe_flow(rng, 1, 5, 5))
    ft1 = _t(_safe_flow(rng, 1, 5, 5))
    logit = _t(rng.normal(0, 1, (1, 1, 5, 5)))
    p = _proj(rng, (1, 3, 5, 5))

    def fn(ins):
        mask = T.sigmoid(ins[4])
        return _dot(blend(ins[0], ins[1], ins[2], ins[3], mask), p)

    return [i0, i1, ft0, ft1, logit], fn


def _case_refine(seed):
    rng = np.random.default_rng(seed)
    c, cc = 4, 3
    ref_in = 13 + cc
    names, arrays = ["ref.c0.w", "ref.c0.b"], [
        rng.normal(0, 0.2, (c, ref_in, 3, 3)), rng.normal(0, 0.05, (c,))]
    for d in (2, 4, 8):
        names += [f"ref.d{d}.w", f"ref.d{d}.b"]
        arrays += [rng.normal(0, 0.2, (c, c, 3, 3)), rng.normal(0, 0.05, (c,))]
    names += ["ref.c1.w", "ref.c1.b", "ref.head.w", "ref.head.b"]
    arrays += [rng.normal(0, 0.2, (c, c, 3, 3)), rng.normal(0, 0.05, (c,)),
               rng.normal(0, 0.05, (3, c, 3, 3)), rng.normal(0, 0.02, (3,))]
    i_blend = _t(rng.uniform(0.3, 0.7, (1, 3, 9, 9)))
    ctx = _t(rng.normal(0, 0.5, (1, cc, 9, 9)))
    i0 = _t(rng.uniform(0.1, 0.9, (1, 3, 9, 9)))
    i1 = _t(rng.uniform(0.1, 0.9, (1, 3, 9, 9)))
    ft0 = _t(rng.normal(0, 0.3, (1, 2, 9, 9)))
    ft1 = _t(rng.normal(0, 0.3, (1, 2, 9, 9)))
    p = _proj(rng, (1, 3, 9, 9))
    inputs = [i_blend, ctx, i0, i1, ft0, ft1] + [_t(a) for a in arrays]

    def fn(ins):
        params = dict(zip(names, ins[6:]))
        out = refine(ins[0], ins[1], ins[2], ins[3], ins[4], ins[5], params)
        return _dot(out, p)

    return inputs, fn


def _case_losses(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng.uniform(0.5, 0.9, (1, 3, 4, 4)))
    b = _t(a.data - rng.uniform(0.1, 0.3, (1, 3, 4, 4)))
    c = _t(rng.uniform(0.5, 0.9, (1, 3, 4, 4)))
    d = _t(c.data - rng.uniform(0.1, 0.3, (1, 3, 4, 4)))

    def fn(ins):
        return loss_total(loss_blend(ins[0], ins[1]),
                          loss_refine(ins[2], ins[3]))

    return [a, b, c, d], fn


REGISTRY = {
    "conv2d": _case_conv2d,
    "softmax": _case_softmax,
    "backward_warp": _case_backward_warp,
    "softmax_splat": _case_softmax_splat,
    "splat_flow": _case_splat_flow,
    "local_correlation": _case_local_correlation,
    "soft_argmax_update": _case_soft_argmax_update,
    "rewarp_flow_to_source": _case_rewarp,
    "upscale_flow": _case_upscale_flow,
    "blend": _case_blend,
    "refine": _case_refine,
    "losses": _case_losses,
}

# probe budget per input tensor; the expensive network cases sample fewer
# coordinates per seed but still cover every tensor
_COORDS = {"upscale_flow": 4, "refine": 3}
_DEFAULT_COORDS = 6


def check_case(name: str, seed: int, coords_per_tensor: int | None = None,
               h: float = FD_STEP) -> float:
    """Max relative gradient error for one case at one seed."""
    if name not in REGISTRY:
        raise KeyError(
            f"unknown op {name!r}; registered: {', '.join(sorted(REGISTRY))}")
    if coords_per_tensor is None:
        coords_per_tensor = _COORDS.get(name, _DEFAULT_COORDS)
    inputs, fn = REGISTRY[name](seed)
    with Tape() as tape:
        loss = fn(inputs)
    grads = tape.gradient(loss, inputs)

    rng = np.random.default_rng(seed + 0x5EED)
    worst = 0.0
    for ti, tens in enumerate(inputs):
        size = tens.size
        if size <= coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_tensor, replace=False)
        analytic_flat = grads[ti].reshape(-1)
        for ci in coords:
            ci = int(ci)
            plus = tens.data.copy().reshape(-1)
            plus[ci] += h
            minus = tens.data.copy().reshape(-1)
            minus[ci] -= h
            probe = list(inputs)
            probe[ti] = Tensor(plus.reshape(tens.shape))
            lp = fn(probe).item()
            probe[ti] = Tensor(minus.reshape(tens.shape))
            lm = fn(probe).item()
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(analytic_flat[ci])
            denom = max(abs(analytic), abs(numeric), REL_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def run_gradcheck(target: str = "all", seeds: int = 20) -> list[OpReport]:
    """Check one op or the whole registry over ``seeds`` random draws."""
    if target == "all":
        names = list(REGISTRY)
    else:
        if target not in REGISTRY:
            raise KeyError(
                f"unknown op {target!r}; registered: "
                f"{', '.join(sorted(REGISTRY))}")
        names = [target]
    reports = []
    for name in names:
        worst = 0.0
        for seed in range(seeds):
            worst = max(worst, check_case(name, seed))
        reports.append(OpReport(name=name, max_rel_err=worst, seeds=seeds,
                                passed=worst < REL_TOL))
    return reports
