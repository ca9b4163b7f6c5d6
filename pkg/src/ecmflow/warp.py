"""Differentiable backward warping and softmax-splat forward warping.

Coordinate convention: pixel centers sit at integer coordinates; a flow
value (dx, dy) at pixel p points dx to the right and dy downward. Backward
warping gathers with border-clamped bilinear sampling; forward splatting
scatters with bilinear kernels and drops mass leaving the frame. Scatter
reductions run through np.bincount in fixed raster order per corner, so
results are deterministic.
"""

from __future__ import annotations

import numpy as np

from ecmflow.tensor import Tensor, ShapeError, _wrap, record, neg, mul, where_mask

EPS_SPLAT = 1e-8
EPS_COVERAGE = 1e-4


def _check_flow_shapes(source: Tensor, flow: Tensor, weight: Tensor | None, op: str):
    if source.ndim != 4:
        raise ShapeError(f"{op}: source must be (N,C,H,W), got {source.shape}")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"{op}: flow must be (N,2,H,W), got {flow.shape}")
    if (flow.shape[0], flow.shape[2], flow.shape[3]) != \
            (source.shape[0], source.shape[2], source.shape[3]):
        raise ShapeError(
            f"{op}: flow extents {flow.shape} do not match source {source.shape}")
    if weight is not None:
        if weight.ndim != 4 or weight.shape[1] != 1:
            raise ShapeError(f"{op}: weight must be (N,1,H,W), got {weight.shape}")
        if (weight.shape[0], weight.shape[2], weight.shape[3]) != \
                (source.shape[0], source.shape[2], source.shape[3]):
            raise ShapeError(
                f"{op}: weight extents {weight.shape} do not match source "
                f"{source.shape}")


def backward_warp(source: Tensor, flow: Tensor) -> Tensor:
    """Bilinear gather: out(p) = source(p + flow(p)), borders clamped.

    ``flow`` lives at target coordinates. Gradients reach both the source
    values and the flow; the flow gradient gates to zero where sampling
    left the image and the clamp took over.
    """
    _check_flow_shapes(source, flow, None, "backward_warp")
    n, c, h, w = source.shape
    dt = source.data.dtype
    fx_flow = flow.data[:, 0]
    fy_flow = flow.data[:, 1]
    px = np.arange(w, dtype=dt)[None, None, :] + fx_flow
    py = np.arange(h, dtype=dt)[:, None] + fy_flow

    pxc = np.clip(px, 0.0, w - 1.0)
    pyc = np.clip(py, 0.0, h - 1.0)
    if w > 1:
        x0 = np.minimum(np.floor(pxc), w - 2).astype(np.int64)
        fx = pxc - x0.astype(dt)
        gate_x = ((px >= 0.0) & (px <= w - 1.0)).astype(dt)
    else:
        x0 = np.zeros_like(pxc, dtype=np.int64)
        fx = np.zeros_like(pxc)
        gate_x = np.zeros_like(pxc)
    if h > 1:
        y0 = np.minimum(np.floor(pyc), h - 2).astype(np.int64)
        fy = pyc - y0.astype(dt)
        gate_y = ((py >= 0.0) & (py <= h - 1.0)).astype(dt)
    else:
        y0 = np.zeros_like(pyc, dtype=np.int64)
        fy = np.zeros_like(pyc)
        gate_y = np.zeros_like(pyc)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    hw = h * w
    src2 = source.data.reshape(n, c, hw)
    idx = [(y0 * w + x0), (y0 * w + x1), (y1 * w + x0), (y1 * w + x1)]
    idx = [i.reshape(n, 1, hw) for i in idx]
    v00, v01, v10, v11 = (np.take_along_axis(src2, i, axis=2) for i in idx)

    fx2 = fx.reshape(n, 1, hw)
    fy2 = fy.reshape(n, 1, hw)
    top = v00 + fx2 * (v01 - v00)
    bot = v10 + fx2 * (v11 - v10)
    out_flat = top + fy2 * (bot - top)
    out = _wrap(out_flat.reshape(n, c, h, w), "backward_warp")

    def bwd(g):
        g2 = g.reshape(n, c, hw)
        k00 = (1.0 - fx2) * (1.0 - fy2)
        k01 = fx2 * (1.0 - fy2)
        k10 = (1.0 - fx2) * fy2
        k11 = fx2 * fy2
        gsrc = np.zeros(n * c * hw, dtype=g.dtype)
        base = (np.arange(n * c, dtype=np.int64).reshape(n, c, 1)) * hw
        for kw_, ix in zip((k00, k01, k10, k11), idx):
            flat = (base + ix).ravel()
            gsrc += np.bincount(flat, weights=(g2 * kw_).ravel(),
                                minlength=n * c * hw)
        gsrc = gsrc.reshape(n, c, h, w).astype(g.dtype, copy=False)

        ddx = ((1.0 - fy2) * (v01 - v00) + fy2 * (v11 - v10))
        ddy = ((1.0 - fx2) * (v10 - v00) + fx2 * (v11 - v01))
        gx = (g2 * ddx).sum(axis=1).reshape(n, h, w) * gate_x
        gy = (g2 * ddy).sum(axis=1).reshape(n, h, w) * gate_y
        gflow = np.stack([gx, gy], axis=1).astype(g.dtype, copy=False)
        return gsrc, gflow

    record("backward_warp", (source, flow), (out,), bwd)
    return out


def _splat_geometry(flow_data: np.ndarray, h: int, w: int):
    """Corner indices, kernel weights and validity for a forward splat.

    Returns lists over the four bilinear corners: flat spatial index
    (invalid entries pinned to 0), kernel weight, and validity mask, each
    shaped (N, H*W), plus the (fx, fy) fractional offsets.
    """
    n = flow_data.shape[0]
    dt = flow_data.dtype
    tx = (np.arange(w, dtype=dt)[None, None, :] + flow_data[:, 0]).reshape(n, -1)
    ty = (np.arange(h, dtype=dt)[:, None] + flow_data[:, 1]).reshape(n, -1)
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    corners = []
    for dy, dx, kw_ in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = x0i + dx
        cy = y0i + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        flat = np.where(valid, cy * w + cx, 0)
        corners.append((flat, kw_ * valid, valid))
    return corners, fx, fy


def _splat_accumulate(values: np.ndarray, flat: np.ndarray, length: int):
    return np.bincount(flat.ravel(), weights=values.ravel(), minlength=length)


def softmax_splat(source: Tensor, flow: Tensor, weight: Tensor,
                  eps: float = EPS_SPLAT) -> tuple[Tensor, Tensor]:
    """Forward warp with exp(weight) importance and bilinear scattering.

    Each source pixel q sends exp(weight(q)) * source(q) to the four integer
    neighbors of q + flow(q); mass leaving the frame is dropped. The output
    is the importance-weighted average num / max(den, eps) so zero flow with
    zero weights is an exact identity, and the raw accumulated importance
    ``den`` is returned as a coverage map for hole detection. Gradients flow
    to source, flow, and weight.
    """
    _check_flow_shapes(source, flow, weight, "softmax_splat")
    n, c, h, w = source.shape
    hw = h * w
    dt = source.data.dtype

    e = np.exp(weight.data.reshape(n, hw))
    src2 = source.data.reshape(n, c, hw)
    corners, fx, fy = _splat_geometry(flow.data, h, w)

    nbase = np.arange(n, dtype=np.int64).reshape(n, 1) * hw
    cbase = (np.arange(n * c, dtype=np.int64).reshape(n, c, 1)) * hw
    num = np.zeros(n * c * hw, dtype=np.float64)
    den = np.zeros(n * hw, dtype=np.float64)
    ev = e[:, None, :] * src2
    for flat, kw_, _ in corners:
        num += _splat_accumulate(ev * kw_[:, None, :], cbase + flat[:, None, :],
                                 n * c * hw)
        den += _splat_accumulate(e * kw_, nbase + flat, n * hw)
    num = num.reshape(n, c, hw).astype(dt, copy=False)
    den = den.reshape(n, hw).astype(dt, copy=False)
    safe_den = np.maximum(den, eps)
    out_flat = num / safe_den[:, None, :]
    out = _wrap(out_flat.reshape(n, c, h, w), "softmax_splat")
    cov = _wrap(den.reshape(n, 1, h, w).copy(), "softmax_splat_coverage")

    def bwd(g_out, g_cov):
        gnum = np.zeros((n, c, hw), dtype=dt)
        gden = np.zeros((n, hw), dtype=dt)
        if g_out is not None:
            go = g_out.reshape(n, c, hw)
            gnum = go / safe_den[:, None, :]
            live = (den > eps).astype(dt)
            gden = -(go * out_flat).sum(axis=1) / safe_den * live
        if g_cov is not None:
            gden = gden + g_cov.reshape(n, hw)

        gsrc = np.zeros((n, c, hw), dtype=dt)
        ge = np.zeros((n, hw), dtype=dt)
        gfx = np.zeros((n, hw), dtype=dt)
        gfy = np.zeros((n, hw), dtype=dt)
        dk_dfx = (-(1.0 - fy), (1.0 - fy), -fy, fy)
        dk_dfy = (-(1.0 - fx), -fx, (1.0 - fx), fx)
        for (flat, kw_, valid), dkx, dky in zip(corners, dk_dfx, dk_dfy):
            gn = np.take_along_axis(gnum, flat[:, None, :], axis=2)
            gd = np.take_along_axis(gden, flat, axis=1) * valid
            # contribution of this corner: num += e*src*k, den += e*k
            sdot = (gn * src2).sum(axis=1) * valid
            gsrc += (e * kw_)[:, None, :] * gn * valid[:, None, :]
            ge += kw_ * (sdot + gd)
            a = e * (sdot + gd)
            gfx += a * dkx * valid
            gfy += a * dky * valid
        gweight = (ge * e).reshape(n, 1, h, w)
        gflow = np.stack([gfx.reshape(n, h, w), gfy.reshape(n, h, w)], axis=1)
        return (gsrc.reshape(n, c, h, w),
                gflow.astype(dt, copy=False),
                gweight.astype(dt, copy=False))

    record("softmax_splat", (source, flow, weight), (out, cov), bwd)
    return out, cov


def splat_flow(flow: Tensor, scale: float, weight: Tensor,
               eps: float = EPS_SPLAT,
               eps_coverage: float = EPS_COVERAGE) -> tuple[Tensor, Tensor]:
    """Reverse a flow field onto the frame it points into.

    The scaled field (scale * flow) is splatted forward along itself (a
    pixel q lands where traveling scale * flow(q) puts it) and negated, so
    the result is anchored at the destination frame and points back.
    Uncovered pixels (coverage < eps_coverage) are zero-filled; callers can
    re-flag them from the returned coverage map.
    """
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"splat_flow: flow must be (N,2,H,W), got {flow.shape}")
    scaled = mul(flow, float(scale))
    splatted, cov = softmax_splat(scaled, scaled, weight, eps=eps)
    rev = neg(splatted)
    filled = where_mask(cov.data >= eps_coverage, rev,
                        Tensor(np.zeros((1,), dtype=rev.data.dtype)))
    return filled, cov
