"""2-D convolution and bilinear resizing on NCHW tensors.

Convolution lowers patches to a matrix (im2col) so the contraction is a
single deterministic matmul; the backward pass scatters columns back with
ordered strided-slice additions, never unordered atomics. Resizing is a pair
of separable 1-D interpolation matrices, so its backward is the exact
transpose of the forward map.
"""

from __future__ import annotations

import numpy as np

from ecmflow.tensor import Tensor, ShapeError, _wrap, record


def conv_out_size(n: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    eff = dilation * (kernel - 1) + 1
    out = (n + 2 * padding - eff) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"convolution output collapsed: size {n}, kernel {kernel}, "
            f"stride {stride}, dilation {dilation}, padding {padding}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    # (N, C, KH, KW, OH, OW) gathered with strided views, no data copies yet
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            cols[:, :, ky, kx] = xp[:, :, y0:y0 + oh * stride:stride,
                                    x0:x0 + ow * stride:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weights, zero padding.

    Output (N, O, OH, OW) with OH = (H + 2p - dilation*(KH-1) - 1)//stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIKK, got {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channels: input {c}, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    oh = conv_out_size(h, kh, stride, dilation, padding)
    ow = conv_out_size(w, kw, stride, dilation, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    y = np.matmul(wmat, cols2).reshape(n, o, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    out = _wrap(y, "conv2d")

    def bwd(g):
        gmat = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,ncp->oc", gmat, cols2, optimize=True)
        gw = gw.reshape(o, c, kh, kw)
        gcols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for ky in range(kh):
            y0 = ky * dilation
            for kx in range(kw):
                x0 = kx * dilation
                gxp[:, :, y0:y0 + oh * stride:stride,
                    x0:x0 + ow * stride:stride] += gcols[:, :, ky, kx]
        if padding:
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        else:
            gx = gxp
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record("conv2d", inputs, (out,), bwd)
    return out


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear weights mapping n_in samples to n_out.

    Source position for output i is (i + 0.5) * n_in / n_out - 0.5 with
    border clamping, so resizing back and forth keeps constants exact.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = (1.0 - frac).astype(dtype)
    m[rows, lo + 1] += frac.astype(dtype)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an NCHW tensor to (out_h, out_w)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize input must be NCHW, got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("bilinear_resize target size must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        y = x.data.copy()
        out = _wrap(y, "bilinear_resize")
        record("bilinear_resize", (x,), (out,), lambda g: (g,))
        return out
    mh = _interp_matrix(h, out_h, x.data.dtype)
    mw = _interp_matrix(w, out_w, x.data.dtype)
    y = np.einsum("ah,nchw,bw->ncab", mh, x.data, mw, optimize=True)
    out = _wrap(y, "bilinear_resize")

    def bwd(g):
        return (np.einsum("ah,ncab,bw->nchw", mh, g, mw, optimize=True),)

    record("bilinear_resize", (x,), (out,), bwd)
    return out
