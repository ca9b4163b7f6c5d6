"""Arbitrary-time frame synthesis: flow reversal, blending, refinement.

The intermediate flows come from reversing the scaled bidirectional flows
(a pixel of frame 0 travels t * flow before reaching time t), corrected by
residuals from a small U-shaped network that also emits the blending mask.
A dilated-convolution stack then predicts a residual on top of the blended
frame. Synthesis runs once, at the input resolution.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ecmflow import tensor as T
from ecmflow.tensor import Tensor, ShapeError
from ecmflow.conv import conv2d, bilinear_resize
from ecmflow.config import RunConfig
from ecmflow.optim import ParamStore, he_conv_init
from ecmflow.warp import backward_warp, splat_flow
from ecmflow.estimator import estimate_biflow, init_estimator_params


@dataclasses.dataclass
class SynthesisBundle:
    flow01: Tensor
    flow10: Tensor
    flow_t0: Tensor
    flow_t1: Tensor
    mask: Tensor
    i_blend: Tensor
    i_refine: Tensor


def init_synthesis_params(store: ParamStore, cfg: RunConfig,
                          rng: np.random.Generator) -> None:
    c = cfg.channels
    cc = cfg.context_channels
    # shallow trainable texture conv over the raw images (shared by both
    # frames), standing in for a pre-trained first conv layer
    store.create("ctx.img.w", he_conv_init(rng, c, 3, 3, 3))
    store.create("ctx.img.b", np.zeros(c, dtype=np.float32))
    fuse_in = 4 * c + 10  # image convs + encoder features + images + flows
    store.create("ctx.fuse.w", he_conv_init(rng, cc, fuse_in, 3, 3))
    store.create("ctx.fuse.b", np.zeros(cc, dtype=np.float32))

    unet_in = 4 + cc  # two reversed flows + context
    store.create("unet.d0.w", he_conv_init(rng, c, unet_in, 3, 3))
    store.create("unet.d0.b", np.zeros(c, dtype=np.float32))
    store.create("unet.d1.w", he_conv_init(rng, c, c, 3, 3))
    store.create("unet.d1.b", np.zeros(c, dtype=np.float32))
    store.create("unet.d2.w", he_conv_init(rng, c, c, 3, 3))
    store.create("unet.d2.b", np.zeros(c, dtype=np.float32))
    store.create("unet.u2.w", he_conv_init(rng, c, 2 * c, 3, 3))
    store.create("unet.u2.b", np.zeros(c, dtype=np.float32))
    store.create("unet.u1.w", he_conv_init(rng, c, 2 * c, 3, 3))
    store.create("unet.u1.b", np.zeros(c, dtype=np.float32))
    store.create("unet.u0.w", he_conv_init(rng, c, c, 3, 3))
    store.create("unet.u0.b", np.zeros(c, dtype=np.float32))
    # zero-initialized heads: start from reversal-only flows and M = 0.5
    store.create("unet.flow.w", np.zeros((4, c, 3, 3), dtype=np.float32))
    store.create("unet.flow.b", np.zeros(4, dtype=np.float32))
    store.create("unet.mask.w", np.zeros((1, c, 3, 3), dtype=np.float32))
    store.create("unet.mask.b", np.zeros(1, dtype=np.float32))

    ref_in = 13 + cc  # blended frame, context, both frames, both flows
    store.create("ref.c0.w", he_conv_init(rng, c, ref_in, 3, 3))
    store.create("ref.c0.b", np.zeros(c, dtype=np.float32))
    for d in (2, 4, 8):
        store.create(f"ref.d{d}.w", he_conv_init(rng, c, c, 3, 3))
        store.create(f"ref.d{d}.b", np.zeros(c, dtype=np.float32))
    store.create("ref.c1.w", he_conv_init(rng, c, c, 3, 3))
    store.create("ref.c1.b", np.zeros(c, dtype=np.float32))
    store.create("ref.head.w", np.zeros((3, c, 3, 3), dtype=np.float32))
    store.create("ref.head.b", np.zeros(3, dtype=np.float32))


def build_model_params(cfg: RunConfig, seed: int | None = None) -> ParamStore:
    """All trainable parameters for the full pipeline, seeded and ordered."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParamStore()
    init_estimator_params(store, cfg, rng)
    init_synthesis_params(store, cfg, rng)
    return store


def build_context(i0: Tensor, i1: Tensor, flow01: Tensor, flow10: Tensor,
                  feat0: Tensor, feat1: Tensor, params: ParamStore,
                  cfg: RunConfig) -> Tensor:
    """Fuse images, flows, and encoder features into one full-res feature."""
    if i0.shape != i1.shape:
        raise ShapeError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
    h, w = i0.shape[2], i0.shape[3]
    imgf0 = T.elu(conv2d(i0, params["ctx.img.w"], params["ctx.img.b"], padding=1))
    imgf1 = T.elu(conv2d(i1, params["ctx.img.w"], params["ctx.img.b"], padding=1))
    ef0 = bilinear_resize(feat0, h, w)
    ef1 = bilinear_resize(feat1, h, w)
    body = T.concat([imgf0, imgf1, ef0, ef1, i0, i1, flow01, flow10], axis=1)
    return T.elu(conv2d(body, params["ctx.fuse.w"], params["ctx.fuse.b"],
                        padding=1))


def _unet(x: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Three down-convolutions, three up-convolutions with skips, two heads."""
    d0 = T.elu(conv2d(x, params["unet.d0.w"], params["unet.d0.b"],
                      stride=2, padding=1))
    d1 = T.elu(conv2d(d0, params["unet.d1.w"], params["unet.d1.b"],
                      stride=2, padding=1))
    d2 = T.elu(conv2d(d1, params["unet.d2.w"], params["unet.d2.b"],
                      stride=2, padding=1))
    u2 = bilinear_resize(d2, d1.shape[2], d1.shape[3])
    u2 = T.elu(conv2d(T.concat([u2, d1], axis=1),
                      params["unet.u2.w"], params["unet.u2.b"], padding=1))
    u1 = bilinear_resize(u2, d0.shape[2], d0.shape[3])
    u1 = T.elu(conv2d(T.concat([u1, d0], axis=1),
                      params["unet.u1.w"], params["unet.u1.b"], padding=1))
    u0 = bilinear_resize(u1, x.shape[2], x.shape[3])
    u0 = T.elu(conv2d(u0, params["unet.u0.w"], params["unet.u0.b"], padding=1))
    res = conv2d(u0, params["unet.flow.w"], params["unet.flow.b"], padding=1)
    logit = conv2d(u0, params["unet.mask.w"], params["unet.mask.b"], padding=1)
    return res, logit


def intermediate_flows(flow01: Tensor, flow10: Tensor, t: float,
                       context: Tensor, params: ParamStore,
                       cfg: RunConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Flows anchored at time t plus the blending mask.

    flow_t0 = rev(t * flow01) + residual, flow_t1 = rev((1-t) * flow10) +
    residual. Reversal splats with uniform weights; the residuals and the
    mask logit come from the U-shaped network over (both reversed flows,
    context). The two reversed flows are never averaged together.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0,1), got {t}")
    zw = T.zeros((flow01.shape[0], 1, flow01.shape[2], flow01.shape[3]),
                 dtype=flow01.data.dtype)
    base_t0, _ = splat_flow(flow01, t, zw, eps=cfg.eps_splat,
                            eps_coverage=cfg.eps_coverage)
    base_t1, _ = splat_flow(flow10, 1.0 - t, zw, eps=cfg.eps_splat,
                            eps_coverage=cfg.eps_coverage)
    res, logit = _unet(T.concat([base_t0, base_t1, context], axis=1), params)
    flow_t0 = T.add(base_t0, T.narrow(res, 1, 0, 2))
    flow_t1 = T.add(base_t1, T.narrow(res, 1, 2, 2))
    mask = T.sigmoid(logit)
    return flow_t0, flow_t1, mask


def blend(i0: Tensor, i1: Tensor, flow_t0: Tensor, flow_t1: Tensor,
          mask: Tensor) -> Tensor:
    """Mask-weighted combination of the two backward-warped frames.

    I_blend = M * warp(I0, flow_t0) + (1 - M) * warp(I1, flow_t1); M == 1
    or M == 0 reproduces a single warped frame exactly.
    """
    i0t = backward_warp(i0, flow_t0)
    i1t = backward_warp(i1, flow_t1)
    return T.add(T.mul(mask, i0t), T.mul(T.sub(1.0, mask), i1t))


def refine(i_blend: Tensor, context: Tensor, i0: Tensor, i1: Tensor,
           flow_t0: Tensor, flow_t1: Tensor, params: ParamStore) -> Tensor:
    """Residual correction with a dilated block (rates 2, 4, 8).

    I_refine = clamp(I_blend + residual, 0, 1); the head starts at zero so
    an untrained model passes the blend through unchanged.
    """
    body = T.concat([i_blend, context, i0, i1, flow_t0, flow_t1], axis=1)
    x = T.elu(conv2d(body, params["ref.c0.w"], params["ref.c0.b"], padding=1))
    for d in (2, 4, 8):
        x = T.elu(conv2d(x, params[f"ref.d{d}.w"], params[f"ref.d{d}.b"],
                         dilation=d, padding=d))
    x = T.elu(conv2d(x, params["ref.c1.w"], params["ref.c1.b"], padding=1))
    residual = conv2d(x, params["ref.head.w"], params["ref.head.b"], padding=1)
    return T.clamp(T.add(i_blend, residual), 0.0, 1.0)


def interpolate(i0: Tensor, i1: Tensor, t: float, params: ParamStore,
                cfg: RunConfig) -> SynthesisBundle:
    """Full pipeline: flows, context, reversal, blending, refinement."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0,1), got {t}")
    if not isinstance(i0, Tensor):
        i0 = Tensor(i0)
    if not isinstance(i1, Tensor):
        i1 = Tensor(i1)
    flow01, flow10, feat0, feat1 = estimate_biflow(
        i0, i1, params, cfg, return_features=True)
    context = build_context(i0, i1, flow01, flow10, feat0, feat1, params, cfg)
    flow_t0, flow_t1, mask = intermediate_flows(
        flow01, flow10, t, context, params, cfg)
    i_blend = blend(i0, i1, flow_t0, flow_t1, mask)
    i_refine = refine(i_blend, context, i0, i1, flow_t0, flow_t1, params)
    return SynthesisBundle(flow01, flow10, flow_t0, flow_t1, mask,
                           i_blend, i_refine)
