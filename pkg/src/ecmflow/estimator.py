"""Bidirectional optical flow by forward-warp correlation matching.

A weight-shared recurrent pyramid: one encoder, one feature downsampler and
one upscale network are reused at every level, so parameter count is
independent of pyramid depth. At each level the source features are
forward-splatted along the current flow, matched against the target features
over a local displacement grid, and the flow is updated by the soft-argmax
of the correlation scores, then carried back to source coordinates.
"""

from __future__ import annotations

import math

import numpy as np

from ecmflow import tensor as T
from ecmflow.tensor import Tensor, ShapeError
from ecmflow.conv import conv2d, bilinear_resize
from ecmflow.config import RunConfig, ConfigError
from ecmflow.optim import ParamStore, he_conv_init
from ecmflow.warp import softmax_splat, backward_warp

NEG_CORR = -1.0e9  # stands in for -inf on out-of-image candidates


def search_range(cfg: RunConfig) -> list[int]:
    """Per-level maximum recoverable displacement in input pixels.

    R_1 = D_initial * r, then R_L = R_{L-1} * D + r for each added level.
    """
    ranges = [cfg.d_initial * cfg.radius]
    for _ in range(1, cfg.levels):
        ranges.append(ranges[-1] * cfg.d_level + cfg.radius)
    return ranges


# ---------------------------------------------------------------------------
# parameters


def init_estimator_params(store: ParamStore, cfg: RunConfig,
                          rng: np.random.Generator) -> None:
    c = cfg.channels
    store.create("enc.in.w", he_conv_init(rng, c, 3, 3, 3))
    store.create("enc.in.b", np.zeros(c, dtype=np.float32))
    n_strided = int(round(math.log2(cfg.d_initial)))
    for i in range(n_strided):
        store.create(f"enc.down{i}.w", he_conv_init(rng, c, c, 3, 3))
        store.create(f"enc.down{i}.b", np.zeros(c, dtype=np.float32))
    store.create("enc.out.w", he_conv_init(rng, c, c, 3, 3))
    store.create("enc.out.b", np.zeros(c, dtype=np.float32))

    # The between-level downsampler starts as a binomial smoothing kernel:
    # an untrained pyramid then behaves like a classical lowpass image
    # pyramid, so coarse-level matching degrades gracefully for motions
    # that land between coarse grid points. Training refines it freely.
    # The 5-tap kernel is the standard pyramid generator; a 3x3 binomial
    # passes too much energy above the half-band and the resulting alias
    # noise swamps coarse-level correlations.
    tap = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float32) / 16.0
    binom = np.outer(tap, tap)
    w_down = np.zeros((c, c, 5, 5), dtype=np.float32)
    for ch in range(c):
        w_down[ch, ch] = binom
    store.create("pyr.down.w", w_down)
    store.create("pyr.down.b", np.zeros(c, dtype=np.float32))

    up_in = 6 + 2 * c  # two flows, two weight maps, two feature stacks
    store.create("up.c0.w", he_conv_init(rng, c, up_in, 3, 3))
    store.create("up.c0.b", np.zeros(c, dtype=np.float32))
    store.create("up.c1.w", he_conv_init(rng, c, c, 3, 3))
    store.create("up.c1.b", np.zeros(c, dtype=np.float32))
    # zero-initialized heads: upscaling starts as pure bilinear scaling and
    # splats start uniform
    store.create("up.flow.w", np.zeros((4, c, 3, 3), dtype=np.float32))
    store.create("up.flow.b", np.zeros(4, dtype=np.float32))
    store.create("up.weight.w", np.zeros((2, c, 3, 3), dtype=np.float32))
    store.create("up.weight.b", np.zeros(2, dtype=np.float32))


def configure_sampling_encoder(store: ParamStore, cfg: RunConfig) -> None:
    """Rewire the encoder into an exact local-constellation sampler.

    Channels 0..2 copy R,G,B through center taps and channel 3 carries
    center luma; the remaining channels carry single-color taps at fixed
    offsets around each feature position: an 8-neighbour ring from the
    first conv, extended outward by one input-lattice step at every later
    stage, so the final feature describes a constellation spanning several
    pixels in each direction. The ring cycles through the three color
    planes so that heavy pyramid smoothing cannot collapse the channels
    onto a single shared field. Every tap subtracts 0.5 through its bias:
    without centering, the shared positive mean of image values dominates
    every feature vector and normalized correlations of unrelated
    positions crowd toward one. Each tap sits at a fixed offset and the
    nonlinearity acts pointwise, so translating the image by a multiple of
    the level stride translates the features exactly. Intended for
    matching experiments without any training.
    """
    if cfg.channels < 4:
        raise ConfigError(
            f"sampling encoder needs >= 4 channels, got {cfg.channels}")
    c = cfg.channels
    free = [4]  # next unassigned channel

    def alloc():
        if free[0] >= c:
            return None
        free[0] += 1
        return free[0] - 1

    def binom2d(taps: int) -> np.ndarray:
        row = np.array([math.comb(taps - 1, i) for i in range(taps)],
                       dtype=np.float32)
        row /= row.sum()
        return np.outer(row, row)

    w_in = np.zeros((c, 3, 3, 3), dtype=np.float32)
    b_in = np.full(c, -0.5, dtype=np.float32)
    for ch in range(3):
        w_in[ch, ch] = binom2d(3)
    w_in[3, :] = binom2d(3) / 3.0
    # frontier: (channel, kernel dy, kernel dx) chains growing outward
    dirs = [(0, -1), (0, 1), (-1, 0), (1, 0),
            (-1, -1), (-1, 1), (1, -1), (1, 1)]
    frontier = []
    for i, (dy, dx) in enumerate(dirs):
        ch = alloc()
        if ch is None:
            break
        col = i % 3
        w_in[ch, col, 1 + dy, 1 + dx] = 1.0
        frontier.append((ch, dy, dx))
    b_in[free[0]:] = 0.0
    store.replace("enc.in.w", w_in)
    store.replace("enc.in.b", b_in)

    def passthrough_with_extension(n_extend: int, taps: int):
        # smoothing passthrough: each strided stage decimates, and bare
        # center taps would alias fine texture into the feature lattice;
        # a single hard matching pass per level also needs the surviving
        # content to vary slowly relative to the level stride
        w = np.zeros((c, c, taps, taps), dtype=np.float32)
        mid = (taps - 1) // 2
        for ch in range(free[0]):
            w[ch, ch] = binom2d(taps)
        for i, (src, dy, dx) in enumerate(frontier[:n_extend]):
            ch = alloc()
            if ch is None:
                break
            w[ch, src, mid + dy, mid + dx] = 1.0
            frontier[i] = (ch, dy, dx)
        return w

    n_strided = int(round(math.log2(cfg.d_initial)))
    for i in range(n_strided):
        w = passthrough_with_extension(len(frontier), 3)
        store.replace(f"enc.down{i}.w", w)
        store.replace(f"enc.down{i}.b", np.zeros(c, dtype=np.float32))
    w = passthrough_with_extension(4, 5)
    store.replace("enc.out.w", w)
    store.replace("enc.out.b", np.zeros(c, dtype=np.float32))

    w_down = np.zeros((c, c, 9, 9), dtype=np.float32)
    for ch in range(c):
        w_down[ch, ch] = binom2d(9)
    store.replace("pyr.down.w", w_down)
    store.replace("pyr.down.b", np.zeros(c, dtype=np.float32))


# ---------------------------------------------------------------------------
# feature extraction


def encode(image: Tensor, params: ParamStore, cfg: RunConfig) -> Tensor:
    """Finest-level features at 1/D_initial of the input resolution."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"encode expects (N,3,H,W), got {image.shape}")
    if image.shape[2] < cfg.d_initial or image.shape[3] < cfg.d_initial:
        raise ShapeError(
            f"image {image.shape} smaller than encoder stride {cfg.d_initial}")
    def half(name):
        return (params[name].shape[2] - 1) // 2

    x = T.elu(conv2d(image, params["enc.in.w"], params["enc.in.b"],
                     padding=half("enc.in.w")))
    n_strided = int(round(math.log2(cfg.d_initial)))
    for i in range(n_strided):
        x = T.elu(conv2d(x, params[f"enc.down{i}.w"], params[f"enc.down{i}.b"],
                         stride=2, padding=half(f"enc.down{i}.w")))
    x = T.elu(conv2d(x, params["enc.out.w"], params["enc.out.b"],
                     padding=half("enc.out.w")))
    return x


def downsample_feature(feature: Tensor, params: ParamStore) -> Tensor:
    """Next-coarser pyramid level: stride-2 convolution, channels kept."""
    if feature.shape[2] < 2 or feature.shape[3] < 2:
        raise ShapeError(f"cannot downsample extents {feature.shape}")
    k = params["pyr.down.w"].shape[2]
    return T.elu(conv2d(feature, params["pyr.down.w"], params["pyr.down.b"],
                        stride=2, padding=(k - 1) // 2))


# ---------------------------------------------------------------------------
# matching


def displacement_grid(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate displacements in channel order: row-major dy then dx."""
    side = 2 * r + 1
    dys, dxs = np.mgrid[-r:r + 1, -r:r + 1]
    return dxs.reshape(side * side), dys.reshape(side * side)


def local_correlation(warped: Tensor, target: Tensor, r: int) -> Tensor:
    """Channel-dot correlation over a (2r+1) x (2r+1) displacement grid.

    out(p, k) = sum_c warped(c, p) * target(c, p + d_k) / sqrt(C), where d_k
    runs row-major over dy then dx. Candidates falling outside the image get
    the constant NEG_CORR so a downstream softmax ignores them; no gradient
    flows through those entries.
    """
    if warped.shape != target.shape:
        raise ShapeError(
            f"correlation shapes differ: {warped.shape} vs {target.shape}")
    if r < 1:
        raise ShapeError(f"correlation radius must be >= 1, got {r}")
    n, c, h, w = warped.shape
    dt = warped.data.dtype
    side = 2 * r + 1
    k = side * side
    inv_sqrt_c = dt.type(1.0 / math.sqrt(c))

    tpad = np.pad(target.data, ((0, 0), (0, 0), (r, r), (r, r)))
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    out = np.empty((n, k, h, w), dtype=dt)
    valids = []
    for i, (dy, dx) in enumerate(
            (dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)):
        shifted = tpad[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
        corr = (warped.data * shifted).sum(axis=1) * inv_sqrt_c
        valid = ((ys + dy >= 0) & (ys + dy < h) &
                 (xs + dx >= 0) & (xs + dx < w))
        out[:, i] = np.where(valid, corr, dt.type(NEG_CORR))
        valids.append(valid)
    out_t = T._wrap(out, "local_correlation")

    def bwd(g):
        gw = np.zeros((n, c, h, w), dtype=dt)
        gtpad = np.zeros_like(tpad)
        for i, (dy, dx) in enumerate(
                (dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)):
            gi = (g[:, i] * valids[i])[:, None] * inv_sqrt_c
            shifted = tpad[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            gw += gi * shifted
            gtpad[:, :, r + dy:r + dy + h, r + dx:r + dx + w] += gi * warped.data
        gt = np.ascontiguousarray(gtpad[:, :, r:r + h, r:r + w])
        return gw, gt

    T.record("local_correlation", (warped, target), (out_t,), bwd)
    return out_t


def soft_argmax_update(cost: Tensor, flow_prev: Tensor, tau: float) -> Tensor:
    """Flow update from a cost volume: expected displacement under softmax.

    delta(p) = sum_k softmax_k(tau * cost(p, .)) * d_k, added pointwise to
    the previous flow. The result lives on the target-frame grid (the cost
    was computed there); componentwise |delta| <= r by convexity.
    """
    kch = cost.shape[1]
    side = int(round(math.sqrt(kch)))
    if side * side != kch or side % 2 != 1:
        raise ShapeError(f"cost channels {kch} are not an odd square")
    if flow_prev.shape[1] != 2 or flow_prev.shape[0] != cost.shape[0] or \
            flow_prev.shape[2:] != cost.shape[2:]:
        raise ShapeError(
            f"flow {flow_prev.shape} does not match cost {cost.shape}")
    r = (side - 1) // 2
    dxs, dys = displacement_grid(r)
    dt = cost.data.dtype
    dx_t = Tensor(dxs.reshape(1, kch, 1, 1).astype(dt))
    dy_t = Tensor(dys.reshape(1, kch, 1, 1).astype(dt))
    prob = T.softmax(T.mul(cost, float(tau)), axis=1)
    ex = T.tsum(T.mul(prob, dx_t), axis=1, keepdims=True)
    ey = T.tsum(T.mul(prob, dy_t), axis=1, keepdims=True)
    return T.add(flow_prev, T.concat([ex, ey], axis=1))


def rewarp_flow_to_source(updated: Tensor, carrier: Tensor, weight: Tensor,
                          eps_coverage: float = 1e-4,
                          coverage: Tensor | None = None,
                          max_step: float | None = None,
                          min_coverage: float | None = None,
                          max_coverage: float | None = None) -> Tensor:
    """Carry a target-coordinate flow back onto the source pixel grid.

    Each source pixel p fetches the updated flow from p + carrier(p) by
    bilinear sampling. Where the forward splat left no mass (sampled
    coverage below eps_coverage) the pre-update carrier value is kept
    instead, so occluded regions never inherit unrelated updates.

    A unanimous flow field deposits exactly unit mass on every covered
    target cell, so coverage away from one marks trouble: above, a
    collision between disagreeing motions; below, a partial hole whose
    content is mostly stray splat tails. With min_coverage/max_coverage
    set, cells outside the band also fall back to the carrier; with
    max_step set, the surviving fetch may differ from the carrier by at
    most max_step per component (a matching step never exceeds the search
    radius, so this only bites on blends).
    """
    if updated.shape != carrier.shape:
        raise ShapeError(
            f"flow shapes differ: {updated.shape} vs {carrier.shape}")
    if coverage is None:
        ones = T.ones((carrier.shape[0], 1, carrier.shape[2], carrier.shape[3]),
                      dtype=carrier.data.dtype)
        _, coverage = softmax_splat(ones, carrier, weight)
    fetched = backward_warp(updated, carrier)
    if max_step is not None:
        step = T.clamp(T.sub(fetched, carrier), -max_step, max_step)
        fetched = T.add(carrier, step)
    sampled_cov = backward_warp(coverage, carrier)
    lo = eps_coverage if min_coverage is None else min_coverage
    solid = sampled_cov.data >= lo
    if max_coverage is not None:
        solid = solid & (sampled_cov.data <= max_coverage)
    return T.where_mask(solid, fetched, carrier)


# ---------------------------------------------------------------------------
# pyramid driver


def upscale_flow(flow01: Tensor, flow10: Tensor, w0: Tensor, w1: Tensor,
                 f0_next: Tensor, f1_next: Tensor, d: int,
                 params: ParamStore):
    """Move flows and importance weights one level finer.

    Flows are bilinearly upsampled with displacements scaled by d, then a
    small decoder over (upsampled flows, upsampled weights, both feature
    stacks) adds per-direction residuals and emits fresh log-importance
    weights. With the heads at their zero initialization this is exactly
    scaled bilinear upsampling and uniform weights.
    """
    h2, w2 = f0_next.shape[2], f0_next.shape[3]
    h1, w1_ = flow01.shape[2], flow01.shape[3]
    if f1_next.shape[2:] != f0_next.shape[2:]:
        raise ShapeError("next-level feature extents differ between frames")
    if (h2, w2) != (h1 * d, w1_ * d):
        raise ShapeError(
            f"next level extents {(h2, w2)} are not {d}x {(h1, w1_)}")
    up01 = T.mul(bilinear_resize(flow01, h2, w2), float(d))
    up10 = T.mul(bilinear_resize(flow10, h2, w2), float(d))
    uw0 = bilinear_resize(w0, h2, w2)
    uw1 = bilinear_resize(w1, h2, w2)
    body = T.concat([up01, up10, uw0, uw1, f0_next, f1_next], axis=1)
    x = T.elu(conv2d(body, params["up.c0.w"], params["up.c0.b"], padding=1))
    x = T.elu(conv2d(x, params["up.c1.w"], params["up.c1.b"], padding=1))
    res = conv2d(x, params["up.flow.w"], params["up.flow.b"], padding=1)
    nw = conv2d(x, params["up.weight.w"], params["up.weight.b"], padding=1)
    out01 = T.add(up01, T.narrow(res, 1, 0, 2))
    out10 = T.add(up10, T.narrow(res, 1, 2, 2))
    return out01, out10, T.narrow(nw, 1, 0, 1), T.narrow(nw, 1, 1, 1)


def _level_update(f_src: Tensor, f_tgt: Tensor, flow: Tensor, w_src: Tensor,
                  cfg: RunConfig):
    """One matching pass for one direction at one pyramid level.

    Features and the flow itself ride the same splat, so the cost volume at
    a target position q is matched against the flow value that landed at q.
    The soft-argmax correction is applied there and the corrected field is
    fetched back to source positions along the pre-update flow.
    """
    c = f_src.shape[1]
    stacked = T.concat([f_src, flow], axis=1)
    splatted, cov = softmax_splat(stacked, flow, w_src, eps=cfg.eps_splat)
    warped = T.narrow(splatted, 1, 0, c)
    flow_at_target = T.narrow(splatted, 1, c, 2)
    cost = local_correlation(warped, f_tgt, cfg.radius)
    updated = soft_argmax_update(cost, flow_at_target, cfg.temperature)
    flow_next = rewarp_flow_to_source(
        updated, flow, w_src, eps_coverage=cfg.eps_coverage, coverage=cov,
        max_step=float(cfg.radius), min_coverage=cfg.min_coverage,
        max_coverage=cfg.max_coverage)
    return flow_next, cost


def normalize_features(feature: Tensor, corr_scale: float) -> Tensor:
    """Scale each pixel's feature vector to a fixed L2 norm.

    After normalization two perfectly aligned vectors correlate to exactly
    corr_scale (the dot product divided by sqrt(C) used downstream), and a
    pixel always matches itself at least as well as any other candidate.
    Identical frames therefore keep their flows pinned at zero no matter
    how the convolution weights were drawn.
    """
    c = feature.shape[1]
    target = float(math.sqrt(math.sqrt(c) * corr_scale))
    sq = T.tsum(T.mul(feature, feature), axis=1, keepdims=True)
    norm = T.sqrt(T.add(sq, 1e-12))
    return T.div(T.mul(feature, target), norm)


def build_pyramid(image: Tensor, params: ParamStore, cfg: RunConfig) -> list[Tensor]:
    """Feature pyramid ordered coarsest (level 1) to finest (level L).

    Every level is renormalized to a fixed per-pixel norm so the matching
    stage sees scaled cosine similarities.
    """
    raw = encode(image, params, cfg)
    levels = [normalize_features(raw, cfg.corr_scale)]
    for _ in range(cfg.levels - 1):
        # downsample the raw field: normalization blows feature magnitudes
        # up to the matching scale and the downsampler's nonlinearity would
        # saturate on them
        raw = downsample_feature(raw, params)
        levels.append(normalize_features(raw, cfg.corr_scale))
    return levels[::-1]


def required_divisor(cfg: RunConfig) -> int:
    return cfg.d_initial * cfg.d_level ** (cfg.levels - 1)


def pad_to_divisible(image: Tensor, cfg: RunConfig) -> tuple[Tensor, int, int]:
    """Reflect-pad an (N,C,H,W) image so extents divide the pyramid stride."""
    div = required_divisor(cfg)
    h, w = image.shape[2], image.shape[3]
    ph = (-h) % div
    pw = (-w) % div
    if ph == 0 and pw == 0:
        return image, h, w
    if ph >= h or pw >= w:
        raise ShapeError(
            f"image {h}x{w} too small to pad to a multiple of {div}")
    return T.pad2d_reflect(image, 0, ph, 0, pw), h, w


def estimate_biflow(i0: Tensor, i1: Tensor, params: ParamStore,
                    cfg: RunConfig, dump=None, return_features: bool = False):
    """Bidirectional flow between two frames at input resolution.

    Both directions run through the same parameters at every level. Level-1
    flows start at exactly zero with uniform importance weights; the final
    level-L flows are bilinearly upsampled to input size with displacements
    scaled by D_initial, then cropped back to the original extents.

    ``dump(level, direction, flow_array, cost_stats)`` receives per-level
    snapshots when provided. With ``return_features`` the finest-level
    feature tensors of both (padded) frames are appended to the result so
    downstream consumers can reuse them.
    """
    if not isinstance(i0, Tensor):
        i0 = Tensor(i0)
    if not isinstance(i1, Tensor):
        i1 = Tensor(i1)
    if i0.shape != i1.shape:
        raise ShapeError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
    i0p, h, w = pad_to_divisible(i0, cfg)
    i1p, _, _ = pad_to_divisible(i1, cfg)
    pyr0 = build_pyramid(i0p, params, cfg)
    pyr1 = build_pyramid(i1p, params, cfg)

    n = i0.shape[0]
    dt = i0.data.dtype
    h1, w1 = pyr0[0].shape[2], pyr0[0].shape[3]
    flow01 = T.zeros((n, 2, h1, w1), dtype=dt)
    flow10 = T.zeros((n, 2, h1, w1), dtype=dt)
    wt0 = T.zeros((n, 1, h1, w1), dtype=dt)
    wt1 = T.zeros((n, 1, h1, w1), dtype=dt)

    for level in range(cfg.levels):
        f0, f1 = pyr0[level], pyr1[level]
        flow01, cost01 = _level_update(f0, f1, flow01, wt0, cfg)
        flow10, cost10 = _level_update(f1, f0, flow10, wt1, cfg)
        if dump is not None:
            for name, fl, cost in (("0to1", flow01, cost01),
                                   ("1to0", flow10, cost10)):
                live = cost.data[cost.data > NEG_CORR / 2]
                stats = (float(live.min()), float(live.max()),
                         float(live.mean()))
                dump(level + 1, name, fl.data, stats)
        if level + 1 < cfg.levels:
            flow01, flow10, wt0, wt1 = upscale_flow(
                flow01, flow10, wt0, wt1,
                pyr0[level + 1], pyr1[level + 1], cfg.d_level, params)

    hp, wp = i0p.shape[2], i0p.shape[3]
    full01 = T.mul(bilinear_resize(flow01, hp, wp), float(cfg.d_initial))
    full10 = T.mul(bilinear_resize(flow10, hp, wp), float(cfg.d_initial))
    if (hp, wp) != (h, w):
        full01 = T.crop2d(full01, 0, 0, h, w)
        full10 = T.crop2d(full10, 0, 0, h, w)
    if return_features:
        return full01, full10, pyr0[-1], pyr1[-1]
    return full01, full10
