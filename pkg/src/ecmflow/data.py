"""Procedural two-frame sequences with analytic ground truth.

Every sample carries the exact intermediate frame and the exact flow for
its motion model, so training and evaluation never depend on external
datasets. Textures are band-limited noise (smoothed with a circular
boundary), which keeps circular translations self-consistent.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

KINDS = ("translate", "rotate", "occlusion")


@dataclasses.dataclass
class SyntheticSample:
    i0: np.ndarray       # (3,H,W) float32 in [0,1]
    i1: np.ndarray
    t: float
    it_gt: np.ndarray    # analytic frame at time t
    flow01: np.ndarray   # (2,H,W) float32, exact for the motion model
    kind: str
    motion: dict         # analytic motion parameters


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _blur_circular(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with wraparound boundaries."""
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()
    out = img
    for axis in (1, 2):
        acc = np.zeros_like(out)
        for off, kv in zip(range(-radius, radius + 1), k):
            acc += kv * np.roll(out, -off, axis=axis)
        out = acc
    return out


def _smooth_noise(rng: np.random.Generator, h: int, w: int,
                  sigma: float = 1.5) -> np.ndarray:
    """Multi-octave RGB texture in [0.02, 0.98], circular boundary.

    Each octave is a sparse field of randomly colored blobs (blurred
    impulses) rather than filtered dense noise: a Gaussian field is highly
    self-similar and distant windows of it correlate by chance, while
    sparse blob constellations are locally unique, which is what
    correlation matching needs. Octave contrasts are matched; octaves
    larger than an eighth of the extent are left out because structure far
    broader than a matching window raises every candidate's correlation
    equally. ``sigma`` sets the finest octave.
    """
    tex = np.zeros((3, h, w))
    scale = sigma
    while scale <= min(h, w) / 8.0:
        # one blob per (2*scale)-sized cell of a jittered grid: purely
        # random placement leaves featureless voids where matching has
        # nothing to lock onto
        g = 2.0 * scale
        ny, nx = max(2, int(round(h / g))), max(2, int(round(w / g)))
        cy = (np.arange(ny)[:, None] + rng.uniform(0.1, 0.9, (ny, nx))) * (h / ny)
        cx = (np.arange(nx)[None, :] + rng.uniform(0.1, 0.9, (ny, nx))) * (w / nx)
        ys = np.minimum(cy.astype(int).ravel(), h - 1)
        xs = np.minimum(cx.astype(int).ravel(), w - 1)
        cols = rng.standard_normal((3, ny * nx))
        impulses = np.zeros((3, h, w))
        np.add.at(impulses, (slice(None), ys, xs), cols)
        oct_ = _blur_circular(impulses, scale)
        tex += oct_ / max(oct_.std(), 1e-12)
        scale *= 2.0
    # common luminance component makes the channels cohere like a photo
    luma = tex.mean(axis=0, keepdims=True)
    tex = 0.6 * luma + 0.4 * tex
    # soft range squash: a hard clip would flatten the deep tails into
    # featureless plateaus that defeat correlation matching
    z = tex / max(tex.std(), 1e-8)
    tex = 0.5 + 0.48 * np.tanh(0.8 * z)
    return np.clip(tex, 0.02, 0.98).astype(np.float32)


def _circular_shift(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift content by (dx, dy) with wraparound; bilinear when fractional.

    The result at pixel p equals the input at p - d (mod size), so content
    moves rightward/downward for positive d.
    """
    c, h, w = img.shape
    ix, fx = divmod(dx, 1.0)
    iy, fy = divmod(dy, 1.0)
    out = np.roll(img, (int(iy), int(ix)), axis=(1, 2))
    if fx == 0.0 and fy == 0.0:
        return out.copy()
    right = np.roll(out, 1, axis=2)
    down = np.roll(out, 1, axis=1)
    downright = np.roll(right, 1, axis=1)
    return ((1 - fx) * (1 - fy) * out + fx * (1 - fy) * right +
            (1 - fx) * fy * down + fx * fy * downright).astype(img.dtype)


def apply_constant_flow(img: np.ndarray, d: tuple[float, float]) -> np.ndarray:
    """The generator's own warp for translations (circular, bilinear)."""
    return _circular_shift(img, d[0], d[1])


def wrapped_translation_pair(seed, size: int, dx: float, dy: float,
                             margin: int, sigma: float = 4.0):
    """Frame pair for translation-recovery runs, presented on a torus.

    A size x size texture lives on a torus, so a circular translation is an
    exact rigid motion with flow (dx, dy) at every texel. Both frames are
    periodically extended by ``margin`` pixels per side before being handed
    to an estimator: convolution borders then land in the margin, and the
    central size x size tile (offset ``margin`` in the returned canvases)
    carries the clean ground truth. The margin must cover the estimator's
    receptive field plus the displacement itself, or border garbage leaks
    into the tile.

    Returns (canvas0, canvas1) as (3, size+2*margin, size+2*margin) arrays.
    """
    rng = _as_rng(seed)
    img = _smooth_noise(rng, size, size, sigma=sigma)
    shifted = _circular_shift(img, dx, dy)
    pad = ((0, 0), (margin, margin), (margin, margin))
    return np.pad(img, pad, mode="wrap"), np.pad(shifted, pad, mode="wrap")


def _rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center; bilinear, border-clamped sampling."""
    c, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    # backward map: sample the source at the inverse rotation
    rx = ca * (xs - cx) + sa * (ys - cy) + cx
    ry = -sa * (xs - cx) + ca * (ys - cy) + cy
    rx = np.clip(rx, 0, w - 1)
    ry = np.clip(ry, 0, h - 1)
    x0 = np.clip(np.floor(rx).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(ry).astype(np.int64), 0, h - 2)
    fx = rx - x0
    fy = ry - y0
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x0 + 1]
    v10 = img[:, y0 + 1, x0]
    v11 = img[:, y0 + 1, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return (top + fy * (bot - top)).astype(img.dtype)


def _rotation_flow(h: int, w: int, angle: float) -> np.ndarray:
    """Flow that carries each pixel to its rotated position."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    nx = ca * (xs - cx) - sa * (ys - cy) + cx
    ny = sa * (xs - cx) + ca * (ys - cy) + cy
    return np.stack([nx - xs, ny - ys]).astype(np.float32)


def gen_synthetic(seed, kind: str = "translate", size: int = 64,
                  max_disp: float = 8.0, t: float | None = None,
                  integer: bool = False) -> SyntheticSample:
    """One two-frame sample with exact intermediate frame and flow.

    ``seed`` is an int (or sequence of ints) or a Generator. ``integer``
    restricts translations to whole pixels so ground truth reduces to
    circular rolls. The displacement magnitude is uniform over [0, max_disp].
    """
    rng = _as_rng(seed)
    if kind == "mixed":
        kind = KINDS[rng.integers(len(KINDS))]
    if kind not in KINDS:
        raise ValueError(f"unknown motion kind {kind!r}")
    if max_disp > size / 2:
        raise ValueError(
            f"max_disp {max_disp} too large for {size}x{size} frames")
    if t is None:
        t = float(rng.uniform(0.05, 0.95))
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0,1), got {t}")
    h = w = int(size)
    tex = _smooth_noise(rng, h, w)

    if kind == "translate":
        mag = rng.uniform(0.0, max_disp)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        dx, dy = mag * math.cos(ang), mag * math.sin(ang)
        if integer:
            dx, dy = round(dx), round(dy)
        i0 = tex
        i1 = _circular_shift(i0, dx, dy)
        it = _circular_shift(i0, t * dx, t * dy)
        flow = np.broadcast_to(
            np.array([dx, dy], dtype=np.float32).reshape(2, 1, 1),
            (2, h, w)).copy()
        motion = {"d": (float(dx), float(dy))}
    elif kind == "rotate":
        # cap the rim displacement at max_disp
        rim = math.hypot(h, w) / 2.0
        max_angle = max_disp / rim
        angle = rng.uniform(-max_angle, max_angle)
        i0 = tex
        i1 = _rotate_image(i0, angle)
        it = _rotate_image(i0, t * angle)
        flow = _rotation_flow(h, w, angle)
        motion = {"angle": float(angle)}
    else:  # occlusion: moving square over a static background
        bg = tex
        patch_tex = _smooth_noise(rng, h, w)
        side = h // 3
        top = int(rng.integers(h // 8, h - side - h // 8))
        left = int(rng.integers(w // 8, w - side - w // 8))
        lim = min(max_disp, h // 8, w // 8)
        dx = float(rng.integers(-int(lim), int(lim) + 1))
        dy = float(rng.integers(-int(lim), int(lim) + 1))
        alpha = np.zeros((1, h, w), dtype=np.float32)
        alpha[0, top:top + side, left:left + side] = 1.0

        def compose(shift_x, shift_y):
            a = _circular_shift(alpha, shift_x, shift_y)
            p = _circular_shift(patch_tex, shift_x, shift_y)
            return (a * p + (1.0 - a) * bg).astype(np.float32)

        i0 = compose(0.0, 0.0)
        i1 = compose(dx, dy)
        it = compose(t * dx, t * dy)
        flow = np.zeros((2, h, w), dtype=np.float32)
        flow[0, top:top + side, left:left + side] = dx
        flow[1, top:top + side, left:left + side] = dy
        motion = {"d": (dx, dy), "rect": (top, left, side)}
    return SyntheticSample(i0=i0, i1=i1, t=float(t), it_gt=it,
                           flow01=flow, kind=kind, motion=motion)


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(s: SyntheticSample, horizontal: bool) -> SyntheticSample:
    """Mirror a sample; the flipped flow component changes sign."""
    axis = 2 if horizontal else 1
    comp = 0 if horizontal else 1
    flow = np.flip(s.flow01, axis=axis).copy()
    flow[comp] = -flow[comp]
    return SyntheticSample(
        i0=np.flip(s.i0, axis=axis).copy(),
        i1=np.flip(s.i1, axis=axis).copy(),
        t=s.t,
        it_gt=np.flip(s.it_gt, axis=axis).copy(),
        flow01=flow,
        kind=s.kind,
        motion=dict(s.motion, flipped=(s.motion.get("flipped", ()) + (axis,))),
    )


def swap_sample(s: SyntheticSample) -> SyntheticSample:
    """Reverse time: (I1, I0, 1-t) with the mirrored analytic flow.

    The intermediate frame is the same physical frame; the forward flow of
    the swapped pair is the reverse motion.
    """
    h, w = s.i0.shape[1], s.i0.shape[2]
    if s.kind == "translate":
        dx, dy = s.motion["d"]
        flow = np.broadcast_to(
            np.array([-dx, -dy], dtype=np.float32).reshape(2, 1, 1),
            (2, h, w)).copy()
        motion = dict(s.motion, d=(-dx, -dy))
    elif s.kind == "rotate":
        angle = s.motion["angle"]
        flow = _rotation_flow(h, w, -angle)
        motion = dict(s.motion, angle=-angle)
    else:
        dx, dy = s.motion["d"]
        top, left, side = s.motion["rect"]
        ntop, nleft = int(round(top + dy)), int(round(left + dx))
        flow = np.zeros((2, h, w), dtype=np.float32)
        ys = np.arange(ntop, ntop + side) % h
        xs = np.arange(nleft, nleft + side) % w
        flow[0][np.ix_(ys, xs)] = -dx
        flow[1][np.ix_(ys, xs)] = -dy
        motion = dict(s.motion, d=(-dx, -dy), rect=(ntop, nleft, side))
    return SyntheticSample(i0=s.i1.copy(), i1=s.i0.copy(), t=1.0 - s.t,
                           it_gt=s.it_gt.copy(), flow01=flow,
                           kind=s.kind, motion=motion)
