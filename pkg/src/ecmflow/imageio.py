"""Image, flow-field, and flow-visualization file I/O.

Images cross this boundary as float arrays in [0,1], shaped (3, H, W).
Flow fields are (2, H, W): channel 0 is dx (positive rightward), channel 1
is dy (positive downward); flow anchored at frame A maps pixel p of A to
p + flow(p) in frame B. All binary formats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class ImageIOError(Exception):
    pass


class FlowIOError(Exception):
    pass


def read_png(path) -> np.ndarray:
    """Load an 8-bit RGB or grayscale PNG as (3, H, W) float32 in [0,1].

    Grayscale is replicated across the three channels; 16-bit and float
    images are rejected.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageIOError(f"unsupported bit depth (mode {mode}): {path}")
            if mode == "L":
                arr = np.asarray(img, dtype=np.float32)
                arr = np.repeat(arr[None], 3, axis=0)
            elif mode in ("RGB", "RGBA", "LA", "P", "1"):
                arr = np.asarray(img.convert("RGB"), dtype=np.float32)
                arr = arr.transpose(2, 0, 1)
            else:
                raise ImageIOError(f"unsupported image mode {mode}: {path}")
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr / 255.0)


def write_png(path, image: np.ndarray) -> None:
    """Save a (3, H, W) or (H, W) float image in [0,1] as an 8-bit PNG.

    Values are clamped to [0,1] and quantized with round-half-to-even, so a
    write/read round-trip is exact to within 1/255.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
        gray = True
    elif arr.ndim == 3 and arr.shape[0] == 3:
        gray = False
    elif arr.ndim == 3 and arr.shape[0] == 1:
        gray = True
    else:
        raise ImageIOError(f"expected (3,H,W), (1,H,W) or (H,W), got {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if gray:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    pil.save(Path(path), format="PNG")


def read_flo(path) -> np.ndarray:
    """Read a Middlebury .flo file as (2, H, W) float32, [dx, dy]."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FlowIOError(f"truncated flow file: {path}")
    magic, width, height = struct.unpack_from("<fii", blob, 0)
    if magic != FLO_MAGIC:
        raise FlowIOError(f"bad magic {magic!r} in {path}")
    if width <= 0 or height <= 0:
        raise FlowIOError(f"bad extents {width}x{height} in {path}")
    expected = 12 + 8 * width * height
    if len(blob) != expected:
        raise FlowIOError(
            f"payload length {len(blob)} != expected {expected} for "
            f"{width}x{height} flow: {path}")
    data = np.frombuffer(blob, dtype="<f4", count=2 * width * height, offset=12)
    hwc = data.reshape(height, width, 2)
    return np.ascontiguousarray(hwc.transpose(2, 0, 1)).astype(np.float32, copy=False)


def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) flow field as a Middlebury .flo file, bit-exactly."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FlowIOError(f"expected (2,H,W) flow, got {flow.shape}")
    h, w = flow.shape[1], flow.shape[2]
    hwc = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4")
    with open(Path(path), "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(hwc.tobytes(order="C"))


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Render a flow field with the standard color wheel as (3, H, W) in [0,1].

    Hue encodes atan2(dy, dx); saturation is magnitude / max_mag clamped to
    1; value is 1 everywhere, so zero flow maps to white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FlowIOError(f"expected (2,H,W) flow, got {flow.shape}")
    dx, dy = flow[0], flow[1]
    mag = np.sqrt(dx * dx + dy * dy)
    if max_mag is None:
        max_mag = float(mag.max())
    denom = max(max_mag, 1e-12)
    sat = np.clip(mag / denom, 0.0, 1.0)
    hue = np.mod(np.arctan2(dy, dx), 2.0 * np.pi) / (2.0 * np.pi)

    # vectorized HSV -> RGB with V = 1
    h6 = hue * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    u = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    rs = np.choose(sector, [one, q, p, p, u, one])
    gs = np.choose(sector, [u, one, one, q, p, p])
    bs = np.choose(sector, [p, p, u, one, one, q])
    return np.ascontiguousarray(
        np.stack([rs, gs, bs]).astype(np.float32))
