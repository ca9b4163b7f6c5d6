"""Image and flow quality metrics: PSNR, SSIM, end-point error.

All metrics take plain numpy arrays. Images are (C, H, W) or (H, W) floats
in [0,1]; flows are (2, H, W) in pixels.
"""

from __future__ import annotations

import dataclasses

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclasses.dataclass
class MetricReport:
    psnr: float
    ssim: float
    epe: float | None = None


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB for identical pairs."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation keeping only fully-covered windows."""
    size = kernel.size
    h, w = img.shape
    out = np.zeros((h - size + 1, w), dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * img[i:i + h - size + 1]
    out2 = np.zeros((h - size + 1, w - size + 1), dtype=np.float64)
    for i, kv in enumerate(kernel):
        out2 += kv * out[:, i:i + w - size + 1]
    return out2


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window, sigma 1.5.

    Local statistics use population (not sample) weighting; multi-channel
    inputs are averaged over channels. Windows only cover fully-valid
    interior positions, so borders never dilute the score.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"ssim shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[None]
        gt = gt[None]
    if min(pred.shape[1], pred.shape[2]) < SSIM_WINDOW:
        raise ValueError(
            f"image {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            f"ssim window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    scores = []
    for c in range(pred.shape[0]):
        x = pred[c]
        y = gt[c]
        mx = _filter_valid(x, kernel)
        my = _filter_valid(y, kernel)
        mxx = _filter_valid(x * x, kernel)
        myy = _filter_valid(y * y, kernel)
        mxy = _filter_valid(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def epe(flow: np.ndarray, gt_flow: np.ndarray,
        mask: np.ndarray | None = None) -> float:
    """Mean Euclidean end-point error in pixels, optionally masked."""
    flow = np.asarray(flow, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    if flow.shape != gt_flow.shape:
        raise ValueError(f"epe shapes differ: {flow.shape} vs {gt_flow.shape}")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected (2,H,W) flow, got {flow.shape}")
    err = np.sqrt(((flow - gt_flow) ** 2).sum(axis=0))
    if mask is not None:
        err = err[mask]
    return float(err.mean())


def metrics(pred: np.ndarray, gt: np.ndarray,
            flow: np.ndarray | None = None,
            gt_flow: np.ndarray | None = None) -> MetricReport:
    report = MetricReport(psnr=psnr(pred, gt), ssim=ssim(pred, gt))
    if flow is not None and gt_flow is not None:
        report.epe = epe(flow, gt_flow)
    return report
