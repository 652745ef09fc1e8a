"""Distortion metrics, pixel-histogram entropy and sample-diversity statistics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    pred, ref = _pair(pred, ref)
    mse = np.mean((pred - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over fully-covered windows only
    r = len(g)
    out = ndimage.correlate1d(img, g, axis=-2, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-1, mode="constant")
    c = r // 2
    return out[..., c:img.shape[-2] - c, c:img.shape[-1] - c]


def ssim(pred, ref, window: int = 11, K1: float = 0.01, K2: float = 0.03, data_range: float = 2.0,
         sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully-covered Gaussian windows.

    Accepts (H, W), (C, H, W) or (N, C, H, W); each 2-D plane is scored on
    its own and the plane scores are averaged. Planes smaller than the window
    use the largest odd window that fits.
    """
    pred, ref = _pair(pred, ref)
    h, w = pred.shape[-2:]
    window = min(window, h - (1 - h % 2), w - (1 - w % 2))
    g = gaussian_window(window, sigma)
    planes_p = pred.reshape(-1, h, w)
    planes_r = ref.reshape(-1, h, w)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    scores = []
    for x, y in zip(planes_p, planes_r):
        mx, my = _valid_filter(x, g), _valid_filter(y, g)
        sxx = _valid_filter(x * x, g) - mx * mx
        syy = _valid_filter(y * y, g) - my * my
        sxy = _valid_filter(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def entropy_bpd(values) -> float:
    """Shannon entropy (bits) of a 256-bin histogram spanning the observed value range."""
    v = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in values]) \
        if isinstance(values, (list, tuple)) else np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return 0.0
    bins = np.clip(np.floor((v - lo) / (hi - lo) * 256), 0, 255).astype(np.int64)
    counts = np.bincount(bins, minlength=256)
    p = counts[counts > 0] / v.size
    return float(-(p * np.log2(p)).sum())


LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def laplacian(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    flat = img.reshape(-1, *img.shape[-2:])
    out = np.stack([ndimage.correlate(p, LAPLACIAN, mode="reflect") for p in flat])
    return out.reshape(img.shape)


def diversity_stats(input_img, ref, samples) -> tuple[float, float, np.ndarray]:
    """(sharpness, diversity, per-pixel std map) for a set of restorations of one input.

    sharpness = |lap(input)| / |lap(ref)|, diversity = |Var[samples]| / |lap(ref)|
    with Frobenius norms and unbiased per-pixel variance.
    """
    samples = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    ref_norm = np.linalg.norm(laplacian(ref))
    if ref_norm == 0:
        raise ValueError("reference has a zero Laplacian")
    sharpness = float(np.linalg.norm(laplacian(input_img)) / ref_norm)
    var = samples.var(axis=0, ddof=1)
    diversity = float(np.linalg.norm(var) / ref_norm)
    return sharpness, diversity, np.sqrt(var)


def metric_report(per_metric: dict[str, list[float]]) -> dict:
    return {
        name: {
            "per_image": [float(v) for v in vals],
            "mean": float(np.mean(vals)) if len(vals) else float("nan"),
            "std": float(np.std(vals)) if len(vals) else float("nan"),
        }
        for name, vals in per_metric.items()
    }
