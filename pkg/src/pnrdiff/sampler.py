"""Predict-and-refine sampling, sample averaging and the perception-distortion sweep."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import atomic_write_bytes, derive_rng
from .diffusion import ALPHABAR_FLOOR, check_finite, predict_x0_from_eps, reverse_step, reverse_step_from_eps
from .metrics import psnr, ssim
from .schedule import DEFAULT_T_GRID, DEFAULT_VAR_GRID, build_inference_schedule

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["T", "var_end", "n_avg", "psnr_mean", "ssim_mean", "pixel_std_mean", "wall_ms"]
DEFAULT_NAVG_GRID = (1, 8)


class Restorer(Protocol):
    def predict(self, y: np.ndarray) -> np.ndarray: ...

    def denoise(self, zt: np.ndarray, sqrt_alphabar, y: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SampleConfig:
    T: int = 10
    var_end: float = 0.1
    n_samples: int = 1
    average: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 < self.var_end < 1:
            raise ValueError("var_end must lie in (0, 1)")
        if self.average and self.n_samples == 1:
            log.warning("sample averaging with a single sample is a plain sample")


def sample_rng(seed: int, image_id: int, sample_index: int) -> np.random.Generator:
    return derive_rng(seed, image_id, sample_index)


def refine(nets: Restorer, y: np.ndarray, x_init: np.ndarray, cfg: SampleConfig,
           rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Run the reverse process for a batch; row i draws all its noise from ``rngs[i]``.

    Returns clamp(x_init + z_0, -1, 1).
    """
    s = build_inference_schedule(cfg.T, cfg.var_end)
    shape = y.shape[1:]

    def draw():
        return np.stack([r.standard_normal(shape) for r in rngs])

    z = draw()
    for t in range(s.T, 0, -1):
        noise = draw()
        ab = s.alphabars[t]
        eps_hat = np.asarray(nets.denoise(z.astype(y.dtype), np.sqrt(ab), y), dtype=np.float64)
        check_finite(eps_hat, "denoiser output")
        if ab >= ALPHABAR_FLOOR:
            z0_hat = predict_x0_from_eps(z, eps_hat, ab)
            z = reverse_step(z, z0_hat, t, s, noise)
        else:
            # long, steep grid schedules underflow the x0 inversion; the eps form is the same mean
            z = reverse_step_from_eps(z, eps_hat, t, s, noise)
    return np.clip(x_init + z, -1.0, 1.0)


def sample(nets: Restorer, y: np.ndarray, cfg: SampleConfig, image_ids: Sequence[int] | None = None,
           sample_index: int = 0) -> np.ndarray:
    """One predict-and-refine restoration per input image (T denoiser calls, 1 predictor call)."""
    y = np.asarray(y)
    ids = range(len(y)) if image_ids is None else image_ids
    x_init = np.asarray(nets.predict(y), dtype=np.float64)
    check_finite(x_init, "initial prediction")
    rngs = [sample_rng(cfg.seed, i, sample_index) for i in ids]
    return refine(nets, y, x_init, cfg, rngs)


def sample_set(nets: Restorer, y: np.ndarray, cfg: SampleConfig, image_ids: Sequence[int] | None = None,
               same_stream: bool = False) -> np.ndarray:
    """``cfg.n_samples`` restorations per image, shape (n_samples, N, C, H, W).

    The predictor runs once per image; all samples are refined as one batch.
    ``same_stream`` gives every sample the stream of sample 0 (debugging aid).
    """
    y = np.asarray(y)
    n, k = len(y), cfg.n_samples
    ids = list(range(n)) if image_ids is None else list(image_ids)
    x_init = np.asarray(nets.predict(y), dtype=np.float64)
    check_finite(x_init, "initial prediction")
    rngs = [sample_rng(cfg.seed, ids[i], 0 if same_stream else j) for j in range(k) for i in range(n)]
    yy = np.concatenate([y] * k)
    xx = np.concatenate([x_init] * k)
    out = refine(nets, yy, xx, cfg, rngs)
    return out.reshape(k, *y.shape)


def sample_average(nets: Restorer, y: np.ndarray, cfg: SampleConfig,
                   image_ids: Sequence[int] | None = None) -> np.ndarray:
    """Pixel mean of ``cfg.n_samples`` independent samples, clamped to [-1, 1]."""
    return np.clip(sample_set(nets, y, cfg, image_ids).mean(axis=0), -1.0, 1.0)


def _fmt(v: float) -> str:
    return repr(float(v))


def pd_sweep(nets: Restorer, ys: np.ndarray, refs: np.ndarray, out_path=None,
             T_grid: Sequence[int] = DEFAULT_T_GRID, var_grid: Sequence[float] = DEFAULT_VAR_GRID,
             n_avg_grid: Sequence[int] = DEFAULT_NAVG_GRID, seed: int = 0, record_time: bool = True,
             progress=None) -> list[dict]:
    """Distortion/diversity table over (T, var_end, n_avg), rows in lexicographic grid order.

    Samples for a (T, var_end) cell are drawn once, max(n_avg_grid) per
    image; the n_avg row averages the first n_avg of them. Because every
    sample owns the stream (seed, image, sample index), this equals running
    each cell separately. pixel_std_mean is the mean per-pixel std across
    the n_avg samples (nan for n_avg = 1).
    """
    if len(ys) == 0:
        raise ValueError("empty evaluation set")
    rows = []
    k_max = max(n_avg_grid)
    for T in sorted(T_grid):
        for var_end in sorted(var_grid):
            t0 = time.perf_counter()
            cfg = SampleConfig(T=T, var_end=var_end, n_samples=k_max, seed=seed)
            samples = sample_set(nets, ys, cfg)
            shared_ms = (time.perf_counter() - t0) * 1000
            for n_avg in sorted(n_avg_grid):
                t1 = time.perf_counter()
                sub = samples[:n_avg]
                restored = np.clip(sub.mean(axis=0), -1, 1)
                p = [psnr(restored[i], refs[i]) for i in range(len(ys))]
                s = [ssim(restored[i], refs[i]) for i in range(len(ys))]
                std = float(sub.std(axis=0, ddof=1).mean()) if n_avg > 1 else float("nan")
                ms = shared_ms + (time.perf_counter() - t1) * 1000
                rows.append({
                    "T": T, "var_end": var_end, "n_avg": n_avg,
                    "psnr_mean": float(np.mean(p)), "ssim_mean": float(np.mean(s)),
                    "pixel_std_mean": std, "wall_ms": int(round(ms)) if record_time else 0,
                })
            if progress is not None:
                progress(T, var_end)
    if out_path is not None:
        write_sweep_csv(out_path, rows)
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SWEEP_COLUMNS)
    for r in rows:
        wr.writerow([r["T"], _fmt(r["var_end"]), r["n_avg"], _fmt(r["psnr_mean"]),
                     _fmt(r["ssim_mean"]), _fmt(r["pixel_std_mean"]), r["wall_ms"]])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != SWEEP_COLUMNS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        return [
            {"T": int(r["T"]), "var_end": float(r["var_end"]), "n_avg": int(r["n_avg"]),
             "psnr_mean": float(r["psnr_mean"]), "ssim_mean": float(r["ssim_mean"]),
             "pixel_std_mean": float(r["pixel_std_mean"]), "wall_ms": int(r["wall_ms"])}
            for r in rd
        ]
