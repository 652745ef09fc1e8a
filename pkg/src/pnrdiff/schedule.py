"""Noise schedules for the forward diffusion process.

A schedule is stored as per-step ``alphas`` (length T) and cumulative
``alphabars`` (length T + 1, with ``alphabars[0] == 1``).  Everything is kept
in float64: with a first-step variance of 1e-6 a float32 running product over
thousands of steps drifts visibly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INFERENCE_VAR_START = 1e-6

# Inference-time grid searched over T and the final variance.
DEFAULT_T_GRID = (10, 20, 30, 50, 100, 200, 300, 500)
DEFAULT_VAR_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray
    alphabars: np.ndarray
    var_start: float
    var_end: float

    @property
    def T(self) -> int:
        return len(self.alphas)

    def sqrt_alphabar(self, t: int) -> float:
        return float(np.sqrt(self.alphabars[t]))

    def level_intervals(self) -> np.ndarray:
        """Boundaries l_0 = 1 > l_1 > ... > l_T with l_i = sqrt(alphabar_i)."""
        return np.sqrt(self.alphabars)

    def triple(self) -> tuple[int, float, float]:
        return (self.T, self.var_start, self.var_end)


def build_linear_schedule(T: int, var_start: float, var_end: float) -> NoiseSchedule:
    """Linear per-step variance 1 - alpha_t from ``var_start`` (t=1) to ``var_end`` (t=T)."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    for name, v in (("var_start", var_start), ("var_end", var_end)):
        if not 0.0 < v < 1.0:
            raise ScheduleError(f"{name} must lie in (0, 1), got {v!r}")
    if var_start > var_end:
        raise ScheduleError(f"var_start ({var_start}) exceeds var_end ({var_end})")

    if T == 1:
        variances = np.array([var_end], dtype=np.float64)
    else:
        variances = np.linspace(var_start, var_end, T, dtype=np.float64)
    alphas = 1.0 - variances
    alphabars = np.concatenate([[1.0], np.cumprod(alphas)])
    alphas.setflags(write=False)
    alphabars.setflags(write=False)
    return NoiseSchedule(alphas, alphabars, float(var_start), float(var_end))


def build_inference_schedule(T: int, var_end: float) -> NoiseSchedule:
    return build_linear_schedule(T, INFERENCE_VAR_START, var_end)


def training_schedule() -> NoiseSchedule:
    return build_linear_schedule(2000, 1e-6, 0.01)


def posterior_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients of q(x_{t-1} | x_t, x_0).

    Returns ``(coef_x0, coef_xt, beta_t)`` so that the posterior is
    N(coef_x0 * x0 + coef_xt * xt, beta_t).
    """
    if not 1 <= t <= s.T:
        raise IndexError(f"step {t} outside 1..{s.T}")
    a_t = s.alphas[t - 1]
    ab_prev = s.alphabars[t - 1]
    ab_t = s.alphabars[t]
    denom = 1.0 - ab_t
    coef_x0 = np.sqrt(ab_prev) * (1.0 - a_t) / denom
    coef_xt = np.sqrt(a_t) * (1.0 - ab_prev) / denom
    beta = (1.0 - ab_prev) / denom * (1.0 - a_t)
    return float(coef_x0), float(coef_xt), float(max(beta, 0.0))


def sample_continuous_level(
    intervals: np.ndarray,
    rng: np.random.Generator,
    size: int | tuple[int, ...] | None = None,
) -> float | np.ndarray:
    """Draw sqrt(alphabar) from the piecewise-uniform level distribution.

    An interval index k in 1..T is picked uniformly, then the level is drawn
    uniformly between l_k and l_{k-1}.
    """
    intervals = np.asarray(intervals, dtype=np.float64)
    T = len(intervals) - 1
    k = rng.integers(1, T + 1, size=size)
    u = rng.random(size=size)
    lo = intervals[k]
    hi = intervals[k - 1]
    out = lo + u * (hi - lo)
    if size is None:
        return float(out)
    return out


def level_cdf(intervals: np.ndarray, v: np.ndarray) -> np.ndarray:
    """CDF of the piecewise-uniform level distribution, assembled interval by interval."""
    intervals = np.asarray(intervals, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    T = len(intervals) - 1
    cdf = np.zeros_like(v)
    for k in range(1, T + 1):
        lo, hi = intervals[k], intervals[k - 1]
        frac = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        cdf += frac / T
    return cdf
