"""Forward marginal, epsilon/x0 conversions, reverse step and training losses.

All functions are pure; callers supply noise so that determinism stays in
their hands.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule, posterior_coeffs

# Below this alphabar the eps -> x0 inversion divides by something tiny.
ALPHABAR_FLOOR = 1e-8


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def forward_marginal_sample(x0: np.ndarray, alphabar, eps: np.ndarray) -> np.ndarray:
    """sqrt(ab) * x0 + sqrt(1 - ab) * eps.

    ``alphabar`` may be a scalar or an array broadcastable against ``x0``
    (e.g. shape (N, 1, 1, 1) for one level per example).
    """
    _check_same_shape(x0, eps)
    ab = np.asarray(alphabar, dtype=np.float64)
    if np.any(ab <= 0) or np.any(ab > 1):
        raise ValueError("alphabar must lie in (0, 1]")
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0_from_eps(xt: np.ndarray, eps_hat: np.ndarray, alphabar) -> np.ndarray:
    _check_same_shape(xt, eps_hat)
    ab = np.asarray(alphabar, dtype=np.float64)
    if np.any(ab < ALPHABAR_FLOOR) or np.any(ab > 1):
        raise ValueError(f"alphabar {alphabar!r} below conditioning floor {ALPHABAR_FLOOR}")
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def reverse_step(
    xt: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    s: NoiseSchedule,
    noise: np.ndarray,
) -> np.ndarray:
    """Draw x_{t-1} from q(x_{t-1} | x_t, x0_hat) using the supplied standard noise.

    The posterior variance beta_t is a variance, so the noise is scaled by
    sqrt(beta_t).
    """
    _check_same_shape(xt, x0_hat)
    _check_same_shape(xt, noise)
    coef_x0, coef_xt, beta = posterior_coeffs(s, t)
    out = coef_x0 * x0_hat + coef_xt * xt
    if beta > 0:
        out = out + np.sqrt(beta) * noise
    return out


def reverse_step_from_eps(
    xt: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    s: NoiseSchedule,
    noise: np.ndarray,
) -> np.ndarray:
    """Same draw as ``reverse_step`` with x0_hat = predict_x0_from_eps(xt, eps_hat, alphabar_t).

    Uses the eps form of the posterior mean,
    (x_t - (1 - alpha_t) / sqrt(1 - alphabar_t) * eps_hat) / sqrt(alpha_t),
    which stays well conditioned when alphabar_t underflows the floor.
    """
    _check_same_shape(xt, eps_hat)
    _check_same_shape(xt, noise)
    _, _, beta = posterior_coeffs(s, t)
    a, ab = s.alphas[t - 1], s.alphabars[t]
    out = (xt - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if beta > 0:
        out = out + np.sqrt(beta) * noise
    return out


def base_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean absolute error between the injected and the predicted noise."""
    _check_same_shape(eps, eps_hat)
    # np.mean reduces with pairwise summation
    return float(np.mean(np.abs(np.asarray(eps) - np.asarray(eps_hat))))


def base_loss_grad(eps: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    """d base_loss / d eps_hat (sign convention: subgradient 0 at ties)."""
    _check_same_shape(eps, eps_hat)
    return -np.sign(eps - eps_hat) / eps.size


def residual_target(x0: np.ndarray, x_init: np.ndarray) -> np.ndarray:
    _check_same_shape(x0, x_init)
    return x0 - x_init
