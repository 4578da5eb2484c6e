"""Linear variance schedule and the exact conversions between x0, eps and v.

Timesteps are 1-indexed: ``t`` runs over 1..T, and array slot ``t - 1``
holds the values for step ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t.astype(np.int64)

    def sqrt_ab(self, t) -> np.ndarray:
        """sqrt(alpha_bar_t); ``t`` may be an int or an int array."""
        return np.sqrt(self.alpha_bar[self._check_t(t) - 1])

    def sigma_at(self, t) -> np.ndarray:
        return self.sigma[self._check_t(t) - 1]


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    beta = beta_start + frac * (beta_end - beta_start)
    beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _coeffs(sched: NoiseSchedule, t, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    """(sqrt(ab_t), sqrt(1 - ab_t)) shaped to broadcast against a batch of rank ``ndim``.

    A scalar ``t`` applies to everything; an array ``t`` is one step per leading item.
    """
    a = sched.sqrt_ab(t)
    s = sched.sigma_at(t)
    if np.ndim(t):
        shape = (-1,) + (1,) * (ndim - 1)
        a, s = a.reshape(shape), s.reshape(shape)
    return a, s


def _pair(x: np.ndarray, y: np.ndarray) -> None:
    if np.shape(x) != np.shape(y):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def diffuse(sched: NoiseSchedule, x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    _pair(x0, eps)
    a, s = _coeffs(sched, t, np.ndim(x0))
    return a * x0 + s * eps


def v_target(sched: NoiseSchedule, x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    _pair(x0, eps)
    a, s = _coeffs(sched, t, np.ndim(x0))
    return a * eps - s * x0


def recover_x0(sched: NoiseSchedule, x_t: np.ndarray, v: np.ndarray, t) -> np.ndarray:
    _pair(x_t, v)
    a, s = _coeffs(sched, t, np.ndim(x_t))
    return a * x_t - s * v


def recover_eps(sched: NoiseSchedule, x_t: np.ndarray, v: np.ndarray, t) -> np.ndarray:
    _pair(x_t, v)
    a, s = _coeffs(sched, t, np.ndim(x_t))
    return s * x_t + a * v


def v_from_eps(sched: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """Inverse of ``recover_eps`` at fixed (x_t, t)."""
    _pair(x_t, eps)
    a, s = _coeffs(sched, t, np.ndim(x_t))
    return (eps - s * x_t) / a
