"""Forward diffusion process: variance schedule and closed-form noising.

Timestep convention: t runs 1..T inclusive; alpha_bar(0) == 1 so the final
sampler step can target t_prev = 0 uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add, mul, sub, clamp


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step beta/alpha/alpha_bar tables, index 0 holds t = 1."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        """alpha_bar at integer t, with abar(0) == 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside 0..{self.T}")
        return float(self.alpha_bar[t - 1])

    def abar_vec(self, t: np.ndarray) -> np.ndarray:
        """Vectorized abar for integer arrays (values in 0..T)."""
        t = np.asarray(t)
        if np.any((t < 0) | (t > self.T)):
            raise ScheduleError(f"t values outside 0..{self.T}")
        table = np.concatenate([[1.0], self.alpha_bar]).astype(np.float64)
        return table[t]


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Linearly spaced betas; computed in float64, stored float32."""
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta32 = beta.astype(np.float32)
    alpha32 = alpha.astype(np.float32)
    abar32 = alpha_bar.astype(np.float32)
    if np.any(abar32 <= 0.0) or np.any(abar32 >= 1.0):
        raise ScheduleError("alpha_bar left (0, 1); schedule too long or betas too large")
    if T > 1 and not np.all(np.diff(abar32) < 0.0):
        raise ScheduleError("alpha_bar not strictly decreasing after float32 cast")
    return VarianceSchedule(T=T, beta_start=float(beta_start), beta_end=float(beta_end),
                            beta=beta32, alpha=alpha32, alpha_bar=abar32)


@dataclass
class NoisedSample:
    """A forward-process draw: x_t together with its t and the noise used."""

    x_t: Tensor
    t: np.ndarray
    eps: Tensor


def _coeffs(s: VarianceSchedule, t) -> tuple[np.ndarray, np.ndarray]:
    """(sqrt(abar_t), sqrt(1 - abar_t)) shaped to broadcast over NCHW."""
    if np.isscalar(t) or np.ndim(t) == 0:
        ab = s.abar(int(t))
        c1 = np.float32(np.sqrt(ab))
        c2 = np.float32(np.sqrt(1.0 - ab))
        return c1, c2
    ab = s.abar_vec(np.asarray(t))
    c1 = np.sqrt(ab).astype(np.float32)[:, None, None, None]
    c2 = np.sqrt(1.0 - ab).astype(np.float32)[:, None, None, None]
    return c1, c2


def forward_noise(x0: Tensor, t, eps: Tensor, s: VarianceSchedule) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    c1, c2 = _coeffs(s, t)
    return add(mul(x0, c1), mul(eps, c2))


def predict_x0(x_t: Tensor, eps_pred: Tensor, t, s: VarianceSchedule) -> Tensor:
    """Invert the forward process: x0' = (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    if x_t.shape != eps_pred.shape:
        raise ShapeError(f"predict_x0: x_t {x_t.shape} vs eps {eps_pred.shape}")
    c1, c2 = _coeffs(s, t)
    from .tensor import div
    return div(sub(x_t, mul(eps_pred, c2)), c1)


def static_threshold(x: Tensor) -> Tensor:
    """Clamp a predicted clean image to the data range [-1, 1]."""
    return clamp(x, -1.0, 1.0)
