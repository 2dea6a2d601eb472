"""Noise schedule tables and closed-form diffusion algebra.

Timesteps are 1-based: t runs over 1..T, with the convention alpha_bar(0) = 1
so that t = 0 denotes the clean state.  Tables are precomputed in float64 at
construction; the elementwise operations take scalar coefficients and work
on numpy arrays and torch tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "alpha_bar_prev"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def alpha_bar_prev_at(self, t: int) -> float:
        return float(self.alpha_bar_prev[self._check_t(t) - 1])

    def posterior_sigma_at(self, t: int) -> float:
        """DDPM posterior std: sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)."""
        t = self._check_t(t)
        var = self.beta[t - 1] * (1.0 - self.alpha_bar_prev[t - 1]) / (1.0 - self.alpha_bar[t - 1])
        return float(math.sqrt(var))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, alpha_bar_prev=alpha_bar_prev
    )


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = sched.alpha_bar_at(t)
    if getattr(eps, "shape", None) != getattr(x0, "shape", None):
        raise ValueError("eps must match x0 shape")
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_pred, sched: NoiseSchedule):
    """Clean estimate: (x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)."""
    ab = sched.alpha_bar_at(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def reverse_step(x_t, t: int, eps_pred, z, sched: NoiseSchedule):
    """One ancestral step with the DDPM posterior variance; z must be 0 at t=1."""
    t = sched._check_t(t)
    if z is not None and t == 1:
        z_arr = np.asarray(z) if not hasattr(z, "abs") else z
        nonzero = bool((z_arr != 0).any()) if hasattr(z_arr, "any") else z_arr != 0
        if nonzero:
            raise ValueError("the t=1 reverse step must use z = 0")
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(alpha)
    if z is None:
        return mean
    return mean + sched.posterior_sigma_at(t) * z


@dataclass(frozen=True)
class WeightSchedule:
    """Timestep weight for the anchor loss: (1 - t/T)^p, or a constant."""

    kind: str = "poly"
    p: float = 2.0
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("poly", "const"):
            raise ValueError(f"weight kind must be 'poly' or 'const', got {self.kind!r}")
        if self.kind == "poly" and self.p <= 0:
            raise ValueError(f"poly exponent must be positive, got {self.p}")


def weight(ws: WeightSchedule, t, T: int):
    """Scalar or vectorized anchor-loss weight at timestep t."""
    t_arr = np.asarray(t, dtype=np.float64)
    if (t_arr < 0).any() or (t_arr > T).any():
        raise ValueError(f"timestep {t} outside [0, {T}]")
    if ws.kind == "const":
        out = np.full_like(t_arr, ws.c)
    else:
        out = (1.0 - t_arr / T) ** ws.p
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out
