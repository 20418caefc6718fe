"""Diffusion noise schedules (betas, alphas and their cumulative products)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """β/α/ᾱ tables for t = 1..T, stored 0-indexed (``betas[t-1]`` is β_t)."""

    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return alpha_bar(self, t)

    def alpha_bar_table(self, t) -> np.ndarray:
        """Vectorised ᾱ lookup; ``t`` may contain 0 (ᾱ_0 = 1)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        return np.concatenate([[1.0], self.alpha_bars])[t]

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")


def _from_betas(kind: str, betas: np.ndarray) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(kind, len(betas), betas, alphas, alpha_bars)


def make_schedule(kind: str = "cosine", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a ``linear`` or ``cosine`` schedule with ``T`` steps.

    ``linear`` spaces β uniformly from ``beta_start`` (t=1) to ``beta_end``
    (t=T). ``cosine`` uses ᾱ_t = f(t)/f(0), f(t) = cos²(((t/T + s)/(1 + s))·π/2)
    with s = 0.008 and β_t clipped to 0.999; the β endpoints are unused there.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        if T == 1:
            betas = np.array([beta_start])
        else:
            betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return _from_betas(kind, betas)
    if kind == "cosine":
        def f(t):
            return math.cos(((t / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * math.pi / 2.0) ** 2

        f0 = f(0)
        abar = [f(t) / f0 for t in range(T + 1)]
        betas = np.array([min(1.0 - abar[t] / abar[t - 1], MAX_BETA) for t in range(1, T + 1)])
        return _from_betas(kind, betas)
    raise ValueError(f"unknown schedule kind {kind!r}")


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    """ᾱ_t; t = 0 returns the empty product 1.0."""
    if t == 0:
        return 1.0
    schedule._check(t)
    return float(schedule.alpha_bars[t - 1])
