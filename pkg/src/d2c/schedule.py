"""Noise-level series and the closed-form Gaussian diffusion formulas.

Noise levels follow the convention ``x(alpha) = sqrt(alpha) * x + sqrt(1 - alpha) * eps``:
``alpha = 1`` is clean data and ``alpha -> 0`` is pure noise. A schedule is the
strictly decreasing series ``alpha_0 = 1 > alpha_1 > ... > alpha_T > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSchedule, InvalidParameter, ShapeMismatch


class _ScheduleError(InvalidParameter):
    component = "schedule"


@dataclass(frozen=True)
class AlphaSchedule:
    alphas: np.ndarray

    def __post_init__(self):
        a = np.array(self.alphas, dtype=np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or a.size < 2:
            raise _ScheduleError("schedule needs at least two levels")
        if a[0] != 1.0:
            raise _ScheduleError(f"alpha_0 must be exactly 1, got {a[0]!r}")
        if not np.all(np.diff(a) < 0):
            raise _ScheduleError("alphas must be strictly decreasing")
        if not a[-1] > 0:
            raise _ScheduleError("alpha_T must be positive")

    @property
    def T(self) -> int:
        return self.alphas.size - 1

    @property
    def alpha_min(self) -> float:
        return float(self.alphas[-1])

    def __len__(self) -> int:
        return self.alphas.size

    def __getitem__(self, t: int) -> float:
        return float(self.alphas[t])


@dataclass(frozen=True)
class WeightFunction:
    """Per-step loss weights ``w(alpha_t)`` for ``t = 1..T`` (index 0 is ``t = 1``)."""

    weights: np.ndarray
    kind: str

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.kind not in ("uniform", "variational"):
            raise _ScheduleError(f"unknown weight kind {self.kind!r}")
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise _ScheduleError("weights must be finite and strictly positive")

    def __len__(self) -> int:
        return self.weights.size

    def __call__(self, t) -> np.ndarray:
        """Weight for 1-based step index ``t`` (scalar or array)."""
        return self.weights[np.asarray(t) - 1]


def make_cumulative_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> AlphaSchedule:
    """Cumulative product of ``1 - beta`` over a linear beta ramp, with ``alpha_0 = 1``."""
    if T < 1 or not (0 < beta_min <= beta_max < 1):
        raise _ScheduleError(f"need T >= 1 and 0 < beta_min <= beta_max < 1, got {T}, {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T)
    return AlphaSchedule(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))


def subsample(schedule: AlphaSchedule, S: int) -> AlphaSchedule:
    """Keep ``S + 1`` evenly index-spaced levels, always including both endpoints."""
    if not 1 <= S <= schedule.T:
        raise _ScheduleError(f"step count {S} outside [1, {schedule.T}]")
    idx = np.round(np.linspace(0, schedule.T, S + 1)).astype(int)
    return AlphaSchedule(schedule.alphas[idx])


def uniform_weights(schedule: AlphaSchedule) -> WeightFunction:
    return WeightFunction(np.ones(schedule.T), "uniform")


def variational_weights(schedule: AlphaSchedule, d: int) -> WeightFunction:
    """Weights that turn the diffusion loss into a variational bound.

    For ``t >= 2``: ``(1 - a_t) a_{t-1} / (2 (1 - a_{t-1})^2 a_t)``; for ``t = 1``:
    ``(1 - a_1) / (2 (2 pi)^d a_1)``.
    """
    if d < 1:
        raise _ScheduleError("dimensionality must be >= 1")
    a = schedule.alphas
    if np.any(a[1:-1] == 1.0):
        raise DegenerateSchedule("alpha_{t-1} = 1 for some t >= 2")
    w = np.empty(schedule.T)
    w[0] = (1.0 - a[1]) / (2.0 * (2.0 * math.pi) ** d * a[1])
    at, ap = a[2:], a[1:-1]
    w[1:] = (1.0 - at) * ap / (2.0 * (1.0 - ap) ** 2 * at)
    return WeightFunction(w, "variational")


def forward_noise(x0, alpha: float, eps) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(alpha > 1):
        raise _ScheduleError("alpha must lie in (0, 1]")
    return np.sqrt(alpha) * x0 + np.sqrt(1.0 - alpha) * eps


def posterior_params(x_t, x0, alpha_t: float, alpha_prev: float) -> tuple[np.ndarray, float]:
    """Mean and variance of ``x(alpha_prev)`` given ``x(alpha_t)`` and the clean ``x0``.

    Obtained by conditioning the joint Gaussian of ``(x(alpha_prev), x(alpha_t))``
    given ``x0``: the mean is ``c0 * x0 + ct * x_t`` with
    ``ct = sqrt(a_t / a_p) (1 - a_p) / (1 - a_t)`` and
    ``c0 = (a_p - a_t) / (sqrt(a_p) (1 - a_t))``.
    """
    if not (0 < alpha_t <= 1 and 0 < alpha_prev <= 1):
        raise _ScheduleError("levels must lie in (0, 1]")
    if alpha_prev < alpha_t:
        raise _ScheduleError(f"alpha_prev={alpha_prev} must be >= alpha_t={alpha_t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if alpha_prev == alpha_t:
        return x_t.copy(), 0.0
    ct = math.sqrt(alpha_t / alpha_prev) * (1.0 - alpha_prev) / (1.0 - alpha_t)
    c0 = (alpha_prev - alpha_t) / (math.sqrt(alpha_prev) * (1.0 - alpha_t))
    var = (1.0 - alpha_prev) / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev)
    return c0 * x0 + ct * x_t, var
