"""Diffusion-process mathematics: schedule, forward noising, true reverse posterior.

Every function here works on numpy arrays and torch tensors alike; step
indices may be a scalar or an integer array (one step per batch element,
broadcast over the trailing image dimensions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Tuple, Union

import numpy as np
import torch

from dosediff.core.errors import ArgumentError, ConfigurationError
from dosediff.models.schemas.configs import ScheduleKind

Grid = Union[np.ndarray, torch.Tensor]
Step = Union[int, np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed double-precision schedule over T steps.

    The `*_ext` tables have T + 1 entries indexed directly by t, with the
    alpha_bar_0 = 1 convention at index 0 (so beta_tilde_1 = 0).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "beta_tilde"):
            getattr(self, name).setflags(write=False)

    @property
    def beta_ext(self) -> np.ndarray:
        return np.concatenate([[0.0], self.beta])

    @property
    def alpha_ext(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha])

    @property
    def alpha_bar_ext(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar])

    @property
    def beta_tilde_ext(self) -> np.ndarray:
        return np.concatenate([[0.0], self.beta_tilde])

    def alpha_bar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def check_step(self, t: Step, lower: int = 1) -> None:
        arr = _as_index_array(t)
        if arr.size and (arr.min() < lower or arr.max() > self.T):
            raise ArgumentError(f"step index must lie in [{lower}, {self.T}], got {arr.min()}..{arr.max()}")


def build_schedule(
    kind: Union[str, ScheduleKind] = ScheduleKind.LINEAR,
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    try:
        kind = ScheduleKind(kind)
    except ValueError as e:
        raise ConfigurationError(f"unknown schedule kind {kind!r}") from e
    if T < 1:
        raise ConfigurationError(f"schedule length T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def _as_index_array(t: Step) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.int64)


def coef(table: np.ndarray, t: Step, like: Grid) -> Any:
    """Gather table[t]; scalar t gives a float, array t a broadcastable column."""
    return as_column(table[_as_index_array(t)], like)


def as_column(values: np.ndarray, like: Grid) -> Any:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    values = values.reshape((-1,) + (1,) * (like.ndim - 1))
    if torch.is_tensor(like):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def xp(x: Grid):
    return torch if torch.is_tensor(x) else np


def check_shapes(*grids: Grid) -> None:
    shapes = {tuple(g.shape) for g in grids}
    if len(shapes) > 1:
        raise ArgumentError(f"shape mismatch: {sorted(shapes)}")


def forward_step(schedule: NoiseSchedule, x_prev: Grid, t: Step, noise: Grid) -> Grid:
    """One forward kernel step q(x_t | x_{t-1})."""
    schedule.check_step(t)
    check_shapes(x_prev, noise)
    beta = coef(schedule.beta_ext, t, x_prev)
    return (1.0 - beta) ** 0.5 * x_prev + beta ** 0.5 * noise


def q_sample(schedule: NoiseSchedule, x0: Grid, t: Step, eps: Grid) -> Grid:
    """Closed-form noising to any step t."""
    schedule.check_step(t)
    check_shapes(x0, eps)
    ab = coef(schedule.alpha_bar_ext, t, x0)
    return ab ** 0.5 * x0 + (1.0 - ab) ** 0.5 * eps


def posterior_params(schedule: NoiseSchedule, x0: Grid, x_t: Grid, t: Step) -> Tuple[Grid, Any]:
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    if np.any(_as_index_array(t) == 0):
        raise ArgumentError("posterior is undefined at t = 0")
    schedule.check_step(t)
    check_shapes(x0, x_t)
    alpha = coef(schedule.alpha_ext, t, x_t)
    ab = coef(schedule.alpha_bar_ext, t, x_t)
    ab_prev = coef(schedule.alpha_bar_ext, _as_index_array(t) - 1, x_t)
    mean = (alpha ** 0.5 * (1.0 - ab_prev) * x_t + ab_prev ** 0.5 * (1.0 - alpha) * x0) / (1.0 - ab)
    variance = coef(schedule.beta_tilde_ext, t, x_t)
    return mean, variance
