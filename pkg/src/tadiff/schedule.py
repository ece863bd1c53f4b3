"""Linear variance schedule and the coefficient tables derived from it.

Steps are 1-based: ``table.beta_at(t)`` for t in [1, T].  Arrays are stored
0-based, so ``table.alpha_bar[t - 1]`` is the cumulative product up to t.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 600
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ConfigError("T", f"must be a positive integer, got {self.T!r}")
        if not 0.0 < self.beta_start < 1.0:
            raise ConfigError("beta_start", f"must lie in (0, 1), got {self.beta_start!r}")
        if not 0.0 < self.beta_end < 1.0:
            raise ConfigError("beta_end", f"must lie in (0, 1), got {self.beta_end!r}")
        if self.beta_end < self.beta_start:
            raise ConfigError("beta_end", "must be >= beta_start")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ScheduleTable:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    # alpha_bar shifted right by one, with alpha_bar_0 = 1
    alpha_bar_prev: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return t

    def coefficients(self, t: int) -> dict[str, float]:
        """All scalar coefficients for step ``t`` as Python floats."""
        i = self.check_step(t) - 1
        return {
            "beta": float(self.beta[i]),
            "alpha": float(self.alpha[i]),
            "alpha_bar": float(self.alpha_bar[i]),
            "alpha_bar_prev": float(self.alpha_bar_prev[i]),
            "beta_tilde": float(self.beta_tilde[i]),
        }


def build_schedule(cfg: ScheduleConfig | None = None) -> ScheduleTable:
    cfg = cfg or ScheduleConfig()
    cfg.validate()
    T = int(cfg.T)
    if T == 1:
        beta = np.array([cfg.beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64)
        beta = cfg.beta_start + steps * ((cfg.beta_end - cfg.beta_start) / (T - 1))
        beta[-1] = cfg.beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return ScheduleTable(
        beta=_frozen(beta),
        alpha=_frozen(alpha),
        alpha_bar=_frozen(alpha_bar),
        beta_tilde=_frozen(beta_tilde),
        alpha_bar_prev=_frozen(alpha_bar_prev),
    )


def mask_fusion_gamma(table: ScheduleTable, T_m: int) -> float:
    """Normaliser for the mask fusion weights: sum of alpha_bar over t = 1..T_m."""
    if not 1 <= int(T_m) <= table.T:
        raise ValueError(f"T_m must lie in [1, {table.T}], got {T_m}")
    return float(np.sum(table.alpha_bar[: int(T_m)]))


def mask_fusion_weights(table: ScheduleTable, T_m: int) -> np.ndarray:
    """Per-step fusion weights alpha_bar_t / gamma for t = 1..T_m (index 0 is t=1)."""
    gamma = mask_fusion_gamma(table, T_m)
    return table.alpha_bar[: int(T_m)] / gamma
