"""Closed-form forward noising and posterior statistics.

Every function accepts numpy arrays or torch tensors (anything supporting
elementwise arithmetic) and returns the same kind.  ``t`` is a 1-based step.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .schedule import ScheduleTable


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def noise_like(shape, seed: int, dtype=np.float64) -> np.ndarray:
    """Standard normal draw of ``shape``; identical seed gives identical values."""
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype, copy=False)


def forward_sample(x0, t: int, eps, table: ScheduleTable):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps, "forward_sample")
    ab = table.coefficients(t)["alpha_bar"]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def recover_x0(x_t, eps, t: int, table: ScheduleTable):
    _same_shape(x_t, eps, "recover_x0")
    ab = table.coefficients(t)["alpha_bar"]
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def posterior_mean_from_x0(x_t, x0, t: int, table: ScheduleTable):
    """Mean of q(x_{t-1} | x_t, x0)."""
    _same_shape(x_t, x0, "posterior_mean_from_x0")
    c = table.coefficients(t)
    if c["alpha_bar_prev"] == 1.0:
        # t = 1: the x_t coefficient vanishes and the x0 coefficient is exactly 1
        return 1.0 * x0 + 0.0 * x_t
    denom = 1.0 - c["alpha_bar"]
    coef_x0 = math.sqrt(c["alpha_bar_prev"]) * c["beta"] / denom
    coef_xt = math.sqrt(c["alpha"]) * (1.0 - c["alpha_bar_prev"]) / denom
    return coef_x0 * x0 + coef_xt * x_t


def posterior_mean_from_eps(x_t, eps_hat, t: int, table: ScheduleTable):
    """Same posterior mean, parameterised by a noise estimate instead of x0."""
    _same_shape(x_t, eps_hat, "posterior_mean_from_eps")
    c = table.coefficients(t)
    coef_eps = (1.0 - c["alpha"]) / math.sqrt(1.0 - c["alpha_bar"])
    return (x_t - coef_eps * eps_hat) / math.sqrt(c["alpha"])


def simple_mse_objective(eps, eps_hat) -> float:
    """Sum of squared residuals, accumulated in double precision."""
    _same_shape(eps, eps_hat, "simple_mse_objective")
    r = np.asarray(eps, dtype=np.float64) - np.asarray(eps_hat, dtype=np.float64)
    return float(np.sum(r * r))
