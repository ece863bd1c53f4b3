"""Joint objective: weighted noise regression plus soft-dice segmentation.

All functions take torch tensors and are differentiable.  Masks are laid out
as ``(..., 4, H, W)`` with sessions ordered s1, s2, s3, f.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .schedule import ScheduleTable


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    k_l: int = 11
    filter_init: float = 0.1
    # "sum" adds squared residuals over C x H x W; "mean" divides by that count
    reduction: str = "sum"

    def validate(self) -> None:
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction", f"must be 'sum' or 'mean', got {self.reduction!r}")
        if self.lam < 0:
            raise ConfigError("lambda", f"must be >= 0, got {self.lam}")
        if self.k_l < 1 or self.k_l % 2 == 0:
            raise ConfigError("k_l", f"must be an odd positive integer, got {self.k_l}")


def _check(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``1 - 2|pred*gt| / (|pred| + |gt|)`` over the last two axes; 0 when both are empty."""
    _check(pred, gt, "dice_loss")
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = pred.abs().sum(dim=(-2, -1)) + gt.abs().sum(dim=(-2, -1))
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, 1.0 - 2.0 * inter / safe, torch.zeros_like(denom))


def _sqrt_alpha_bar(t, table: ScheduleTable, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.numel() and (t.min() < 1 or t.max() > table.T):
        raise ValueError(f"step outside [1, {table.T}]: {t.tolist()}")
    ab = torch.tensor(table.alpha_bar, dtype=like.dtype)
    return ab[t.long() - 1].sqrt()


def seg_loss(pred_masks, gt_masks, t, table: ScheduleTable) -> torch.Tensor:
    """Mean source dice plus the target dice scaled by sqrt(alpha_bar_t)."""
    _check(pred_masks, gt_masks, "seg_loss")
    d = dice_loss(pred_masks, gt_masks)  # (..., 4)
    return d[..., :3].mean(dim=-1) + _sqrt_alpha_bar(t, table, d) * d[..., 3]


def weight_map(gt_masks: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Spatial weights emphasising pixels the tumour touched in some sessions.

    ``m = sum_sessions(gt)``; ``w = (m * exp(-m)) (*) box(k_l, filter_init) + 1``
    with zero padding and same-size output.
    """
    cfg.validate()
    m = gt_masks.sum(dim=-3)
    lead = m.shape[:-2]
    v = (m * torch.exp(-m)).reshape(-1, 1, *m.shape[-2:])
    kernel = torch.full((1, 1, cfg.k_l, cfg.k_l), cfg.filter_init, dtype=v.dtype)
    w = F.conv2d(v, kernel, padding=cfg.k_l // 2) + 1.0
    return w.reshape(*lead, *m.shape[-2:])


def joint_loss(eps, eps_hat, pred_masks, gt_masks, t, table: ScheduleTable,
               cfg: LossConfig = LossConfig(), omega: torch.Tensor | None = None):
    """Per-episode ``(total, weighted_mse, seg)``.

    ``weighted_mse = sum((omega * (eps - eps_hat))**2)`` with omega broadcast over
    the noise channels (divided by the element count when ``cfg.reduction`` is
    ``"mean"``); ``total = weighted_mse + lam * seg``.  ``pred_masks`` are
    probabilities in [0, 1].
    """
    _check(eps, eps_hat, "joint_loss")
    if omega is None:
        omega = weight_map(gt_masks, cfg)
    r = omega.unsqueeze(-3) * (eps - eps_hat)
    wmse = (r * r).sum(dim=(-3, -2, -1))
    if cfg.reduction == "mean":
        wmse = wmse / r.shape[-3:].numel()
    seg = seg_loss(pred_masks, gt_masks, t, table)
    return wmse + cfg.lam * seg, wmse, seg
