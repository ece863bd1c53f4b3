"""Ancestral sampling with mask fusion over the final steps, plus ensembles.

A *denoiser* is any callable ``(x_in, treatments, days, t) -> (eps_hat, masks)``
where ``x_in`` is ``(B, 4C, H, W)``, ``treatments``/``days`` are ``(B, 4)``
integer tensors and ``t`` is a ``(B,)`` step tensor.  :class:`NetDenoiser`
adapts a trained :class:`~tadiff.denoiser.TaDiffNet`.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import TaDiffNet, pairs_to_tensors
from .diffusion import posterior_mean_from_eps
from .errors import ConfigError, ContractError, ShapeError
from .schedule import ScheduleTable, mask_fusion_weights


@dataclass(frozen=True)
class SamplerConfig:
    T_m: int = 10
    ensembles: int = 5
    seed: int = 0

    def validate(self, T: int | None = None) -> None:
        if self.T_m < 1 or (T is not None and self.T_m > T):
            raise ConfigError("T_m", f"must lie in [1, {T}], got {self.T_m}")
        if self.ensembles < 1:
            raise ConfigError("ensembles", f"must be >= 1, got {self.ensembles}")


@dataclass
class SampleResult:
    generated: torch.Tensor  # (B, C, H, W) or (C, H, W)
    masks: torch.Tensor  # (B, 4, H, W) or (4, H, W)
    trajectory_meta: dict = field(default_factory=dict)


@dataclass
class UncertaintyMaps:
    image_mean: torch.Tensor
    image_std: torch.Tensor
    mask_mean: torch.Tensor
    mask_std: torch.Tensor
    seeds: list[int] = field(default_factory=list)


class NetDenoiser:
    def __init__(self, net: TaDiffNet):
        self.net = net.eval()

    def __call__(self, x_in, treatments, days, t):
        with torch.no_grad():
            out = self.net(x_in, treatments, days, t)
        return out.eps_hat, out.mask_logits


def reverse_step(x_t, eps_hat, t: int, table: ScheduleTable, z=None):
    """One ancestral step: posterior mean plus sqrt(beta_tilde_t) z. ``z`` must be zero at t = 1."""
    mean = posterior_mean_from_eps(x_t, eps_hat, t, table)
    if z is None:
        return mean
    if int(t) == 1:
        nonzero = bool(torch.any(z != 0)) if torch.is_tensor(z) else bool(np.any(np.asarray(z) != 0))
        if nonzero:
            raise ContractError("reverse_step: z must be zero at t = 1")
        return mean
    return mean + math.sqrt(table.coefficients(t)["beta_tilde"]) * z


def child_seed(master: int, k: int) -> int:
    """Stable per-member seed derived from ``(master, k)``."""
    return int(np.random.SeedSequence([int(master) & (2**64 - 1), int(k)]).generate_state(1, np.uint64)[0])


def sample(sources, pairs, denoiser, cfg: SamplerConfig, table: ScheduleTable,
           squash_masks: bool = True) -> SampleResult:
    """Run the reverse chain t = T..1 and fuse masks over t <= T_m.

    ``sources`` is ``(3C, H, W)`` for one run or ``(B, 3C, H, W)`` for ``B``
    independent runs drawn from one generator.  ``pairs`` are the four
    treatment-day pairs (s1, s2, s3, f), shared by every run, or one such
    list per run.  With
    ``squash_masks`` the denoiser's mask output passes through a sigmoid
    before fusion.
    """
    cfg.validate(table.T)
    src = torch.as_tensor(sources)
    single = src.ndim == 3
    if single:
        src = src[None]
    if src.ndim != 4 or src.shape[1] % 3:
        raise ShapeError(f"sources must be (3C, H, W) or (B, 3C, H, W), got {tuple(src.shape)}")
    B, C3, H, W = src.shape
    C = C3 // 3
    if not src.is_floating_point():
        src = src.float()
    pairs = list(pairs)
    if pairs and isinstance(pairs[0], (list, tuple)):
        if len(pairs) != B:
            raise ValueError(f"got {len(pairs)} pair lists for {B} runs")
        per_run = [pairs_to_tensors(p) for p in pairs]
        treatments = torch.cat([p[0] for p in per_run])
        days = torch.cat([p[1] for p in per_run])
    else:
        treatments, days = pairs_to_tensors(pairs, B)
    weights = mask_fusion_weights(table, cfg.T_m)

    g = torch.Generator().manual_seed(int(cfg.seed) & (2**63 - 1))
    x = torch.randn((B, C, H, W), generator=g, dtype=src.dtype)
    fused = None
    for t in range(table.T, 0, -1):
        z = torch.randn((B, C, H, W), generator=g, dtype=src.dtype) if t > 1 else None
        t_vec = torch.full((B,), t, dtype=torch.long)
        eps_hat, m = denoiser(torch.cat([src, x], dim=1), treatments, days, t_vec)
        if eps_hat.shape != x.shape:
            raise ShapeError(f"denoiser returned eps of shape {tuple(eps_hat.shape)}, expected {tuple(x.shape)}")
        x = reverse_step(x, eps_hat, t, table, z)
        if t <= cfg.T_m:
            m = torch.sigmoid(m) if squash_masks else m
            term = float(weights[t - 1]) * m.to(src.dtype)
            fused = term if fused is None else fused + term
    meta = {"steps": table.T, "T_m": cfg.T_m, "seed": int(cfg.seed), "runs": B}
    if single:
        return SampleResult(x[0], fused[0], meta)
    return SampleResult(x, fused, meta)


def _population_std(stack: torch.Tensor) -> torch.Tensor:
    s = stack.to(torch.float64)
    return (s - s.mean(0)).square().mean(0).sqrt()


def ensemble(sources, pairs, denoiser, cfg: SamplerConfig, table: ScheduleTable,
             workers: int = 1, squash_masks: bool = True, on_member=None) -> UncertaintyMaps:
    """K independent chains with per-member seeds; mean and population std maps.

    Members only differ in their seed, so running them on ``workers`` threads
    gives exactly the serial result.  ``on_member`` receives each member's
    :class:`SampleResult` in seed order.
    """
    cfg.validate(table.T)
    seeds = [child_seed(cfg.seed, k) for k in range(cfg.ensembles)]

    def run(seed):
        member = SamplerConfig(T_m=cfg.T_m, ensembles=1, seed=seed)
        return sample(sources, pairs, denoiser, member, table, squash_masks=squash_masks)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    if on_member is not None:
        for r in results:
            on_member(r)
    return summarize([r.generated for r in results], [r.masks for r in results], seeds)


def summarize(images, masks, seeds=()) -> UncertaintyMaps:
    imgs = torch.stack([torch.as_tensor(i) for i in images])
    msks = torch.stack([torch.as_tensor(m) for m in masks])
    return UncertaintyMaps(
        image_mean=imgs.to(torch.float64).mean(0),
        image_std=_population_std(imgs),
        mask_mean=msks.to(torch.float64).mean(0),
        mask_std=_population_std(msks),
        seeds=list(seeds),
    )
