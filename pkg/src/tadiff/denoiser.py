"""Treatment-aware conditional U-Net.

Input is the three source images stacked with the noisy target along the
channel axis (``4C x H x W``).  Conditioning comes from four
(treatment, day) pairs and the diffusion step:

* each pair is embedded as ``treat_mlp(table[tau]) + day_mlp(sin(day))``;
* the three source vectors are subtracted from the target vector;
* the target vector plus the step embedding forms ``mid``;
* ``full = [diff_1, diff_2, diff_3, mid]`` is projected into every block
  except the bottleneck, which only sees ``mid``.

The head emits ``C`` noise channels followed by 4 mask logit channels
(sources s1, s2, s3 then the target).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, StateError, VocabularyError

N_SESSIONS = 4  # s1, s2, s3, f


@dataclass(frozen=True)
class TreatmentDayPair:
    treatment: int
    day: int

    def __post_init__(self):
        if self.treatment not in (1, 2):
            raise VocabularyError(f"unknown treatment code {self.treatment!r}; expected 1 (CRT) or 2 (TMZ)")
        if int(self.day) < 0:
            raise ValueError(f"day must be >= 0, got {self.day}")


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_level: int = 2
    embed_dim: int = 64
    groups: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError("channels", "must be >= 1")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError("widths", f"need at least two positive widths, got {self.widths}")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level", "must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError("embed_dim", f"must be a positive even integer, got {self.embed_dim}")
        if self.groups < 1:
            raise ConfigError("groups", "must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor
    mask_logits: torch.Tensor


def _frequencies(E: int) -> np.ndarray:
    half = E // 2
    if half == 1:
        return np.ones(1)
    return 10000.0 ** (np.arange(half) / (half - 1))


def sinusoidal_embed(value, E: int) -> np.ndarray:
    """``[sin(v / w_i)..., cos(v / w_i)...]`` with w_i geometric in [1, 1e4]."""
    if E < 2 or E % 2:
        raise ConfigError("embed_dim", f"sinusoidal width must be even, got {E}")
    arg = float(value) / _frequencies(E)
    return np.concatenate([np.sin(arg), np.cos(arg)])


def sinusoidal_embed_torch(values: torch.Tensor, E: int, dtype=torch.float32) -> torch.Tensor:
    if E < 2 or E % 2:
        raise ConfigError("embed_dim", f"sinusoidal width must be even, got {E}")
    inv = torch.as_tensor(1.0 / _frequencies(E), dtype=torch.float64)
    arg = values.to(torch.float64)[..., None] * inv
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1).to(dtype)


class ConvBlock(nn.Module):
    """conv3x3 -> GroupNorm -> + affine(cond) -> SiLU."""

    def __init__(self, cin: int, cout: int, cond_dim: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        g = math.gcd(groups, cout)
        self.norm = nn.GroupNorm(g, cout)
        self.proj = nn.Linear(cond_dim, cout)

    def preactivation(self, x, cond):
        h = self.norm(self.conv(x))
        return h + self.proj(cond)[:, :, None, None]

    def forward(self, x, cond):
        return F.silu(self.preactivation(x, cond))


class TaDiffNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        cfg.validate()
        self.cfg = cfg
        E, C, W = cfg.embed_dim, cfg.channels, cfg.widths
        full_dim = 4 * E

        self.treat_table = nn.Embedding(2, E)
        self.treat_mlp = nn.Linear(E, E)
        self.day_mlp = nn.Linear(E, E)
        self.time_mlp = nn.Linear(E, E)

        def level(cin, cout, cond_dim):
            blocks = [ConvBlock(cin, cout, cond_dim, cfg.groups)]
            blocks += [ConvBlock(cout, cout, cond_dim, cfg.groups) for _ in range(cfg.blocks_per_level - 1)]
            return nn.ModuleList(blocks)

        self.down = nn.ModuleList()
        cin = N_SESSIONS * C
        for w in W[:-1]:
            self.down.append(level(cin, w, full_dim))
            cin = w
        self.middle = level(cin, W[-1], E)
        self.up = nn.ModuleList()
        cin = W[-1]
        for w in reversed(W[:-1]):
            self.up.append(level(cin + w, w, full_dim))
            cin = w
        self.head = nn.Conv2d(cin, C + N_SESSIONS, 1)
        self.reset_parameters()

    def reset_parameters(self, seed: int | None = None) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    m.weight.uniform_(-bound, bound, generator=g)
                    m.bias.uniform_(-bound, bound, generator=g)
                elif isinstance(m, nn.GroupNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            self.treat_table.weight.normal_(0.0, 0.02, generator=g)
            # noise channels start at zero; the mask rows keep their fan-in
            # init so the segmentation loss reaches the trunk from step one
            self.head.weight[: self.cfg.channels].zero_()
            self.head.bias.zero_()

    # -- conditioning -------------------------------------------------------

    def embed_pairs(self, treatments: torch.Tensor, days: torch.Tensor) -> torch.Tensor:
        """(..., ) integer codes and days -> (..., E) pair vectors."""
        if treatments.numel() and (treatments.min() < 1 or treatments.max() > 2):
            bad = sorted(set(treatments.flatten().tolist()) - {1, 2})
            raise VocabularyError(f"unknown treatment code(s) {bad}")
        dtype = self.treat_mlp.weight.dtype
        tv = F.silu(self.treat_mlp(self.treat_table(treatments.long() - 1)))
        dv = F.silu(self.day_mlp(sinusoidal_embed_torch(days, self.cfg.embed_dim, dtype)))
        return tv + dv

    def conditioning(self, treatments, days, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(full (B, 4E), mid (B, E))`` from (B, 4) pairs and (B,) steps."""
        v = self.embed_pairs(treatments, days)  # B, 4, E
        target = v[:, 3]
        diffs = [target - v[:, i] for i in range(3)]
        dtype = self.time_mlp.weight.dtype
        vt = F.silu(self.time_mlp(sinusoidal_embed_torch(t, self.cfg.embed_dim, dtype)))
        mid = target + vt
        return torch.cat(diffs + [mid], dim=-1), mid

    # -- network ------------------------------------------------------------

    def check_input(self, x_in: torch.Tensor) -> None:
        C = self.cfg.channels
        if x_in.ndim != 4 or x_in.shape[1] != N_SESSIONS * C:
            raise ShapeError(f"expected input (B, {N_SESSIONS * C}, H, W), got {tuple(x_in.shape)}")
        k = 2 ** (self.cfg.levels - 1)
        if x_in.shape[2] % k or x_in.shape[3] % k:
            raise ShapeError(f"H and W must be multiples of {k}, got {tuple(x_in.shape[2:])}")

    def forward_with_cond(self, x_in, full, mid) -> DenoiserOutput:
        self.check_input(x_in)
        h = x_in
        skips = []
        for blocks in self.down:
            for b in blocks:
                h = b(h, full)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        for b in self.middle:
            h = b(h, mid)
        for blocks in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips.pop()], dim=1)
            for b in blocks:
                h = b(h, full)
        out = self.head(h)
        C = self.cfg.channels
        return DenoiserOutput(out[:, :C], out[:, C:])

    def forward(self, x_in, treatments, days, t) -> DenoiserOutput:
        full, mid = self.conditioning(treatments, days, t)
        return self.forward_with_cond(x_in, full, mid)


def pairs_to_tensors(pairs, batch: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Four ``TreatmentDayPair`` -> ``(treatments, days)`` int tensors of shape (batch, 4)."""
    pairs = list(pairs)
    if len(pairs) != N_SESSIONS:
        raise ValueError(f"need {N_SESSIONS} treatment-day pairs (s1, s2, s3, f), got {len(pairs)}")
    tr = torch.tensor([[p.treatment for p in pairs]] * batch, dtype=torch.long)
    dy = torch.tensor([[p.day for p in pairs]] * batch, dtype=torch.long)
    return tr, dy


def build_conditioning(net: TaDiffNet, source_pairs, target_pair, t: int):
    """Unbatched conditioning vectors as numpy arrays ``(full (4E,), mid (E,))``."""
    tr, dy = pairs_to_tensors(list(source_pairs) + [target_pair])
    with torch.no_grad():
        full, mid = net.conditioning(tr, dy, torch.tensor([int(t)]))
    return full[0].numpy(), mid[0].numpy()


def embed_pair(net: TaDiffNet, pair: TreatmentDayPair) -> np.ndarray:
    with torch.no_grad():
        v = net.embed_pairs(torch.tensor([pair.treatment]), torch.tensor([pair.day]))
    return v[0].numpy()


# -- flat parameter view ------------------------------------------------------

def layout(net: nn.Module) -> list[dict]:
    return [{"name": n, "shape": list(p.shape)} for n, p in net.named_parameters()]


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in TaDiffNet(cfg).parameters())


def get_flat(net: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def set_flat(net: nn.Module, vec) -> None:
    vec = torch.as_tensor(vec)
    n = sum(p.numel() for p in net.parameters())
    if vec.numel() != n:
        raise ShapeError(f"parameter vector has {vec.numel()} entries, layout needs {n}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec.to(next(net.parameters()).dtype), net.parameters())


# -- explicit forward/backward surface ----------------------------------------

@dataclass
class ActivationCache:
    """Recorded forward pass; consumed by :func:`backward`."""
    output: DenoiserOutput | None
    params: list = field(default_factory=list)


def forward(net: TaDiffNet, x_in, treatments, days, t, cache: bool = False):
    """Run the network; with ``cache=True`` also return an :class:`ActivationCache`.

    Without caching the pass runs under ``no_grad`` so inference memory stays flat.
    """
    if not cache:
        with torch.no_grad():
            return net(x_in, treatments, days, t)
    with torch.enable_grad():
        out = net(x_in, treatments, days, t)
    return out, ActivationCache(output=out, params=list(net.parameters()))


def backward(cache: ActivationCache | None, grad_eps, grad_mask) -> torch.Tensor:
    """Flat parameter gradient of ``<grad_eps, eps_hat> + <grad_mask, mask_logits>``."""
    if cache is None or cache.output is None:
        raise StateError("backward needs the ActivationCache from forward(..., cache=True)")
    out = cache.output
    grads = torch.autograd.grad(
        [out.eps_hat, out.mask_logits],
        cache.params,
        grad_outputs=[torch.as_tensor(grad_eps, dtype=out.eps_hat.dtype),
                      torch.as_tensor(grad_mask, dtype=out.mask_logits.dtype)],
        allow_unused=True,
    )
    cache.output = None
    flat = [torch.zeros_like(p).flatten() if g is None else g.flatten() for g, p in zip(grads, cache.params)]
    return torch.cat(flat)
