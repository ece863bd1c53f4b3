"""Training loop: episode sampling, noising, joint loss, Adam with warmup +
cosine decay, gradient accumulation, and bit-exact checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import tgv
from .data import LongitudinalCase
from .denoiser import DenoiserConfig, TaDiffNet, TreatmentDayPair, get_flat, layout, set_flat
from .errors import ConfigError, DataError, FormatError, NumericAbort
from .losses import LossConfig, joint_loss, weight_map
from .schedule import ScheduleConfig, ScheduleTable, build_schedule

CKPT_MAGIC = b"TADIFF-CKPT-1\n"
LOG_FIELDS = ["step", "lr", "total", "weighted_mse", "seg", "wall_ms"]


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 2.5e-4
    warmup_steps: int = 1000
    total_steps: int = 5000
    batch_size: int = 8
    accum_steps: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.lr_peak < 0:
            raise ConfigError("lr_peak", "must be >= 0")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps", f"need 0 <= warmup_steps < total_steps ({self.total_steps})")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.accum_steps < 1:
            raise ConfigError("accum_steps", "must be >= 1")


@dataclass
class Episode:
    source_images: np.ndarray  # 3, C, H, W
    source_masks: np.ndarray  # 3, H, W
    target_image: np.ndarray  # C, H, W
    target_mask: np.ndarray  # H, W
    pairs: tuple[TreatmentDayPair, ...]  # s1, s2, s3, f
    indices: tuple[int, int, int, int] = (0, 0, 0, 0)  # 1-based session numbers
    case_id: str = ""
    slice_id: int = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then half-cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_episode(case: LongitudinalCase, sources, target: int, slice_id: int = 0) -> Episode:
    """Episode from explicit 1-based session numbers; fewer than three sources
    are padded by repeating the most recent one."""
    src = sorted(int(s) for s in sources)
    if not src:
        raise ValueError("need at least one source session")
    src = (src + [src[-1]] * 3)[:3]
    L = len(case)
    for i in src + [target]:
        if not 1 <= i <= L:
            raise IndexError(f"case {case.case_id} has no session {i} (L = {L})")
    if target <= src[-1]:
        raise ValueError(f"target session {target} must come after the last source {src[-1]}")
    views = [case.sessions[i - 1].slice(slice_id) for i in src + [target]]
    return Episode(
        source_images=np.stack([v[0] for v in views[:3]]),
        source_masks=np.stack([v[1] for v in views[:3]]),
        target_image=views[3][0],
        target_mask=views[3][1],
        pairs=tuple(TreatmentDayPair(case.sessions[i - 1].treatment, case.sessions[i - 1].day)
                    for i in src + [target]),
        indices=(src[0], src[1], src[2], target),
        case_id=case.case_id,
        slice_id=slice_id,
    )


def sample_episode(case: LongitudinalCase, rng: np.random.Generator) -> Episode:
    """Sorted sources drawn with replacement from [1, L-1]; target uniform in [s3+1, L]."""
    L = len(case)
    if L < 2:
        raise DataError(f"case {case.case_id}: need L >= 2 sessions")
    src = np.sort(rng.integers(1, L, size=3))
    target = int(rng.integers(src[-1] + 1, L + 1))
    slice_id = int(rng.integers(case.depth))
    return make_episode(case, src.tolist(), target, slice_id)


def collate(episodes):
    """Stack episodes into tensors ``(x_src, x0, masks, treatments, days)``."""
    x_src = torch.from_numpy(np.stack([e.source_images.reshape(-1, *e.source_images.shape[-2:])
                                       for e in episodes]).astype(np.float32))
    x0 = torch.from_numpy(np.stack([e.target_image for e in episodes]).astype(np.float32))
    masks = torch.from_numpy(np.stack([np.concatenate([e.source_masks, e.target_mask[None]])
                                       for e in episodes]).astype(np.float32))
    tr = torch.tensor([[p.treatment for p in e.pairs] for e in episodes], dtype=torch.long)
    dy = torch.tensor([[p.day for p in e.pairs] for e in episodes], dtype=torch.long)
    return x_src, x0, masks, tr, dy


class Trainer:
    """Owns the network, optimiser and both random streams.

    ``rng`` (numpy) draws episodes and steps; ``noise_gen`` (torch) draws the
    injected noise.  Both are checkpointed, so a restored trainer continues
    bit-identically.
    """

    def __init__(self, cases, model_cfg: DenoiserConfig = DenoiserConfig(),
                 train_cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
                 schedule_cfg: ScheduleConfig = ScheduleConfig(), net: TaDiffNet | None = None):
        train_cfg.validate()
        loss_cfg.validate()
        self.cases = [c for c in cases if len(c) >= 2]
        if not self.cases:
            raise DataError("no eligible cases")
        self.model_cfg, self.train_cfg, self.loss_cfg = model_cfg, train_cfg, loss_cfg
        self.schedule_cfg = schedule_cfg
        self.table: ScheduleTable = build_schedule(schedule_cfg)
        self.net = net if net is not None else TaDiffNet(model_cfg)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8,
                                    foreach=False)
        self.step = 0
        self.rng = np.random.default_rng(train_cfg.seed)
        self.noise_gen = torch.Generator().manual_seed(int(train_cfg.seed))

    # -- one optimisation step ------------------------------------------------

    def draw_batch(self) -> list[Episode]:
        n = self.train_cfg.batch_size * self.train_cfg.accum_steps
        idx = self.rng.integers(len(self.cases), size=n)
        return [sample_episode(self.cases[i], self.rng) for i in idx]

    def micro_loss(self, episodes, t, eps, scale: float):
        dtype = next(self.net.parameters()).dtype
        x_src, x0, masks, tr, dy = (a.to(dtype) if a.is_floating_point() else a for a in collate(episodes))
        eps = eps.to(dtype)
        ab = torch.tensor(self.table.alpha_bar, dtype=dtype)[t - 1].view(-1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        out = self.net(torch.cat([x_src, x_t], dim=1), tr, dy, t)
        omega = weight_map(masks, self.loss_cfg)
        total, wmse, seg = joint_loss(eps, out.eps_hat, torch.sigmoid(out.mask_logits), masks, t,
                                      self.table, self.loss_cfg, omega=omega)
        if not torch.isfinite(total).all():
            bad = (~torch.isfinite(total)).nonzero().flatten().tolist()
            raise NumericAbort(
                f"non-finite loss at step {self.step + 1}: t={t[bad].tolist()} "
                f"weighted_mse={wmse[bad].tolist()} seg={seg[bad].tolist()}"
            )
        (total.sum() * scale).backward()
        return total.detach().sum(), wmse.detach().sum(), seg.detach().sum()

    def train_step(self, episodes: list[Episode] | None = None) -> dict:
        """One Adam update over ``batch_size * accum_steps`` episodes (mean loss).

        Steps and noise for the whole update are drawn before the micro-batch
        split, so the update does not depend on ``accum_steps``.
        """
        cfg = self.train_cfg
        if episodes is None:
            episodes = self.draw_batch()
        n = len(episodes)
        t_all = torch.from_numpy(self.rng.integers(1, self.table.T + 1, size=n))
        C, H, W = episodes[0].target_image.shape
        eps_all = torch.randn((n, C, H, W), generator=self.noise_gen)
        per = math.ceil(n / cfg.accum_steps)
        self.opt.zero_grad(set_to_none=False)
        sums = torch.zeros(3, dtype=torch.float64)
        for k in range(0, n, per):
            parts = self.micro_loss(episodes[k:k + per], t_all[k:k + per], eps_all[k:k + per], 1.0 / n)
            sums += torch.stack([p.to(torch.float64) for p in parts])
        lr = lr_at(self.step + 1, cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.step += 1
        total, wmse, seg = (sums / n).tolist()
        return {"step": self.step, "lr": lr, "total": total, "weighted_mse": wmse, "seg": seg}

    def run(self, steps: int | None = None, log_path=None, progress=None) -> list[dict]:
        """Train until ``total_steps`` (or for ``steps`` more updates)."""
        end = self.train_cfg.total_steps if steps is None else min(self.step + steps, self.train_cfg.total_steps)
        rows = []
        fh = writer = None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists() or log_path.stat().st_size == 0
            fh = open(log_path, "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
        try:
            while self.step < end:
                t0 = time.perf_counter()
                row = self.train_step()
                row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
                rows.append(row)
                if writer:
                    writer.writerow(row)
                if progress:
                    progress(row)
        finally:
            if fh:
                fh.close()
        return rows

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        checkpoint(self, path)


def _adam_buffers(trainer: Trainer) -> tuple[np.ndarray, np.ndarray, int]:
    ms, vs, step = [], [], 0
    for p in trainer.net.parameters():
        st = trainer.opt.state.get(p)
        if st:
            ms.append(st["exp_avg"].flatten())
            vs.append(st["exp_avg_sq"].flatten())
            step = int(st["step"])
        else:
            ms.append(torch.zeros(p.numel()))
            vs.append(torch.zeros(p.numel()))
    return torch.cat(ms).numpy(), torch.cat(vs).numpy(), step


def checkpoint(trainer: Trainer, path) -> None:
    """Write ``TADIFF-CKPT-1``: magic, u32 header length, JSON header, then TGV blobs
    (parameters, Adam first/second moments, torch generator state)."""
    m, v, adam_step = _adam_buffers(trainer)
    blobs = [
        ("params", tgv.encode(get_flat(trainer.net).numpy().astype(np.float32))),
        ("adam_m", tgv.encode(m.astype(np.float32))),
        ("adam_v", tgv.encode(v.astype(np.float32))),
        ("noise_gen", tgv.encode(trainer.noise_gen.get_state().numpy())),
    ]
    header = {
        "format": "TADIFF-CKPT-1",
        "step": trainer.step,
        "adam_step": adam_step,
        "model": trainer.model_cfg.to_dict(),
        "train": asdict(trainer.train_cfg),
        "loss": asdict(trainer.loss_cfg),
        "schedule": asdict(trainer.schedule_cfg),
        "layout": layout(trainer.net),
        "numpy_rng": trainer.rng.bit_generator.state,
        "blobs": [{"name": n, "bytes": len(b)} for n, b in blobs],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    data = CKPT_MAGIC + struct.pack("<I", len(hdr)) + hdr + b"".join(b for _, b in blobs)
    tgv.atomic_write(path, data)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} not found") from None
    n = len(CKPT_MAGIC)
    if buf[:n] != CKPT_MAGIC:
        found = buf[:n].split(b"\n")[0]
        raise FormatError(f"not a TADIFF-CKPT-1 checkpoint (magic {found!r})", offset=0)
    if len(buf) < n + 4:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    (hlen,) = struct.unpack_from("<I", buf, n)
    start = n + 4
    try:
        header = json.loads(buf[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError("corrupt checkpoint header", offset=start) from None
    pos = start + hlen
    arrays = {}
    for blob in header["blobs"]:
        chunk = buf[pos:pos + blob["bytes"]]
        if len(chunk) != blob["bytes"]:
            raise FormatError(f"truncated blob {blob['name']!r}", offset=pos)
        try:
            arrays[blob["name"]] = tgv.decode(chunk)
        except FormatError as exc:
            raise FormatError(f"blob {blob['name']!r}: {exc}", offset=pos + (exc.offset or 0)) from None
        pos += blob["bytes"]
    return header, arrays


def load_model(path) -> tuple[TaDiffNet, dict]:
    header, arrays = read_checkpoint(path)
    net = TaDiffNet(DenoiserConfig.from_dict(header["model"]))
    if layout(net) != header["layout"]:
        raise FormatError("checkpoint layout does not match the model configuration")
    set_flat(net, torch.from_numpy(arrays["params"]))
    return net, header


def restore(path, cases) -> Trainer:
    """Rebuild a :class:`Trainer` that continues exactly where ``path`` left off."""
    header, arrays = read_checkpoint(path)
    trainer = Trainer(
        cases,
        model_cfg=DenoiserConfig.from_dict(header["model"]),
        train_cfg=TrainConfig(**header["train"]),
        loss_cfg=LossConfig(**header["loss"]),
        schedule_cfg=ScheduleConfig(**header["schedule"]),
    )
    if layout(trainer.net) != header["layout"]:
        raise FormatError("checkpoint layout does not match the model configuration")
    set_flat(trainer.net, torch.from_numpy(arrays["params"]))
    trainer.step = int(header["step"])
    if header["adam_step"] > 0:
        m = torch.from_numpy(arrays["adam_m"])
        v = torch.from_numpy(arrays["adam_v"])
        off = 0
        for p in trainer.net.parameters():
            k = p.numel()
            trainer.opt.state[p] = {
                "step": torch.tensor(float(header["adam_step"])),
                "exp_avg": m[off:off + k].view_as(p).clone(),
                "exp_avg_sq": v[off:off + k].view_as(p).clone(),
            }
            off += k
    trainer.rng.bit_generator.state = header["numpy_rng"]
    trainer.noise_gen.set_state(torch.from_numpy(arrays["noise_gen"]))
    return trainer
