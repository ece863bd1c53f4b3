"""Longitudinal cases: containers, normalisation, on-disk layout and a
synthetic treatment-dependent lesion generator.

A session image is ``C x H x W`` (optionally ``C x H x W x D`` for stacks of
axial slices); its mask is ``H x W`` (or ``H x W x D``).  Session indices
exposed to users are 1-based, matching how sessions are numbered in a
patient's history.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tgv
from .errors import ConfigError, DataError, FormatError

CRT, TMZ = 1, 2
TREATMENTS = {CRT: "CRT", TMZ: "TMZ"}


@dataclass
class Session:
    image: np.ndarray
    mask: np.ndarray
    treatment: int
    day: int

    @property
    def depth(self) -> int:
        return 1 if self.mask.ndim == 2 else self.mask.shape[-1]

    def slice(self, k: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """2D view ``(image C x H x W, mask H x W)`` at axial index ``k``."""
        if self.mask.ndim == 2:
            if k != 0:
                raise IndexError(f"2D session has no slice {k}")
            return self.image, self.mask
        return self.image[..., k], self.mask[..., k]


@dataclass
class LongitudinalCase:
    case_id: str
    sessions: list[Session]

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.sessions)

    def validate(self) -> None:
        if len(self.sessions) < 2:
            raise DataError(f"case {self.case_id}: needs at least 2 sessions, got {len(self.sessions)}")
        first = self.sessions[0]
        for i, s in enumerate(self.sessions, start=1):
            if s.image.shape != first.image.shape or s.mask.shape != first.mask.shape:
                raise DataError(f"case {self.case_id}: session {i} shape differs from session 1")
            if s.image.shape[1:] != s.mask.shape:
                raise DataError(f"case {self.case_id}: session {i} image/mask grids differ")
            if s.treatment not in TREATMENTS:
                raise DataError(f"case {self.case_id}: session {i} has unknown treatment {s.treatment}")
            if s.day < 0:
                raise DataError(f"case {self.case_id}: session {i} has negative day")
        days = [s.day for s in self.sessions]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError(f"case {self.case_id}: days must be strictly increasing, got {days}")

    @property
    def channels(self) -> int:
        return self.sessions[0].image.shape[0]

    @property
    def depth(self) -> int:
        return self.sessions[0].depth


def zscore_normalize(image: np.ndarray) -> np.ndarray:
    """Per-channel z-score; constant channels become zeros."""
    x = np.asarray(image, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    out = np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return out.astype(np.float32)


def eligible_slices(case: LongitudinalCase, min_area_px: int = 100) -> dict[int, list[int]]:
    """Slices (per 1-based session index) whose mask covers at least ``min_area_px`` pixels."""
    if min_area_px < 0:
        raise ValueError("min_area_px must be >= 0")
    out = {}
    for i, s in enumerate(case.sessions, start=1):
        m = s.mask if s.mask.ndim == 3 else s.mask[..., None]
        areas = m.reshape(-1, m.shape[-1]).astype(np.int64).sum(axis=0)
        out[i] = [int(k) for k in np.flatnonzero(areas >= min_area_px)]
    return out


# -- on-disk layout ---------------------------------------------------------

def save_case(case: LongitudinalCase, root) -> Path:
    """Write ``root/case_<id>/`` with a manifest and one TGV pair per session."""
    d = Path(root) / f"case_{case.case_id}"
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(case.sessions, start=1):
        img, msk = f"s{i:02d}_image.tgv", f"s{i:02d}_mask.tgv"
        tgv.save_tgv(np.asarray(s.image, dtype=np.float32), d / img)
        tgv.save_tgv(np.asarray(s.mask, dtype=np.uint8), d / msk)
        entries.append({"day": int(s.day), "treatment": int(s.treatment), "image": img, "mask": msk})
    manifest = {"case_id": case.case_id, "sessions": entries}
    tgv.atomic_write(d / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    return d


def load_case(case_dir, normalize: bool = True) -> LongitudinalCase:
    case_dir = Path(case_dir)
    path = case_dir / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["sessions"]
        case_id = str(manifest["case_id"])
    except FileNotFoundError:
        raise DataError(f"{case_dir}: missing manifest.json") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from None
    sessions = []
    for e in entries:
        image = tgv.load_tgv(case_dir / e["image"]).astype(np.float32)
        if normalize:
            image = zscore_normalize(image)
        mask = tgv.load_tgv(case_dir / e["mask"]).astype(np.uint8)
        sessions.append(Session(image=image, mask=mask, treatment=int(e["treatment"]), day=int(e["day"])))
    return LongitudinalCase(case_id=case_id, sessions=sessions)


def list_case_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())


def load_cases(root, normalize: bool = True) -> list[LongitudinalCase]:
    return [load_case(p, normalize=normalize) for p in list_case_dirs(root)]


# -- synthetic generator ----------------------------------------------------

@dataclass
class SynthConfig:
    n_cases: int = 8
    seed: int = 0
    grid: int = 64
    sessions: tuple[int, int] = (4, 8)
    growth_rates: dict[int, float] = field(default_factory=lambda: {CRT: -0.06, TMZ: 0.06})
    noise_level: float = 0.05
    initial_radius: tuple[float, float] = (6.0, 12.0)
    day_gap: tuple[int, int] = (14, 60)
    # sessions (counted from the first) labelled CRT before the switch to TMZ
    crt_sessions: tuple[int, int] = (1, 6)
    max_radius: float = 20.0

    def validate(self) -> None:
        if self.n_cases < 0:
            raise ConfigError("n_cases", "must be >= 0")
        if self.grid < 8:
            raise ConfigError("grid", "must be >= 8")
        lo, hi = self.sessions
        if not 2 <= lo <= hi:
            raise ConfigError("sessions", f"need 2 <= L_min <= L_max, got {self.sessions}")
        missing = set(TREATMENTS) - set(self.growth_rates)
        if missing:
            raise ConfigError("growth_rates", f"no rate for treatment codes {sorted(missing)}")
        if not 1 <= self.day_gap[0] <= self.day_gap[1]:
            raise ConfigError("day_gap", "need 1 <= min <= max")
        if not 0 <= self.initial_radius[0] <= self.initial_radius[1]:
            raise ConfigError("initial_radius", "need 0 <= min <= max")
        if not 0 <= self.crt_sessions[0] <= self.crt_sessions[1]:
            raise ConfigError("crt_sessions", "need 0 <= min <= max")


def radius_trajectory(r0: float, days, treatments, rates: dict[int, float],
                      max_radius: float = np.inf) -> np.ndarray:
    """Integrate dr/dt = rate(treatment) between consecutive session days.

    The interval ending at session i uses session i's treatment.  The radius
    is clipped to ``[0, max_radius]`` after every interval.
    """
    r = np.empty(len(days))
    r[0] = r0
    for i in range(1, len(days)):
        step = rates[treatments[i]] * (days[i] - days[i - 1])
        r[i] = min(max(r[i - 1] + step, 0.0), max_radius)
    return r


def _smooth_field(rng, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def render_session(anatomy: np.ndarray, center, axes_q: float, angle: float, radius: float,
                   rng, noise_level: float, halo: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Draw one session: returns (raw image 3 x H x W float32, mask H x W uint8)."""
    _, H, W = anatomy.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    # area-preserving ellipse: the level set e == r encloses pi r^2
    e = np.sqrt((u / np.sqrt(axes_q)) ** 2 + (v * np.sqrt(axes_q)) ** 2)

    mask = (e <= radius) & (radius > 0)
    core = e < 0.6 * radius
    rim = mask & ~core
    edema = (e <= radius + halo) & ~mask & (radius > 0)

    img = anatomy.copy()
    img[0] -= 0.8 * core
    img[1] += 1.5 * rim + 0.4 * (mask & core)
    img[2] += 1.5 * mask + 0.8 * edema
    img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6))
    img += noise_level * rng.standard_normal(img.shape)
    return img.astype(np.float32), mask.astype(np.uint8)


def generate_synthetic_case(cfg: SynthConfig, case_seed: int, normalize: bool = True) -> LongitudinalCase:
    """Deterministic synthetic patient for ``(cfg.seed, case_seed)``."""
    cfg.validate()
    rng = np.random.default_rng([int(cfg.seed), int(case_seed)])
    G = cfg.grid
    L = int(rng.integers(cfg.sessions[0], cfg.sessions[1] + 1))
    gaps = rng.integers(cfg.day_gap[0], cfg.day_gap[1] + 1, size=L - 1)
    days = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
    n_crt = int(rng.integers(cfg.crt_sessions[0], cfg.crt_sessions[1] + 1))
    treatments = [CRT if i < n_crt else TMZ for i in range(L)]

    r0 = float(rng.uniform(*cfg.initial_radius))
    radii = radius_trajectory(r0, days, treatments, cfg.growth_rates, cfg.max_radius)

    margin = min(G / 2 - 1, cfg.max_radius * 0.5 + 4)
    center = rng.uniform(margin, G - 1 - margin, size=2)
    axes_q = float(rng.uniform(0.75, 1.0))
    angle = float(rng.uniform(0, np.pi))

    anatomy = np.stack([1.0 + 0.3 * _smooth_field(rng, (G, G), 4.0) for _ in range(3)])
    sessions = []
    for day, tau, r in zip(days, treatments, radii):
        img, mask = render_session(anatomy, center, axes_q, angle, float(r), rng, cfg.noise_level)
        if normalize:
            img = zscore_normalize(img)
        sessions.append(Session(image=img, mask=mask, treatment=tau, day=int(day)))
    return LongitudinalCase(case_id=f"{int(cfg.seed)}-{int(case_seed):03d}", sessions=sessions)
