"""Segmentation and image-quality metrics, threshold search and grouping."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ShapeError, UndefinedMetricError

DAY_BINS = ((0, 50, "0-50"), (51, 220, "51-220"), (221, 365, "221-365"), (366, 720, "366-720"),
            (721, None, "721+"))
THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)
METRICS = ("dsc", "rvd", "ssim", "psnr", "mse")


@dataclass
class MetricRow:
    case_id: str
    slice_id: int
    target_day: int
    treatment: int
    dsc: float
    rvd: float
    ssim: float
    psnr: float
    mse: float


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape {np.shape(a)} != {np.shape(b)}")


def dsc(pred_bin, gt_bin) -> float:
    """Dice similarity coefficient; two empty masks score 1."""
    _check(pred_bin, gt_bin)
    a = np.asarray(pred_bin, dtype=bool)
    b = np.asarray(gt_bin, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    # computed as 1 - dice loss so the two agree bit-for-bit on binary masks
    loss = 1.0 - 2.0 * int(np.logical_and(a, b).sum()) / total
    return 1.0 - loss


def rvd(pred_bin, gt_bin) -> float:
    """Signed relative volume difference (|pred| - |gt|) / |gt|."""
    _check(pred_bin, gt_bin)
    g = int(np.count_nonzero(gt_bin))
    if g == 0:
        raise UndefinedMetricError("RVD is undefined for an empty ground-truth mask")
    return (int(np.count_nonzero(pred_bin)) - g) / g


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of a 2D image pair."""
    _check(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ShapeError(f"ssim needs a 2D image of at least {win_size}x{win_size}, got {a.shape}")
    w = gaussian_window(win_size, sigma)

    def filt(x):
        return signal.correlate2d(x, w, mode="valid")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr_mse(a, b, peak: float) -> tuple[float, float]:
    """(PSNR in dB, MSE); identical inputs give ``(inf, 0.0)``."""
    _check(a, b)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(d * d))
    if mse == 0:
        return math.inf, 0.0
    return 10.0 * math.log10(peak * peak / mse), mse


def image_metrics(generated, target) -> dict[str, float]:
    """Channel-averaged SSIM / PSNR / MSE; dynamic range taken from each target channel."""
    _check(generated, target)
    g = np.asarray(generated, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if g.ndim == 2:
        g, t = g[None], t[None]
    out = defaultdict(list)
    for gc, tc in zip(g, t):
        rng = float(tc.max() - tc.min()) or 1.0
        out["ssim"].append(ssim(gc, tc, data_range=rng))
        p, m = psnr_mse(gc, tc, peak=rng)
        out["psnr"].append(p)
        out["mse"].append(m)
    return {k: float(np.mean(v)) for k, v in out.items()}


def optimize_threshold(probs, gts) -> float:
    """Threshold in {0.05, ..., 0.95} maximising mean DSC of ``prob > tau``; ties go low."""
    probs = [np.asarray(p) for p in probs]
    gts = [np.asarray(g) for g in gts]
    if not probs or len(probs) != len(gts):
        raise ValueError("need a non-empty validation split with one ground truth per prediction")
    if not any(g.any() for g in gts):
        raise UndefinedMetricError("every ground-truth mask in the split is empty")
    best, best_score = None, -1.0
    for tau in THRESHOLDS:
        score = float(np.mean([dsc(p > tau, g) for p, g in zip(probs, gts)]))
        if score > best_score:
            best, best_score = float(tau), score
    return best


def day_range_bin(day: int) -> str:
    day = int(day)
    if day < 0:
        raise ValueError("day must be >= 0")
    for lo, hi, label in DAY_BINS:
        if day >= lo and (hi is None or day <= hi):
            return label
    raise AssertionError("unreachable")


_KEYS = {
    "patient": lambda r: r.case_id,
    "treatment": lambda r: r.treatment,
    "day_range": lambda r: day_range_bin(r.target_day),
}


def aggregate(rows, key: str) -> list[dict]:
    """Per-group mean and population std of every metric, groups in first-seen order
    (day ranges in calendar order)."""
    if key not in _KEYS:
        raise KeyError(f"unknown aggregation key {key!r}; choose from {sorted(_KEYS)}")
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to aggregate")
    groups: dict = {}
    for r in rows:
        groups.setdefault(_KEYS[key](r), []).append(r)
    order = list(groups)
    if key == "day_range":
        labels = [b[2] for b in DAY_BINS]
        order.sort(key=labels.index)
    out = []
    for g in order:
        rec = {key: g, "n": len(groups[g])}
        for m in METRICS:
            v = np.array([getattr(r, m) for r in groups[g]], dtype=np.float64)
            mean = float(v.mean())
            rec[f"{m}_mean"] = mean
            rec[f"{m}_std"] = float(np.sqrt(np.mean((v - mean) ** 2))) if np.isfinite(mean) else math.nan
        out.append(rec)
    return out


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[f.name for f in fields(MetricRow)])
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def read_rows(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(MetricRow(case_id=d["case_id"], slice_id=int(d["slice_id"]),
                                 target_day=int(d["target_day"]), treatment=int(d["treatment"]),
                                 **{m: float(d[m]) for m in METRICS}))
        return out


def write_summary(summary: list[dict], path, header_note: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
