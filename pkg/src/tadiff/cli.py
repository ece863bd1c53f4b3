"""tadiff command line: synth, train, sample, eval.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import tgv
from .config import load_config, parse_override
from .data import generate_synthetic_case, list_case_dirs, load_case, load_cases, save_case
from .denoiser import TreatmentDayPair
from .errors import ConfigError, DataError, FormatError, NumericAbort, TadiffError, UndefinedMetricError
from .metrics import (MetricRow, aggregate, dsc, image_metrics, optimize_threshold, rvd, write_rows,
                      write_summary)
from .sampler import NetDenoiser, SamplerConfig, ensemble
from .schedule import ScheduleConfig, build_schedule
from .trainer import Trainer, load_model, make_episode, restore

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(TadiffError):
    pass


def _config(args):
    overrides = dict(parse_override(s) for s in (args.set or []))
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    cfg = _config(args)
    data_cfg = replace(cfg.data, n_cases=args.cases, seed=args.seed if args.seed is not None else cfg.data.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    for k in range(data_cfg.n_cases):
        case = generate_synthetic_case(data_cfg, k, normalize=False)
        d = save_case(case, out)
        print(f"{d.name}: {len(case)} sessions")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, total_steps=args.steps))
        cfg.validate()
    cases = [c for c in load_cases(args.data) if len(c) >= 2]
    if not cases:
        raise DataError(f"no eligible cases in {args.data}")
    out = Path(args.out)
    log = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    if args.resume and out.exists():
        trainer = restore(out, cases)
    else:
        trainer = Trainer(cases, model_cfg=cfg.model, train_cfg=cfg.train, loss_cfg=cfg.loss,
                          schedule_cfg=cfg.schedule)
        if log.exists():
            log.unlink()
    every = max(1, args.checkpoint_every or trainer.train_cfg.total_steps)

    def progress(row):
        if args.verbose and row["step"] % 100 == 0:
            print(f"step {row['step']} lr {row['lr']:.3g} loss {row['total']:.4g}", file=sys.stderr)
        if row["step"] % every == 0:
            trainer.save(out)

    trainer.run(log_path=log, progress=progress)
    trainer.save(out)
    print(f"trained to step {trainer.step}; checkpoint {out}; log {log}")
    return EXIT_OK


def _parse_sources(text: str) -> list[int]:
    try:
        src = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sources must be comma-separated session numbers, got {text!r}") from None
    if not 1 <= len(src) <= 3:
        raise UsageError("--sources takes one to three session numbers")
    src = sorted(src)
    return (src + [src[-1]] * 3)[:3]


def cmd_sample(args) -> int:
    net, header = load_model(args.ckpt)
    table = build_schedule(ScheduleConfig(**header["schedule"]))
    cfg = _config(args)
    case = load_case(args.case)
    sources = _parse_sources(args.sources)
    for i in sources:
        if not 1 <= i <= len(case):
            raise DataError(f"case {case.case_id} has no session {i} (L = {len(case)})")
    if args.slice >= case.depth:
        raise DataError(f"case {case.case_id} has no slice {args.slice}")
    views = [case.sessions[i - 1].slice(args.slice) for i in sources]
    img = np.concatenate([v[0] for v in views]).astype(np.float32)
    if img.shape[0] != 3 * net.cfg.channels:
        raise DataError(f"case has {img.shape[0] // 3} channels, checkpoint expects {net.cfg.channels}")
    pairs = [TreatmentDayPair(case.sessions[i - 1].treatment, case.sessions[i - 1].day) for i in sources]
    target = TreatmentDayPair(args.target_treatment, args.target_day)
    if target.day <= pairs[-1].day:
        raise UsageError("--target-day must come after the last source day")
    pairs.append(target)
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    scfg = SamplerConfig(T_m=args.T_m or cfg.sampler.T_m, ensembles=args.ensembles or cfg.sampler.ensembles,
                         seed=seed)
    scfg.validate(table.T)

    members = []

    def keep(result):
        members.append(result)

    maps = ensemble(torch.from_numpy(img), pairs, NetDenoiser(net), scfg, table, on_member=keep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = members[0]
    tgv.save_tgv(first.generated.numpy().astype(np.float32), out / "generated.tgv")
    tgv.save_tgv(first.masks.numpy().astype(np.float32), out / "masks.tgv")
    for name in ("image_mean", "image_std", "mask_mean", "mask_std"):
        tgv.save_tgv(getattr(maps, name).numpy().astype(np.float32), out / f"{name}.tgv")
    meta = {
        "case_id": case.case_id,
        "slice_id": args.slice,
        "sources": sources,
        "pairs": [{"treatment": p.treatment, "day": p.day} for p in pairs],
        "target_day": target.day,
        "target_treatment": target.treatment,
        "seed": seed,
        "member_seeds": maps.seeds,
        "K": scfg.ensembles,
        "T": table.T,
        "T_m": scfg.T_m,
    }
    tgv.atomic_write(out / "meta.json", (json.dumps(meta, indent=2) + "\n").encode())
    print(f"wrote {out}")
    return EXIT_OK


def _prediction_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists()) if root.is_dir() else []


def collect_pairs(pred_root, gt_root):
    """Match every prediction directory to its ground-truth session.

    Raises :class:`DataError` listing every unmatched item.
    """
    preds = _prediction_dirs(pred_root)
    if not preds:
        raise DataError(f"no prediction directories (with meta.json) under {pred_root}")
    cases = {}
    for d in list_case_dirs(gt_root):
        c = load_case(d)
        cases[c.case_id] = c
    missing, items = [], []
    for p in preds:
        meta = json.loads((p / "meta.json").read_text())
        case = cases.get(str(meta["case_id"]))
        if case is None:
            missing.append(f"{p.name}: case {meta['case_id']} not in {gt_root}")
            continue
        by_day = {s.day: s for s in case.sessions}
        sess = by_day.get(int(meta["target_day"]))
        if sess is None:
            missing.append(f"{p.name}: case {case.case_id} has no session on day {meta['target_day']}")
            continue
        items.append((p, meta, sess))
    if missing:
        raise DataError("inventory mismatch:\n  " + "\n  ".join(missing))
    return items


def cmd_eval(args) -> int:
    items = collect_pairs(args.pred, args.gt)
    loaded = []
    for p, meta, sess in items:
        image, gt_mask = sess.slice(int(meta.get("slice_id", 0)))
        if int(gt_mask.sum()) < args.min_area:
            continue
        masks = tgv.load_tgv(p / "mask_mean.tgv")
        loaded.append((meta, tgv.load_tgv(p / "image_mean.tgv"), masks[3], image, gt_mask))
    if not loaded:
        raise DataError(f"no predictions with a target tumour of at least {args.min_area} px")
    if args.threshold == "auto":
        tau = optimize_threshold([x[2] for x in loaded], [x[4] for x in loaded])
        note = f"threshold={tau} (auto)"
    else:
        try:
            tau = float(args.threshold)
        except ValueError:
            raise UsageError("--threshold must be 'auto' or a number") from None
        note = f"threshold={tau}"
    rows = []
    for meta, gen, prob, image, gt_mask in loaded:
        pred = prob > tau
        im = image_metrics(gen, image)
        rows.append(MetricRow(case_id=str(meta["case_id"]), slice_id=int(meta.get("slice_id", 0)),
                              target_day=int(meta["target_day"]), treatment=int(meta["target_treatment"]),
                              dsc=dsc(pred, gt_mask), rvd=rvd(pred, gt_mask), **im))
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_rows(rows, report)
    for key in ("patient", "treatment", "day_range"):
        write_summary(aggregate(rows, key), report.with_name(f"{report.stem}_{key}.csv"), note)
    print(f"{len(rows)} rows -> {report} ({note})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of dotted config keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    s = sub.add_parser("synth", help="write synthetic longitudinal cases")
    s.add_argument("--cases", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a denoiser on a case directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override train.total_steps")
    s.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("-v", "--verbose", action="store_true")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="predict a future session with uncertainty maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--case", required=True, help="case directory")
    s.add_argument("--sources", required=True, help="1-3 session numbers, e.g. 1,2,3")
    s.add_argument("--target-day", type=int, required=True)
    s.add_argument("--target-treatment", type=int, required=True, choices=(1, 2))
    s.add_argument("--ensembles", type=int)
    s.add_argument("--T-m", dest="T_m", type=int)
    s.add_argument("--slice", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", default="auto")
    s.add_argument("--report", required=True)
    s.add_argument("--min-area", type=int, default=100, help="minimum target tumour area in pixels")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tadiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"tadiff {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, UndefinedMetricError, OSError) as exc:
        print(f"tadiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
