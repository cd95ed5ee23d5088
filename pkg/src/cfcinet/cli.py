"""Command line entry point: ``cfcinet {train,infer,evaluate,synth,ablate,selfcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import Config, apply_overrides, load_config, save_config

log = logging.getLogger("cfcinet")


def _load_cfg(args) -> Config:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    for flag, key in (("epochs", "train.epochs"), ("lr", "train.lr"), ("seed", "train.seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "overlap", None) is not None:
        overrides.append(f"infer.overlap={args.overlap}")
    return apply_overrides(cfg, overrides).validate()


def _case_dirs(root: Path) -> List[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir())


def cmd_train(args) -> int:
    from .data import load_case, normalize
    from .engine import phantom_split, train

    cfg = _load_cfg(args)
    if args.data:
        cases = [normalize(load_case(d)) for d in _case_dirs(Path(args.data))]
        val = [normalize(load_case(d)) for d in _case_dirs(Path(args.val))] if args.val else []
    else:
        cases, val = phantom_split(args.synthetic, args.synthetic_val, args.synthetic_size, cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    res = train(cfg, cases, val, out)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; final loss {last['loss']:.4f}; checkpoints in {out}")
    return 0


def cmd_infer(args) -> int:
    from .data import load_case, normalize, save_labels
    from .engine import load_checkpoint
    from .infer import SlidingSpec, check_model_spec, sliding_window_infer

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"error: --checkpoint: file not found: {ckpt}", file=sys.stderr)
        return 1
    model, cfg, _ = load_checkpoint(ckpt)
    overrides = list(args.set or [])
    if args.overlap is not None:
        overrides.append(f"infer.overlap={args.overlap}")
    if args.patch_size is not None:
        overrides.append(f"infer.patch_size={args.patch_size}")
    cfg = apply_overrides(cfg, overrides).validate()
    spec = SlidingSpec(cfg.infer.patch_size or cfg.network.in_size, cfg.infer.overlap, cfg.infer.batch_size)
    check_model_spec(model, spec)
    case = normalize(load_case(args.case))
    _, labels = sliding_window_infer(case.images, model, spec)
    out = Path(args.out or f"{case.case_id}_pred.nii.gz")
    save_labels(labels, out, case.affine)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_labels
    from .metrics import format_csv, format_table, region_metrics

    pred, _ = load_labels(args.pred)
    gt, spacing = load_labels(args.gt)
    report = region_metrics(pred, gt, spacing)
    print(format_table(report))
    print()
    print(format_csv(report), end="")
    if args.csv:
        Path(args.csv).write_text(format_csv(report))
    return 0


def cmd_synth(args) -> int:
    from .data import synth_case, write_case

    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for i in range(args.n):
        case = synth_case(rng, args.size, case_id=f"synth_{i:03d}")
        write_case(case, out / case.case_id)
    print(f"wrote {args.n} phantom case(s) to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .engine import GRIDS, ablation_run, format_ablation_table, phantom_split, write_ablation_csv

    cfg = _load_cfg(args)
    train_cases, test_cases = phantom_split(args.train_cases, args.test_cases, cfg.network.in_size, cfg.train.seed)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name in args.grid:
        rows = ablation_run(cfg, GRIDS[name](), train_cases, test_cases)
        print(f"== {name} ==")
        print(format_ablation_table(rows))
        if out is not None:
            write_ablation_csv(rows, out / f"{name}.csv")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfcinet", description="CFCI-Net multimodal brain tumour segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    p.add_argument("--data", help="directory of BraTS case directories")
    p.add_argument("--val", help="directory of held-out case directories")
    p.add_argument("--synthetic", type=int, default=4, help="phantom training cases when --data is absent")
    p.add_argument("--synthetic-val", type=int, default=1)
    p.add_argument("--synthetic-size", type=int, default=32)
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window prediction for one case")
    p.add_argument("--case", required=True, help="BraTS case directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output NIfTI path")
    p.add_argument("--overlap", type=float)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-region metrics for a prediction / ground-truth pair")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--csv", help="also write the CSV table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write synthetic phantom cases")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="run ablation grids on phantoms")
    with_config(p)
    p.add_argument("--grid", nargs="+", choices=["fusion", "mfci_parts", "pairing", "layers"], default=["fusion"])
    p.add_argument("--train-cases", type=int, default=2)
    p.add_argument("--test-cases", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
