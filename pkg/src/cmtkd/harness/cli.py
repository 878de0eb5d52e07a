"""Command-line entry point: ``cmtkd train|evaluate|gen-data|design-levels|ablation``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..quantizers import design_gaussian_levels
from .config import load_config
from .data import generate_splits


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("image size must be positive")
    return h, w


def cmd_train(args) -> int:
    from .train import run_experiment

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out or f"runs/{cfg.preset}_seed{cfg.seed}")
    result = run_experiment(cfg, out)
    f = result.final
    print(f"final epoch {f.epoch}: student top1 {f.student.top1:.2f}  top5 {f.student.top5:.2f}", end="")
    if f.combined_teacher is not None:
        print(f"  combined teacher top1 {f.combined_teacher.top1:.2f}", end="")
    print(f"\nartifacts in {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .train import evaluate_checkpoint

    res = evaluate_checkpoint(args.checkpoint, args.data)
    print(json.dumps(res, indent=2, sort_keys=True))
    if res["evaluated"].get("top5_degenerate"):
        print("note: fewer than 5 classes, top-5 is trivially 100%", file=sys.stderr)
    return 0


def cmd_gen_data(args) -> int:
    out = generate_splits(
        args.out, args.classes, args.per_class, args.size, args.seed,
        test_per_class=args.test_per_class, channels=args.channels, noise=args.noise,
    )
    print(f"wrote {out / 'train.cmtd'} and {out / 'test.cmtd'}")
    return 0


def cmd_design_levels(args) -> int:
    lv = design_gaussian_levels(args.bits, args.half_wave)
    kind = "half-wave" if args.half_wave else "full-wave"
    print(f"{args.bits}-bit {kind} Gaussian quantizer")
    print(f"step  {lv.step:.10f}")
    print("levels " + " ".join(f"{v:.6f}" for v in lv.levels))
    print(f"mse   {lv.mse:.10f}")
    return 0


def cmd_ablation(args) -> int:
    from .train import run_experiment

    cfg = load_config(args.config)
    for preset in args.presets:
        accs = []
        for seed in args.seeds:
            run = cfg.replace(preset=preset, seed=seed)
            out = Path(args.out) / f"{preset}_seed{seed}" if args.out else None
            accs.append(run_experiment(run, out).final.student.top1)
        print(f"{preset:16s} mean top1 {np.mean(accs):6.2f}  per seed {accs}", flush=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmtkd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default runs/<preset>_seed<N>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: the one in the checkpoint config)")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-data", help="write a synthetic pattern dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int)
    g.add_argument("--size", type=_size, default=(16, 16), help="HxW, e.g. 16x16")
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("design-levels", help="MSE-optimal uniform quantizer for a unit Gaussian")
    d.add_argument("--bits", type=int, required=True)
    d.add_argument("--half-wave", action="store_true")
    d.set_defaults(func=cmd_design_levels)

    a = sub.add_parser("ablation", help="train several presets over several seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--presets", nargs="+", default=["single", "cmtkd", "cmtkd_no_att", "cmtkd_no_ml"])
    a.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
