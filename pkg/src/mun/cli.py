"""Command-line surface: dataset generation, training, retrieval evaluation,
and the gradient-check runner.

Exit codes: 0 success, 1 usage/configuration error, 2 numeric failure
(non-finite loss or a failed gradient check). MUN_NUM_THREADS caps the
numeric backend's thread count.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mun", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="generate a synthetic dataset archive")
    gen.add_argument("--ids", type=int, required=True)
    gen.add_argument("--per-modality", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--image-hw", default=None,
                     help="HxW override, e.g. 48x24 (default 96x48)")
    gen.add_argument("--force", action="store_true")

    train = sub.add_parser("train", help="train a model on a dataset archive")
    train.add_argument("--config", default=None, help="flat key = value config file")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--ablation", default="full")
    train.add_argument("--val-data", default=None,
                       help="held-out archive for per-epoch eval columns")
    train.add_argument("--metrics", default=None,
                       help="metrics CSV path (default: <out>.metrics.csv)")
    train.add_argument("--seed", type=int, default=None, help="override config seed")
    train.add_argument("--force", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset archive")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--direction", choices=("ir2vis", "vis2ir"), default="ir2vis")
    ev.add_argument("--mode", choices=("clean", "corrupted"), default="clean")
    ev.add_argument("--repeats", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--csv", default=None, help="append per-repeat rows here")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--which", choices=("loss", "module", "all"), default="all")
    gc.add_argument("--seeds", type=int, default=10, help="seeds per check")
    return parser


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise ValueError(f"cannot parse image size '{text}'; expected HxW")


def _cmd_generate(args) -> int:
    from .synthdata import generate_dataset

    hw = _parse_hw(args.image_hw) if args.image_hw else (96, 48)
    try:
        dataset = generate_dataset(args.ids, args.per_modality, args.seed, hw)
        dataset.save(args.out, force=args.force)
    except (ValueError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(dataset)} samples ({args.ids} identities) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .config import TrainConfig, load_config
    from .synthdata import SynthDataset
    from .training import ABLATIONS, run_training

    try:
        config = load_config(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            config.seed = args.seed
        config.validate()
        if args.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation '{args.ablation}'")
        dataset = SynthDataset.load(args.data)
        val = SynthDataset.load(args.val_data) if args.val_data else None
        metrics_path = args.metrics or f"{args.out}.metrics.csv"
        result = run_training(
            config, dataset, ablation=args.ablation, val_dataset=val,
            out_checkpoint=args.out, metrics_path=metrics_path,
            force=args.force, verbose=True,
        )
    except (ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.final_eval:
        print(f"final ir2vis rank1 {result.final_eval['rank1']:.4f} "
              f"mAP {result.final_eval['mAP']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}  metrics: {metrics_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .synthdata import SynthDataset
    from .training import load_checkpoint

    try:
        model, _, config, _ = load_checkpoint(args.checkpoint)
        dataset = SynthDataset.load(args.data)
        if list(dataset.image_hw) != list(config.image_hw):
            raise ValueError(
                f"checkpoint expects {tuple(config.image_hw)} images, "
                f"dataset holds {dataset.image_hw}"
            )
        result = evaluate(model, dataset, direction=args.direction, mode=args.mode,
                          repeats=args.repeats, seed=args.seed)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"direction {args.direction}  mode {args.mode}  repeats {args.repeats}")
    print(f"rank1 {result.rank(1):.4f}  rank5 {result.rank(5):.4f}  "
          f"rank10 {result.rank(10):.4f}  mAP {result.map:.4f}")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=("repeat", "direction", "mode", "rank1", "rank5",
                                "rank10", "mAP"),
            )
            if new:
                writer.writeheader()
            for row in result.per_repeat:
                writer.writerow(row)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradient_checks

    seeds = [args.seed + i for i in range(args.seeds)]
    results = run_gradient_checks(which=args.which, seeds=seeds)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:20s} max rel err {r.max_rel_error:.3e} "
              f"(worst: {r.worst_param or '-'})")
    if failed:
        names = ", ".join(f"{r.name}[{r.worst_param}]" for r in failed)
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {names}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    threads = os.environ.get("MUN_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    args = _build_parser().parse_args(argv)
    handler = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
