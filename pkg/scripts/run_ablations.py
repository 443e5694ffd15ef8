#!/usr/bin/env python3
"""Ablation study driver: trains every loss-component configuration over a
set of seeds on the synthetic benchmark and prints the resulting table.

Example:
    python scripts/run_ablations.py --seeds 1,2,3 --train-ids 20 --test-ids 10
"""

import argparse
import os
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np
import torch

from mun.config import ablation_study_config
from mun.evaluation import evaluate
from mun.synthdata import generate_dataset
from mun.training import ABLATIONS, run_training


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--train-ids", type=int, default=20)
    ap.add_argument("--test-ids", type=int, default=10)
    ap.add_argument("--per-modality", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--ablations", default=",".join(ABLATIONS))
    ap.add_argument("--out-dir", default=None, help="save checkpoints/CSVs here")
    ap.add_argument("--data-seed", type=int, default=100)
    args = ap.parse_args()

    threads = os.environ.get("MUN_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))

    seeds = [int(s) for s in args.seeds.split(",")]
    names = [a.strip() for a in args.ablations.split(",") if a.strip()]
    for name in names:
        if name not in ABLATIONS:
            ap.error(f"unknown ablation '{name}'")

    base_cfg = ablation_study_config()
    hw = tuple(base_cfg.image_hw)
    train_ds = generate_dataset(args.train_ids, args.per_modality, args.data_seed, hw)
    test_ds = generate_dataset(args.test_ids, args.per_modality, args.data_seed + 1000, hw)

    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    results: dict[str, list[tuple[float, float]]] = {n: [] for n in names}
    t_start = time.time()
    for seed in seeds:
        for name in names:
            cfg = ablation_study_config(seed=seed)
            if args.epochs:
                cfg.epochs = args.epochs
                cfg.warmup_epochs = min(cfg.warmup_epochs, args.epochs)
                cfg.decay_epochs = [d for d in cfg.decay_epochs if d < args.epochs]
            t0 = time.time()
            ckpt = out_dir / f"{name.replace('+', '_')}_s{seed}.mun" if out_dir else None
            metrics = out_dir / f"{name.replace('+', '_')}_s{seed}.csv" if out_dir else None
            run = run_training(cfg, train_ds, ablation=name,
                               out_checkpoint=ckpt, metrics_path=metrics, force=True)
            res = evaluate(run.model, test_ds, direction="ir2vis", mode="clean",
                           repeats=10, seed=seed)
            results[name].append((res.rank(1), res.map))
            print(f"seed {seed}  {name:12s} rank1 {res.rank(1):.3f}  "
                  f"mAP {res.map:.3f}  ({time.time() - t0:.0f}s)", flush=True)

    print(f"\ntotal wall time {time.time() - t_start:.0f}s\n")
    print(f"{'ablation':14s} {'rank1':>8s} {'mAP':>8s}   (mean over seeds {seeds})")
    for name in names:
        r1 = np.mean([r for r, _ in results[name]])
        mp = np.mean([m for _, m in results[name]])
        print(f"{name:14s} {r1:8.3f} {mp:8.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
