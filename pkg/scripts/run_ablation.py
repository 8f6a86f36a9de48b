"""Three-seed ablation on the synthetic benchmark; prints the median DSC per stage.

    python3 scripts/run_ablation.py [--config configs/benchmark.yaml] [--out runs/ablation]
"""

import argparse
import logging
import time
from pathlib import Path

import torch

from bbsfda.config import load_config
from bbsfda.experiment import ROW_LABELS, run_seed_sweep

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "benchmark.yaml"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config, args.overrides)
    t0 = time.perf_counter()
    sweep = run_seed_sweep(cfg, args.seeds, args.out)
    stages = list(sweep["median"])
    print("| stage | " + " | ".join(f"seed {s}" for s in args.seeds) + " | median |")
    print("|---" * (len(args.seeds) + 2) + "|")
    for st in stages:
        cells = " | ".join(f"{sweep['per_seed'][s][st]:.2f}" for s in args.seeds)
        print(f"| {ROW_LABELS[st]} | {cells} | {sweep['median'][st]:.2f} |")
    print(f"total {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
