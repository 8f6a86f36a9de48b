"""Heterogeneous run: small-encdec black-box source, tiny-encdec target and student.

Reuses the per-seed source checkpoints of a finished ablation run when
``--source-runs`` points at one (same data and seeds give the same source model).

    python3 scripts/run_heterogeneous.py [--source-runs runs/ablation] [--out runs/heterogeneous]
"""

import argparse
import dataclasses
import logging
import statistics
from pathlib import Path

import torch

from bbsfda.config import load_config
from bbsfda.experiment import collect_reports, load_domains, run_experiment
from bbsfda.metrics import evaluate
from bbsfda.models import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "heterogeneous.yaml"))
    ap.add_argument("--out", default="runs/heterogeneous")
    ap.add_argument("--source-runs", default=None, help="ablation output root with seed<k>/source/model.ckpt")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    gains = []
    for seed in args.seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed, output_dir=str(Path(args.out) / f"seed{seed}"))
        if args.source_runs:
            ckpt = Path(args.source_runs) / f"seed{seed}" / "source" / "model.ckpt"
            run_cfg = dataclasses.replace(run_cfg, stages=["stage1", "stage2"], source_checkpoint=str(ckpt))
        run_experiment(run_cfg.validate(), plots=False)
        reports = collect_reports(run_cfg.output_dir)
        if "source" in reports:
            src = reports["source"].metrics.mean_dice
        else:
            _, target = load_domains(run_cfg)
            src = evaluate(load_checkpoint(run_cfg.source_checkpoint), target.test).mean_dice
        student = reports["stage2_aug"].metrics.mean_dice
        gains.append(student - src)
        print(f"seed {seed}: source {src:.2f}  stage II w/ aug {student:.2f}  gain {student - src:+.2f}")
    print(f"median gain {statistics.median(gains):+.2f}")


if __name__ == "__main__":
    main()
