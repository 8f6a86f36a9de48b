"""End-to-end runs: data, source training, pseudo-labels, both distillation stages."""

from __future__ import annotations

import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .blackbox import PseudoLabelCache, precompute_pseudo_labels, wrap_as_blackbox
from .config import ExperimentConfig, dump_config
from .data import DomainData, generate_synthetic_pair, load_dataset, save_dataset
from .errors import ConfigError
from .metrics import evaluate, format_table
from .models import load_checkpoint
from .pipeline import StageReport, train_source, train_stage1, train_stage2

log = logging.getLogger(__name__)

ROW_ORDER = ("source", "stage1", "stage2_noaug", "stage2_aug")
ROW_LABELS = {"source": "source only", "stage1": "stage I",
              "stage2_noaug": "stage II w/o aug", "stage2_aug": "stage II w/ aug"}
CACHE_NAME = "pseudo_labels.bin"


def load_domains(cfg: ExperimentConfig) -> tuple[DomainData, DomainData]:
    """Saved dataset tree when ``data.root`` is set, otherwise the synthetic benchmark."""
    if cfg.data.root is None:
        return generate_synthetic_pair(cfg.shift_spec(), cfg.data.n_train, cfg.data.n_test,
                                       cfg.data.image_size)
    root = Path(cfg.data.root)
    k = cfg.data.shift.num_classes
    out = []
    for domain in ("source", "target"):
        out.append(DomainData(*(load_dataset(root / domain / split, k, domain, split)
                                for split in ("train", "test"))))
    return out[0], out[1]


def save_domains(source: DomainData, target: DomainData, root) -> Path:
    root = Path(root)
    for name, dom in (("source", source), ("target", target)):
        for split in ("train", "test"):
            save_dataset(getattr(dom, split), root / name / split)
    return root


def write_manifest(cfg: ExperimentConfig, out_dir, command: str, **extra) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "derived_seeds": {
            "data": cfg.data_seed,
            **{r: cfg.model_spec(r).init_seed for r in ("source_model", "target_model", "student_model")},
            **{f"optimizer.{s}": cfg.optimizer_for(s).seed for s in ("source", "stage1", "stage2")},
        },
        "versions": {"bbsfda": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": np.__version__},
        **extra,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def collect_reports(out_dir) -> dict[str, StageReport]:
    out_dir = Path(out_dir)
    reports = {}
    for stage in ROW_ORDER:
        path = out_dir / stage / "report.json"
        if path.exists():
            reports[stage] = StageReport.load(path)
    return reports


def write_metric_tables(reports: dict[str, StageReport], out_dir) -> str:
    rows = {ROW_LABELS[s]: reports[s].metrics for s in ROW_ORDER
            if s in reports and reports[s].metrics is not None}
    table = format_table(rows)
    out_dir = Path(out_dir)
    (out_dir / "metrics.md").write_text(table)
    summary = {s: reports[s].metrics.summary() for s in ROW_ORDER
               if s in reports and reports[s].metrics is not None}
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return table


def _preflight(cfg: ExperimentConfig, out_dir: Path):
    cfg.validate()
    problems = []
    stages = cfg.stages
    if "stage1" in stages and "source" not in stages:
        ckpt = Path(cfg.source_checkpoint or out_dir / "source" / "model.ckpt")
        if not ckpt.exists():
            problems.append(f"stage1 needs a source checkpoint; {ckpt} does not exist")
    if "stage2" in stages and "stage1" not in stages and not (out_dir / "stage1" / "model.ckpt").exists():
        problems.append(f"stage2 needs {out_dir / 'stage1' / 'model.ckpt'}")
    if cfg.data.root is not None and not Path(cfg.data.root).is_dir():
        problems.append(f"data.root {cfg.data.root} does not exist (run gen-data first)")
    if problems:
        raise ConfigError("cannot start run:\n  " + "\n  ".join(problems))


@dataclass
class RunResult:
    output_dir: Path
    reports: dict = field(default_factory=dict)
    table: str = ""


def run_experiment(cfg: ExperimentConfig, output_dir=None, plots: bool = True) -> RunResult:
    """Run the enabled stages in order, resuming earlier ones from checkpoints on disk.

    Layout under the output directory: ``source/``, ``stage1/``,
    ``stage2_noaug/``, ``stage2_aug/`` (each with ``model.ckpt``, ``best.ckpt``
    and ``report.json``), ``pseudo_labels.bin``, ``metrics.md``,
    ``metrics.json``, ``manifest.json`` and ``config.yaml``.
    """
    out = Path(output_dir) if output_dir is not None else cfg.resolved_output_dir()
    _preflight(cfg, out)
    write_manifest(cfg, out, "run-all", stages=list(cfg.stages), stage2_variants=list(cfg.stage2_variants))
    source, target = load_domains(cfg)
    target_train = target.train.unlabeled()
    reports = {}

    source_model = None
    if "source" in cfg.stages:
        source_model, rep = train_source(source.train, cfg.model_spec("source_model"),
                                         cfg.optimizer_for("source"), out / "source", eval_set=target.test)
        rep.extra["source_test"] = evaluate(source_model, source.test).summary()
        rep.save(out / "source" / "report.json")
        reports["source"] = rep
    elif "stage1" in cfg.stages:
        path = cfg.source_checkpoint or out / "source" / "model.ckpt"
        source_model = load_checkpoint(path, expected_spec=cfg.model_spec("source_model"))
        log.info("resumed source model from %s", path)

    teacher = None
    predictor = None
    if "stage1" in cfg.stages:
        predictor = wrap_as_blackbox(source_model, name="source")
        del source_model
        cache = precompute_pseudo_labels(predictor, target_train, out / CACHE_NAME)
        teacher, rep = train_stage1(cache, target_train, cfg.model_spec("target_model"),
                                    cfg.optimizer_for("stage1"), out / "stage1", eval_set=target.test)
        rep.extra["blackbox_queries"] = predictor.query_count
        rep.save(out / "stage1" / "report.json")
        reports["stage1"] = rep
    elif "stage2" in cfg.stages:
        teacher = load_checkpoint(out / "stage1" / "model.ckpt", expected_spec=cfg.model_spec("target_model"))

    if "stage2" in cfg.stages:
        before = predictor.query_count if predictor is not None else 0
        for variant in ("noaug", "aug"):
            if variant not in cfg.stage2_variants:
                continue
            aug = cfg.augmentation
            student, rep = train_stage2(teacher, target_train, cfg.model_spec("student_model"),
                                        aug.weak, aug.strong, cfg.optimizer_for("stage2"),
                                        use_strong_aug=variant == "aug",
                                        out_dir=out / f"stage2_{variant}", eval_set=target.test)
            after = predictor.query_count if predictor is not None else 0
            rep.extra["blackbox_queries"] = after - before
            rep.save(out / rep.stage / "report.json")
            reports[rep.stage] = rep

    all_reports = collect_reports(out)
    table = write_metric_tables(all_reports, out)
    if plots:
        from .report import plot_loss_curves
        plot_loss_curves(all_reports, out / "plots" / "loss_curves.png")
    return RunResult(out, reports, table)


def run_seed_sweep(cfg: ExperimentConfig, seeds, root, plots: bool = False) -> dict:
    """Run ``cfg`` once per seed under ``root/seed<k>`` and collect mean DSC per stage.

    Returns ``{"per_seed": {seed: {stage: dsc}}, "median": {stage: dsc}, "seconds": {seed: s}}``.
    """
    import dataclasses
    import time

    root = Path(root)
    per_seed, seconds = {}, {}
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=int(seed), output_dir=str(root / f"seed{seed}"))
        t0 = time.perf_counter()
        result = run_experiment(run_cfg.validate(), plots=plots)
        seconds[seed] = time.perf_counter() - t0
        per_seed[seed] = {s: r.metrics.mean_dice for s, r in collect_reports(result.output_dir).items()
                          if r.metrics is not None}
    stages = [s for s in ROW_ORDER if all(s in v for v in per_seed.values())]
    median = {s: float(np.median([v[s] for v in per_seed.values()])) for s in stages}
    summary = {"per_seed": per_seed, "median": median, "seconds": seconds}
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
