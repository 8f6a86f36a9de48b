"""Command-line entry point: ``bbsfda <subcommand> [options] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import BBSFDAError

log = logging.getLogger("bbsfda")


def _common(p: argparse.ArgumentParser, config_required=False):
    p.add_argument("--config", "-c", required=config_required, help="experiment YAML file")
    p.add_argument("--output", "-o", help="output directory (overrides output_dir)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable, last wins")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbsfda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic benchmark to a dataset tree")
    _common(p)
    p.add_argument("--out", help="dataset root (default: data.root, else <output>/data)")

    p = sub.add_parser("train-source", help="stage 0: supervised source training")
    _common(p)

    p = sub.add_parser("precompute-labels", help="query the black box once per target-train image")
    _common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help="source checkpoint to wrap locally")
    src.add_argument("--remote", help="address of a running `bbsfda serve` (host:port)")

    p = sub.add_parser("train-stage1", help="stage I: distill from cached soft labels")
    _common(p)
    p.add_argument("--cache", help="pseudo-label cache file (default <output>/pseudo_labels.bin)")

    p = sub.add_parser("train-stage2", help="stage II: two-view distillation into a fresh student")
    _common(p)
    p.add_argument("--teacher", help="stage-I checkpoint (default <output>/stage1/model.ckpt)")
    p.add_argument("--no-aug", action="store_true", help="student sees raw images (ablation)")

    p = sub.add_parser("run-all", help="stage 0 -> I -> II end to end")
    _common(p)

    p = sub.add_parser("serve", help="serve a checkpoint as a black-box predictor over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("evaluate", help="DSC/ASD of a checkpoint on a labeled dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with images/ and masks/")
    p.add_argument("--out", help="metric report JSON (default <checkpoint dir>/eval_<data name>.json)")

    p = sub.add_parser("report", help="plots and summary for finished runs")
    p.add_argument("output_dir")
    return parser


def _config(args):
    from .config import load_config

    cfg = load_config(args.config, args.overrides)
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    return cfg


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic_pair
    from .experiment import save_domains, write_manifest

    cfg = _config(args)
    root = Path(args.out or cfg.data.root or cfg.resolved_output_dir() / "data")
    source, target = generate_synthetic_pair(cfg.shift_spec(), cfg.data.n_train, cfg.data.n_test,
                                             cfg.data.image_size)
    save_domains(source, target, root)
    write_manifest(cfg, root, "gen-data")
    print(f"wrote dataset tree to {root}")
    return 0


def _run_stages(args, stages, **changes) -> int:
    from .experiment import run_experiment

    cfg = dataclasses.replace(_config(args), stages=stages, **changes)
    result = run_experiment(cfg.validate())
    print(result.table, end="")
    return 0


def cmd_train_source(args) -> int:
    return _run_stages(args, ["source"])


def cmd_run_all(args) -> int:
    return _run_stages(args, list(_config(args).stages))


def cmd_precompute(args) -> int:
    from .blackbox import precompute_pseudo_labels, remote_predictor, wrap_as_blackbox
    from .experiment import CACHE_NAME, load_domains, write_manifest
    from .models import load_checkpoint

    cfg = _config(args)
    out = cfg.resolved_output_dir()
    if args.remote:
        predictor = remote_predictor(args.remote)
    else:
        ckpt = args.checkpoint or cfg.source_checkpoint or out / "source" / "model.ckpt"
        predictor = wrap_as_blackbox(load_checkpoint(ckpt))
    _, target = load_domains(cfg)
    cache = precompute_pseudo_labels(predictor, target.train.unlabeled(), out / CACHE_NAME)
    write_manifest(cfg, out, "precompute-labels", queries=predictor.query_count)
    print(f"cached {len(cache)} soft label maps in {out / CACHE_NAME}")
    return 0


def cmd_train_stage1(args) -> int:
    from .blackbox import PseudoLabelCache
    from .experiment import CACHE_NAME, collect_reports, load_domains, write_manifest, write_metric_tables
    from .pipeline import train_stage1

    cfg = _config(args)
    out = cfg.resolved_output_dir()
    cache = PseudoLabelCache.load(args.cache or out / CACHE_NAME)
    _, target = load_domains(cfg)
    write_manifest(cfg, out, "train-stage1")
    _, rep = train_stage1(cache, target.train.unlabeled(), cfg.model_spec("target_model"),
                          cfg.optimizer_for("stage1"), out / "stage1", eval_set=target.test)
    rep.save(out / "stage1" / "report.json")
    print(write_metric_tables(collect_reports(out), out), end="")
    return 0


def cmd_train_stage2(args) -> int:
    from .experiment import collect_reports, load_domains, write_manifest, write_metric_tables
    from .models import load_checkpoint
    from .pipeline import train_stage2

    cfg = _config(args)
    out = cfg.resolved_output_dir()
    teacher = load_checkpoint(args.teacher or out / "stage1" / "model.ckpt")
    _, target = load_domains(cfg)
    write_manifest(cfg, out, "train-stage2")
    aug = cfg.augmentation
    stage = "stage2_noaug" if args.no_aug else "stage2_aug"
    _, rep = train_stage2(teacher, target.train.unlabeled(), cfg.model_spec("student_model"),
                          aug.weak, aug.strong, cfg.optimizer_for("stage2"), not args.no_aug,
                          out_dir=out / stage, eval_set=target.test)
    rep.save(out / stage / "report.json")
    print(write_metric_tables(collect_reports(out), out), end="")
    return 0


def cmd_serve(args) -> int:
    from .blackbox import PredictorService, wrap_as_blackbox
    from .models import load_checkpoint

    predictor = wrap_as_blackbox(load_checkpoint(args.checkpoint), input_size=args.input_size)
    service = PredictorService(predictor, (args.host, args.port))
    print(f"serving {args.checkpoint} at {service.url}", flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.server.server_close()
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .metrics import evaluate, format_table
    from .models import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, model.spec.num_classes, "target", "test")
    report = evaluate(model, ds)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{Path(args.data).name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1))
    print(format_table({Path(args.checkpoint).parent.name or "model": report}), end="")
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    from .report import make_report

    summary = make_report(args.output_dir)
    for w in summary["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    for run, entry in summary["runs"].items():
        print(f"{run}: {len(entry['files'])} files")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "precompute-labels": cmd_precompute,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "run-all": cmd_run_all,
    "serve": cmd_serve,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BBSFDAError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
