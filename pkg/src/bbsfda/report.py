"""Static figures: loss curves, ablation bars, prediction overlays."""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

log = logging.getLogger(__name__)

# background transparent, then one colour per foreground class
_COLORS = np.array([[0, 0, 0], [230, 60, 60], [60, 200, 90], [70, 110, 240], [240, 200, 40]], dtype=np.float64)


def plot_loss_curves(reports: dict, path) -> Path | None:
    curves = {k: r.step_losses for k, r in reports.items() if r.step_losses}
    if not curves:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(curves), figsize=(3.2 * len(curves), 2.8), squeeze=False)
    for ax, (name, losses) in zip(axes[0], curves.items()):
        ax.plot(losses, lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.set_yscale("log")
    axes[0][0].set_ylabel("loss [nats]")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ablation_bars(rows: dict, path) -> Path | None:
    """``rows`` maps a row label to ``{"dice": (mean, std), "asd": (mean, std)}``, in display order."""
    if not rows:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = list(rows)
    x = np.arange(len(labels))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, key, unit in ((a1, "dice", "DSC [%]"), (a2, "asd", "ASD [px]")):
        means = [rows[l][key][0] for l in labels]
        stds = [rows[l][key][1] for l in labels]
        ax.bar(x, means, yerr=stds, capsize=3, color="#4a7fb0")
        ax.set_xticks(x, labels, rotation=20, ha="right")
        ax.set_ylabel(unit)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """RGB uint8 array of the image with foreground classes tinted; same H x W as the image."""
    img = np.asarray(image, dtype=np.float64)
    gray = img[:, :, 0] if img.ndim == 3 and img.shape[2] == 1 else img
    rgb = np.repeat(gray[:, :, None], 3, axis=2) if gray.ndim == 2 else gray[:, :, :3]
    rgb = rgb * 255.0
    colors = _COLORS[np.asarray(mask) % len(_COLORS)]
    fg = (np.asarray(mask) > 0)[:, :, None]
    out = np.where(fg, (1 - alpha) * rgb + alpha * colors, rgb)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def save_overlay_panel(image, truth, predictions: dict, out_dir, case_id: str) -> list[Path]:
    """One PNG per panel at native resolution plus a combined side-by-side figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {"truth": truth, **predictions}
    paths = []
    for name, mask in panels.items():
        p = out_dir / f"{case_id}_{name}.png"
        Image.fromarray(overlay(image, mask)).save(p)
        paths.append(p)
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    for ax, (name, mask) in zip(np.atleast_1d(axes), panels.items()):
        ax.imshow(overlay(image, mask), interpolation="nearest")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    combined = out_dir / f"{case_id}_panel.png"
    fig.savefig(combined, dpi=100)
    plt.close(fig)
    return paths + [combined]


def _find_runs(output_dir: Path) -> list[Path]:
    if (output_dir / "metrics.json").exists() or (output_dir / "manifest.json").exists():
        return [output_dir]
    return sorted(p.parent for p in output_dir.glob("*/manifest.json"))


def make_report(output_dir, n_cases: int = 2) -> dict:
    """Write plots for every run under ``output_dir`` and return a summary.

    Missing pieces are reported as warnings rather than errors, so partial or
    empty directories still produce whatever can be drawn.
    """
    from .experiment import ROW_LABELS, ROW_ORDER, collect_reports, load_domains
    from .config import load_config
    from .metrics import predict_masks
    from .models import load_checkpoint

    output_dir = Path(output_dir)
    summary = {"runs": {}, "warnings": []}

    def warn(msg):
        summary["warnings"].append(msg)
        warnings.warn(msg, stacklevel=2)

    runs = _find_runs(output_dir) if output_dir.is_dir() else []
    if not runs:
        warn(f"no completed runs under {output_dir}")
        if output_dir.is_dir():
            (output_dir / "report_summary.json").write_text(json.dumps(summary, indent=1))
        return summary

    for run in runs:
        reports = collect_reports(run)
        missing = [s for s in ROW_ORDER if s not in reports]
        if missing:
            warn(f"{run.name}: missing stage outputs {missing}")
        plots = run / "plots"
        entry = {"stages": list(reports), "files": []}
        f = plot_loss_curves(reports, plots / "loss_curves.png")
        if f:
            entry["files"].append(str(f))
        rows = {ROW_LABELS[s]: {"dice": reports[s].metrics.summary()["dice"]["avg"],
                                "asd": reports[s].metrics.summary()["asd"]["avg"]}
                for s in ROW_ORDER if s in reports and reports[s].metrics is not None}
        f = plot_ablation_bars(rows, plots / "ablation_bars.png")
        if f:
            entry["files"].append(str(f))
        entry["rows"] = rows

        cfg_path = run / "config.yaml"
        ckpts = {s: run / s / "model.ckpt" for s in ROW_ORDER if (run / s / "model.ckpt").exists()}
        if cfg_path.exists() and ckpts:
            try:
                cfg = load_config(cfg_path)
                _, target = load_domains(cfg)
                test = target.test
                idx = list(range(min(n_cases, len(test))))
                preds = {s: predict_masks(load_checkpoint(p), test.images()[idx]) for s, p in ckpts.items()}
                for i in idx:
                    s = test[i]
                    files = save_overlay_panel(s.image, s.mask, {k: v[i] for k, v in preds.items()},
                                               plots / "overlays", s.id)
                    entry["files"] += [str(p) for p in files]
            except Exception as e:  # partial report beats none
                warn(f"{run.name}: overlays skipped ({type(e).__name__}: {e})")
        summary["runs"][str(run)] = entry

    (output_dir / "report_summary.json").write_text(json.dumps(summary, indent=1))
    return summary
