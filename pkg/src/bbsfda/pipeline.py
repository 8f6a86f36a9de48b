"""Source training and the two distillation stages.

Stage I and Stage II never receive the source model. Stage I consumes a
:class:`~bbsfda.blackbox.PseudoLabelCache` and Stage II consumes the Stage-I
model, so the only path from source parameters to the adapted model runs
through the black-box predictor's soft outputs.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import augment
from .augment import AugmentationPolicy
from .blackbox import PseudoLabelCache
from .data import Dataset, check_soft_labels
from .errors import ConfigError, InputError, TrainingError
from .losses import cross_entropy, kl_distillation
from .metrics import MetricReport, evaluate
from .models import ModelSpec, SegmentationModel, build_model, images_to_tensor, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings for one stage."""

    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    method: str = "adam"

    def validate(self) -> list[str]:
        problems = []
        if self.method != "adam":
            problems.append(f"unsupported optimizer {self.method!r}")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        return problems


SOURCE_DEFAULTS = OptimizerConfig(epochs=200)
STAGE_DEFAULTS = OptimizerConfig(epochs=100)


@dataclass
class StageReport:
    stage: str
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    query_count: int = 0
    metrics: Optional[MetricReport] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "metrics"}
        d["metrics"] = None if self.metrics is None else self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        d = dict(d)
        m = d.pop("metrics", None)
        rep = cls(**d)
        rep.metrics = None if m is None else MetricReport.from_dict(m)
        return rep

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "StageReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_spec(spec: ModelSpec, ds: Dataset):
    problems = []
    if spec.num_classes != ds.num_classes:
        problems.append(f"model has {spec.num_classes} classes, data has {ds.num_classes}")
    if spec.in_channels != ds.image_shape[2]:
        problems.append(f"model takes {spec.in_channels} channels, data has {ds.image_shape[2]}")
    if problems:
        raise ConfigError("; ".join(problems))


def _fit(stage: str, model: SegmentationModel, opt: OptimizerConfig, n: int,
         step_loss: Callable[[np.ndarray, np.random.Generator], torch.Tensor],
         out_dir=None, eval_set: Optional[Dataset] = None) -> StageReport:
    """Shared minibatch loop. ``step_loss(indices, rng)`` returns the batch loss."""
    problems = opt.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    order_ss, aug_ss = np.random.SeedSequence(opt.seed).spawn(2)
    order_rng, aug_rng = np.random.default_rng(order_ss), np.random.default_rng(aug_ss)
    torch.manual_seed(opt.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.learning_rate)
    report = StageReport(stage)
    best, best_state = np.inf, None
    t0 = time.perf_counter()
    model.train()
    for epoch in range(opt.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for i in range(0, n, opt.batch_size):
            loss = step_loss(perm[i:i + opt.batch_size], aug_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{stage}: non-finite loss {value} at epoch {epoch}, step {len(losses)}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(value)
        report.step_losses.extend(losses)
        report.epoch_losses.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d loss %.5f", stage, epoch + 1, opt.epochs, report.epoch_losses[-1])
        if report.epoch_losses[-1] < best:
            best, best_state = report.epoch_losses[-1], copy.deepcopy(model.state_dict())
    model.eval()
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.checkpoint = str(save_checkpoint(model, out_dir / "model.ckpt", {"stage": stage}))
        snapshot = copy.deepcopy(model)
        snapshot.load_state_dict(best_state)
        report.best_checkpoint = str(save_checkpoint(snapshot, out_dir / "best.ckpt",
                                                     {"stage": stage, "loss": best}))
    if eval_set is not None:
        report.metrics = evaluate(model, eval_set)
    return report


def _probs(model: SegmentationModel, x: torch.Tensor) -> torch.Tensor:
    p = model.probs(x)
    check_soft_labels(p)
    return p


def train_source(source_train: Dataset, spec: ModelSpec, opt: OptimizerConfig = SOURCE_DEFAULTS,
                 out_dir=None, eval_set: Optional[Dataset] = None):
    """Supervised pixel-wise cross-entropy training on labeled source data."""
    if not source_train.labeled:
        raise InputError("source training needs labeled data")
    _check_spec(spec, source_train)
    model = build_model(spec)
    x_all = images_to_tensor(source_train.images())
    y_all = torch.from_numpy(source_train.masks())

    def step(idx, _rng):
        return cross_entropy(_probs(model, x_all[idx]), y_all[idx])

    report = _fit("source", model, opt, len(source_train), step, out_dir, eval_set)
    return model, report


def train_stage1(cache: PseudoLabelCache, target_train: Dataset, target_spec: ModelSpec,
                 opt: OptimizerConfig = STAGE_DEFAULTS, out_dir=None, eval_set: Optional[Dataset] = None):
    """Fit a freshly built target model to the cached soft labels on raw target images."""
    missing = cache.missing(target_train)
    if missing:
        raise ConfigError(f"pseudo-label cache lacks {len(missing)} samples, e.g. {missing[:3]}")
    _check_spec(target_spec, target_train)
    model = build_model(target_spec)
    x_all = images_to_tensor(target_train.images())
    soft = np.stack([cache[i] for i in target_train.ids])
    if soft.shape[-1] != target_spec.num_classes:
        raise ConfigError(f"cached labels have {soft.shape[-1]} classes, model has {target_spec.num_classes}")
    check_soft_labels(soft)
    y_all = images_to_tensor(soft)

    def step(idx, _rng):
        return kl_distillation(y_all[idx], _probs(model, x_all[idx]))

    report = _fit("stage1", model, opt, len(target_train), step, out_dir, eval_set)
    report.query_count = cache.query_count
    return model, report


def train_stage2(teacher: SegmentationModel, target_train: Dataset, student_spec: ModelSpec,
                 weak: AugmentationPolicy, strong: AugmentationPolicy,
                 opt: OptimizerConfig = STAGE_DEFAULTS, use_strong_aug: bool = True,
                 out_dir=None, eval_set: Optional[Dataset] = None):
    """Distill a fresh student from the frozen Stage-I teacher across two views.

    Every step the teacher labels a weakly augmented view and the student is
    fit to those labels on a strongly augmented view of the same images (or on
    the raw images when ``use_strong_aug`` is false).
    """
    if teacher.spec.num_classes != student_spec.num_classes:
        raise ConfigError("teacher and student disagree on the number of classes")
    if weak.kind != "weak" or strong.kind != "strong":
        raise ConfigError("stage 2 needs a weak and a strong augmentation policy")
    _check_spec(student_spec, target_train)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = build_model(student_spec)
    images = target_train.images()

    def step(idx, rng):
        batch = images[idx]
        weak_rng, strong_rng = rng.spawn(2)
        with torch.no_grad():
            soft = _probs(teacher, images_to_tensor(augment.apply_batch(weak, batch, weak_rng)))
        view = augment.apply_batch(strong, batch, strong_rng) if use_strong_aug else batch
        return kl_distillation(soft, _probs(student, images_to_tensor(view)))

    stage = "stage2_aug" if use_strong_aug else "stage2_noaug"
    report = _fit(stage, student, opt, len(target_train), step, out_dir, eval_set)
    report.query_count = 0
    return student, report
