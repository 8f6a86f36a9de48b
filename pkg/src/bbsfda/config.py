"""Declarative experiment configuration (YAML) with dotted-key overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugmentationPolicy
from .data import SyntheticShiftSpec
from .errors import ConfigError
from .models import ARCHITECTURES, ModelSpec
from .pipeline import OptimizerConfig

STAGES = ("source", "stage1", "stage2")
STAGE2_VARIANTS = ("noaug", "aug")
OUTPUT_ROOT_ENV = "BBSFDA_OUTPUT_ROOT"


@dataclass
class DataConfig:
    """Synthetic benchmark settings, or ``root`` pointing at a saved dataset tree.

    A saved tree has ``{source,target}/{train,test}/images/*.png`` plus masks.
    """

    root: Optional[str] = None
    n_train: int = 200
    n_test: int = 50
    image_size: int = 64
    shift: SyntheticShiftSpec = field(default_factory=SyntheticShiftSpec)


@dataclass
class ModelConfig:
    arch: str = "small-encdec"
    width_factor: int = 1
    depth: int = 2


@dataclass
class OptimizerSet:
    source: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=200))
    stage1: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=100))
    stage2: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=100))


@dataclass
class AugmentationConfig:
    weak: AugmentationPolicy = field(default_factory=AugmentationPolicy.weak)
    strong: AugmentationPolicy = field(default_factory=AugmentationPolicy.strong)


@dataclass
class ExperimentConfig:
    """Full description of a run.

    A single master ``seed`` fixes every random stream: the data seed, one
    init seed per model and one seed per training stage are derived from it.
    """

    name: str = "experiment"
    seed: int = 0
    output_dir: Optional[str] = None
    stages: list = field(default_factory=lambda: list(STAGES))
    stage2_variants: list = field(default_factory=lambda: ["aug"])
    source_checkpoint: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    source_model: ModelConfig = field(default_factory=ModelConfig)
    target_model: ModelConfig = field(default_factory=ModelConfig)
    student_model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerSet = field(default_factory=OptimizerSet)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    # derived seeds

    def _derived(self, slot: int) -> int:
        return 1000 * self.seed + slot

    @property
    def data_seed(self) -> int:
        return self.seed

    def shift_spec(self) -> SyntheticShiftSpec:
        return dataclasses.replace(self.data.shift, seed=self.data_seed)

    def model_spec(self, role: str) -> ModelSpec:
        slot = {"source_model": 1, "target_model": 2, "student_model": 3}[role]
        m = getattr(self, role)
        return ModelSpec(arch=m.arch, width_factor=m.width_factor, depth=m.depth,
                         in_channels=self.data.shift.channels,
                         num_classes=self.data.shift.num_classes, init_seed=self._derived(slot))

    def optimizer_for(self, stage: str) -> OptimizerConfig:
        slot = {"source": 11, "stage1": 12, "stage2": 13}[stage]
        return dataclasses.replace(getattr(self.optimizer, stage), seed=self._derived(slot))

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.name

    # validation and serialization

    def problems(self) -> list[str]:
        out = []
        for s in self.stages:
            if s not in STAGES:
                out.append(f"unknown stage {s!r}")
        if list(self.stages) != [s for s in STAGES if s in self.stages]:
            out.append(f"stages must be listed in order {list(STAGES)}")
        if not self.stage2_variants or any(v not in STAGE2_VARIANTS for v in self.stage2_variants):
            out.append(f"stage2_variants must be a non-empty subset of {list(STAGE2_VARIANTS)}")
        try:
            self.data.shift.validate()
        except ConfigError as e:
            out.append(f"data.shift: {e}")
        d = self.data
        if d.n_train < 1 or d.n_test < 1:
            out.append("data.n_train and data.n_test must be >= 1")
        if d.image_size < 16:
            out.append("data.image_size must be >= 16")
        for role in ("source_model", "target_model", "student_model"):
            m = getattr(self, role)
            if m.arch not in ARCHITECTURES:
                out.append(f"{role}.arch: unknown architecture {m.arch!r}")
            if not 1 <= m.depth <= 4:
                out.append(f"{role}.depth must be between 1 and 4")
            elif d.root is None and d.image_size % 2 ** m.depth:
                out.append(f"{role}: image_size must be divisible by 2**depth")
            if m.width_factor < 1:
                out.append(f"{role}.width_factor must be >= 1")
        for stage in STAGES:
            out += [f"optimizer.{stage}: {p}" for p in getattr(self.optimizer, stage).validate()]
        if self.augmentation.weak.kind != "weak":
            out.append("augmentation.weak must have kind 'weak'")
        if self.augmentation.strong.kind != "strong":
            out.append("augmentation.strong must have kind 'strong'")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["shift"]["shape_count_range"] = list(self.data.shift.shape_count_range)
        d["data"]["shift"].pop("seed")
        for stage in STAGES:
            d["optimizer"][stage].pop("seed")
        d["augmentation"] = {"weak": self.augmentation.weak.to_dict(),
                             "strong": self.augmentation.strong.to_dict()}
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw or {})
        try:
            data = raw.pop("data", {}) or {}
            shift = data.pop("shift", {}) or {}
            if "shape_count_range" in shift:
                shift["shape_count_range"] = tuple(shift["shape_count_range"])
            shift.pop("seed", None)
            data_cfg = DataConfig(shift=SyntheticShiftSpec(**shift), **data)
            models = {r: ModelConfig(**(raw.pop(r, {}) or {}))
                      for r in ("source_model", "target_model", "student_model")}
            opt_raw = raw.pop("optimizer", {}) or {}
            defaults = OptimizerSet()
            opts = {}
            for stage in STAGES:
                o = dict(opt_raw.pop(stage, {}) or {})
                o.pop("seed", None)
                opts[stage] = dataclasses.replace(getattr(defaults, stage), **o)
            if opt_raw:
                raise ConfigError(f"unknown optimizer stages: {sorted(opt_raw)}")
            aug_raw = raw.pop("augmentation", {}) or {}
            aug = AugmentationConfig(
                weak=AugmentationPolicy.from_dict({"kind": "weak", "p": 1.0, **(aug_raw.pop("weak", {}) or {})}),
                strong=AugmentationPolicy.from_dict({"kind": "strong", "p": 0.5, **(aug_raw.pop("strong", {}) or {})}))
            if aug_raw:
                raise ConfigError(f"unknown augmentation keys: {sorted(aug_raw)}")
            return cls(data=data_cfg, optimizer=OptimizerSet(**opts), augmentation=aug, **models, **raw)
        except TypeError as e:
            raise ConfigError(f"bad configuration: {e}") from e


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings in order; values are parsed as YAML."""
    raw = copy.deepcopy(raw or {})
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        raw.setdefault("name", Path(path).stem)
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides)).validate()


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
