"""Dice score and average surface distance, per case and aggregated."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .data import Dataset, check_soft_labels
from .errors import InputError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_pair(prediction, truth):
    prediction, truth = np.asarray(prediction), np.asarray(truth)
    if prediction.shape != truth.shape:
        raise InputError(f"prediction {prediction.shape} and truth {truth.shape} differ in shape")
    return prediction, truth


def dice(prediction, truth, class_id: int) -> float:
    """Dice overlap of one class in percent; 100 when the class is absent from both."""
    prediction, truth = _check_pair(prediction, truth)
    p, t = prediction == class_id, truth == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int((p & t).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` removed by one 4-connected erosion; the image edge counts as outside."""
    region = np.asarray(region, dtype=bool)
    return region & ~ndimage.binary_erosion(region, structure=_CROSS, border_value=0)


def average_surface_distance(prediction, truth, class_id: int) -> float:
    """Symmetric mean boundary distance in pixels; NaN when either structure is empty."""
    prediction, truth = _check_pair(prediction, truth)
    p, t = prediction == class_id, truth == class_id
    if not p.any() or not t.any():
        return math.nan
    bp, bt = boundary(p), boundary(t)
    to_t = ndimage.distance_transform_edt(~bt)
    to_p = ndimage.distance_transform_edt(~bp)
    return 0.5 * (float(to_t[bp].mean()) + float(to_p[bt].mean()))


@dataclass
class MetricReport:
    """Per-case, per-foreground-class DSC (%) and ASD (pixels).

    ``asd`` holds NaN where the distance is undefined (empty structure); those
    entries are left out of every aggregate and counted in ``asd_undefined``.
    Standard deviations are population (ddof=0) over cases.
    """

    class_ids: list[int]
    case_ids: list[str]
    dice: np.ndarray
    asd: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class{c}" for c in self.class_ids]

    @property
    def n_cases(self) -> int:
        return len(self.case_ids)

    @property
    def asd_undefined(self) -> int:
        return int(np.isnan(self.asd).sum())

    def case_mean_dice(self) -> np.ndarray:
        return self.dice.mean(axis=1)

    def case_mean_asd(self) -> np.ndarray:
        out = np.full(self.n_cases, np.nan)
        ok = ~np.isnan(self.asd).all(axis=1)
        out[ok] = np.nanmean(self.asd[ok], axis=1)
        return out

    @staticmethod
    def _mean_std(values) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return math.nan, math.nan
        return float(v.mean()), float(v.std())

    @property
    def mean_dice(self) -> float:
        return self._mean_std(self.case_mean_dice())[0]

    @property
    def mean_asd(self) -> float:
        return self._mean_std(self.case_mean_asd())[0]

    def summary(self) -> dict:
        out = {"cases": self.n_cases, "asd_undefined": self.asd_undefined, "dice": {}, "asd": {}}
        for j, name in enumerate(self.class_names):
            out["dice"][name] = self._mean_std(self.dice[:, j])
            out["asd"][name] = self._mean_std(self.asd[:, j])
        out["dice"]["avg"] = self._mean_std(self.case_mean_dice())
        out["asd"]["avg"] = self._mean_std(self.case_mean_asd())
        return out

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if math.isnan(x) else float(x) for x in row] for row in a]

        return {"class_ids": self.class_ids, "class_names": self.class_names,
                "case_ids": self.case_ids, "dice": clean(self.dice), "asd": clean(self.asd),
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        def arr(rows):
            return np.array([[np.nan if x is None else x for x in row] for row in rows],
                            dtype=np.float64).reshape(len(rows), len(d["class_ids"]))

        return cls(d["class_ids"], d["case_ids"], arr(d["dice"]), arr(d["asd"]), d["class_names"])


def _cell(mean_std) -> str:
    m, s = mean_std
    return "-" if math.isnan(m) else f"{m:.2f}±{s:.2f}"


def format_table(reports: dict, sep: str = " | ") -> str:
    """Delimited table: one row per named report, DSC then ASD column groups."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    cols = first.class_names + ["avg"]
    header = ["method"] + [f"DSC[%] {c}" for c in cols] + [f"ASD[px] {c}" for c in cols]
    lines = [sep.join(header)]
    for name, rep in reports.items():
        s = rep.summary()
        lines.append(sep.join([name] + [_cell(s["dice"][c]) for c in cols]
                              + [_cell(s["asd"][c]) for c in cols]))
    return "\n".join(lines) + "\n"


def predict_masks(model_or_predictor, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax label maps for ``(N, H, W, C)`` images; ties go to the lowest class."""
    from .models import SegmentationModel, images_to_tensor

    if isinstance(model_or_predictor, SegmentationModel):
        model = model_or_predictor
        was_training = model.training
        model.eval()
        dtype = next(model.parameters()).dtype
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                p = model.probs(images_to_tensor(images[i:i + batch_size], dtype))
                check_soft_labels(p)
                out.append(p.argmax(dim=1).numpy())
        model.train(was_training)
        return np.concatenate(out)
    return np.stack([np.argmax(model_or_predictor(img), axis=-1) for img in images])


def evaluate_masks(predictions, truths, num_classes: int, case_ids=None, class_names=None) -> MetricReport:
    class_ids = list(range(1, num_classes))
    n = len(truths)
    d = np.zeros((n, len(class_ids)))
    a = np.zeros((n, len(class_ids)))
    for i, (p, t) in enumerate(zip(predictions, truths)):
        for j, c in enumerate(class_ids):
            d[i, j] = dice(p, t, c)
            a[i, j] = average_surface_distance(p, t, c)
    case_ids = list(case_ids) if case_ids is not None else [str(i) for i in range(n)]
    return MetricReport(class_ids, case_ids, d, a, list(class_names or []))


def evaluate(model_or_predictor, test: Dataset, class_names=None) -> MetricReport:
    """DSC/ASD of argmax predictions for every foreground class of ``test``."""
    if not test.labeled:
        raise InputError("evaluation needs a labeled dataset")
    preds = predict_masks(model_or_predictor, test.images())
    return evaluate_masks(preds, test.masks(), test.num_classes, test.ids, class_names)
