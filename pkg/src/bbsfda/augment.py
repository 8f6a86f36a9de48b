"""Photometric weak/strong augmentation policies.

Every transform acts on intensities only, so a sample's mask is valid for
all of its augmented views.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

Range = tuple[float, float]


@dataclass(frozen=True)
class AugmentationPolicy:
    """Parameter ranges are sampled uniformly once per application.

    The weak kind only adds Gaussian noise. The strong kind runs
    blur, contrast, brightness and gamma in that order, each with probability ``p``.
    """

    kind: str = "weak"
    noise_std: Range = (0.0, 0.05)
    blur_sigma: Range = (0.5, 2.0)
    contrast: Range = (0.65, 1.5)
    brightness: Range = (-0.1, 0.1)
    gamma: Range = (0.7, 1.5)
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        for f in ("noise_std", "blur_sigma", "contrast", "brightness", "gamma"):
            lo, hi = getattr(self, f)
            if lo > hi:
                raise ConfigError(f"{f}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, f, (float(lo), float(hi)))
        if self.noise_std[0] < 0 or self.blur_sigma[0] < 0:
            raise ConfigError("noise_std and blur_sigma must be non-negative")
        if self.contrast[0] <= 0 or self.gamma[0] <= 0:
            raise ConfigError("contrast and gamma must be positive")
        if not 0 <= self.p <= 1:
            raise ConfigError("p must be a probability")

    @classmethod
    def weak(cls, **overrides) -> "AugmentationPolicy":
        return cls(kind="weak", p=1.0, **overrides)

    @classmethod
    def strong(cls, **overrides) -> "AugmentationPolicy":
        return cls(kind="strong", p=0.5, **overrides)

    @classmethod
    def identity(cls, kind: str) -> "AugmentationPolicy":
        return cls(kind=kind, noise_std=(0, 0), blur_sigma=(0, 0), contrast=(1, 1),
                   brightness=(0, 0), gamma=(1, 1), p=1.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in d.items()})


def apply(policy: AugmentationPolicy, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    if policy.kind == "weak":
        std = rng.uniform(*policy.noise_std)
        if std > 0:
            out = out + std * rng.standard_normal(out.shape, dtype=np.float32)
        return np.clip(out, 0.0, 1.0)

    if rng.random() < policy.p:
        sigma = rng.uniform(*policy.blur_sigma)
        if sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0))
    if rng.random() < policy.p:
        c = rng.uniform(*policy.contrast)
        if c != 1:
            mean = out.mean()
            out = (out - mean) * c + mean
    if rng.random() < policy.p:
        delta = rng.uniform(*policy.brightness)
        if delta != 0:
            out = out + delta
    out = np.clip(out, 0.0, 1.0)
    if rng.random() < policy.p:
        g = rng.uniform(*policy.gamma)
        if g != 1:
            out = out ** g
    return out.astype(np.float32, copy=False)


def sample_two_views(image, weak: AugmentationPolicy, strong: AugmentationPolicy,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Weak and strong views of one image from independent child streams of ``rng``."""
    if weak.kind != "weak" or strong.kind != "strong":
        raise ConfigError("sample_two_views needs a weak and a strong policy, in that order")
    weak_rng, strong_rng = rng.spawn(2)
    return apply(weak, image, weak_rng), apply(strong, image, strong_rng)


def apply_batch(policy: AugmentationPolicy, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([apply(policy, img, r) for img, r in zip(images, rng.spawn(len(images)))])
