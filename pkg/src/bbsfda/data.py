"""Images, label maps, datasets and the synthetic two-domain benchmark.

Arrays follow the channels-last layout used on disk: images are ``(H, W, C)``
float32 in [0, 1], masks are ``(H, W)`` integer class indices and soft label
maps are ``(H, W, K)`` per-pixel probability vectors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, InputError

SOFT_LABEL_TOL = 1e-5
SOURCE_NOISE_STD = 0.02


def as_image(values) -> np.ndarray:
    """Validate and return an image as a float32 ``(H, W, C)`` array."""
    img = np.asarray(values, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or min(img.shape) <= 0:
        raise InputError(f"image must be (H, W, C) with positive sizes, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return img


def check_mask(mask, num_classes: int, shape: Optional[tuple] = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(mask == np.round(mask)):
            raise DataError("mask has non-integer values")
    mask = mask.astype(np.int64)
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise DataError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise DataError(f"mask contains class index outside [0, {num_classes - 1}]")
    return mask


def check_soft_labels(probs, tol: float = SOFT_LABEL_TOL) -> None:
    """Raise ``InputError`` unless every pixel is a probability vector.

    Works on numpy arrays or torch tensors; the class axis is the last one for
    numpy maps and axis 1 for ``(N, K, H, W)`` tensors.
    """
    if hasattr(probs, "detach"):
        p = probs.detach()
        total = p.sum(dim=1) if p.ndim == 4 else p.sum(dim=-1)
        bad_sum = float((total - 1).abs().max()) > tol
        bad_range = bool((p < 0).any() or (p > 1).any() or not p.isfinite().all())
    else:
        p = np.asarray(probs)
        bad_sum = float(np.abs(p.sum(axis=-1) - 1).max()) > tol
        bad_range = bool((p < 0).any() or (p > 1).any() or not np.isfinite(p).all())
    if bad_sum or bad_range:
        raise InputError("soft label map is not row-stochastic")


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    num_classes: int
    domain: str = "source"
    split: str = "train"

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids")
        for s in self.samples:
            s.image.setflags(write=False)
            if s.mask is not None:
                s.mask.setflags(write=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labeled(self) -> bool:
        return bool(self.samples) and all(s.mask is not None for s in self.samples)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.samples[0].image.shape

    def unlabeled(self) -> "Dataset":
        """Copy with masks dropped, as handed to the adaptation stages."""
        samples = tuple(Sample(s.id, s.image) for s in self.samples)
        return dataclasses.replace(self, samples=samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        if not self.labeled:
            raise InputError("dataset carries no labels")
        return np.stack([s.mask for s in self.samples])


def make_dataset(images, masks, num_classes, domain="source", split="train", prefix=None) -> Dataset:
    prefix = prefix or f"{domain[:3]}-{split}"
    masks = [None] * len(images) if masks is None else masks
    samples = []
    for i, (img, m) in enumerate(zip(images, masks)):
        img = as_image(img)
        if m is not None:
            m = check_mask(m, num_classes, img.shape)
        samples.append(Sample(f"{prefix}-{i:04d}", img, m))
    return Dataset(tuple(samples), num_classes, domain, split)


@dataclass(frozen=True)
class DomainData:
    train: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """Scene family plus the photometric shift separating target from source.

    Scenes are nested ellipses (class ``k`` sits inside class ``k - 1``) on a
    textured background. The target rendering of a scene is its source
    rendering blurred, contrast-scaled about 0.5, offset and re-noised.
    ``offset_jitter`` and ``contrast_jitter`` vary offset and contrast per
    image (uniform in ``offset +- offset_jitter`` and
    ``contrast_scale * (1 +- contrast_jitter)``), mimicking scan-to-scan
    acquisition differences within the target domain.
    """

    shape_count_range: tuple[int, int] = (1, 2)
    num_classes: int = 3
    intensity_offset: float = 0.0
    blur_sigma: float = 0.0
    contrast_scale: float = 1.0
    noise_std: float = 0.0
    offset_jitter: float = 0.0
    contrast_jitter: float = 0.0
    scan_gamma_jitter: float = 0.0
    seed: int = 0
    channels: int = 1

    def validate(self) -> None:
        problems = []
        lo, hi = self.shape_count_range
        if lo < 1 or hi < lo:
            problems.append(f"shape_count_range must satisfy 1 <= lo <= hi, got {self.shape_count_range}")
        if self.num_classes < 2:
            problems.append("num_classes must be at least 2")
        if self.blur_sigma < 0:
            problems.append("blur_sigma must be >= 0")
        if self.contrast_scale <= 0:
            problems.append("contrast_scale must be > 0")
        if self.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if self.channels < 1:
            problems.append("channels must be >= 1")
        if self.offset_jitter < 0:
            problems.append("offset_jitter must be >= 0")
        if self.scan_gamma_jitter < 0:
            problems.append("scan_gamma_jitter must be >= 0")
        if not 0 <= self.contrast_jitter < 1:
            problems.append("contrast_jitter must be in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def is_identity(self) -> bool:
        return (self.intensity_offset == 0 and self.blur_sigma == 0 and self.contrast_scale == 1
                and self.noise_std == 0 and self.offset_jitter == 0 and self.contrast_jitter == 0)


# foreground intensities ramp up with nesting depth
_BG_LEVEL = 0.25
_FG_SPAN = (0.5, 0.85)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def render_scene(rng: np.random.Generator, size: int, num_classes: int,
                 shape_count_range=(1, 2), channels: int = 1):
    """Draw one source-domain scene. Returns (image float64 (H, W, C), mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    n_shapes = int(rng.integers(shape_count_range[0], shape_count_range[1] + 1))
    for _ in range(n_shapes):
        r = rng.uniform(0.16, 0.28) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        ry, rx = r * rng.uniform(0.8, 1.0), r * rng.uniform(0.8, 1.0)
        theta = rng.uniform(0, np.pi)
        for k in range(1, num_classes):
            region = _ellipse(yy, xx, cy, cx, ry, rx, theta)
            mask[region & (mask < k)] = k
            ry, rx = ry * rng.uniform(0.45, 0.65), rx * rng.uniform(0.45, 0.65)
            cy += rng.uniform(-0.15, 0.15) * ry
            cx += rng.uniform(-0.15, 0.15) * rx

    levels = np.concatenate([[_BG_LEVEL], np.linspace(*_FG_SPAN, num_classes - 1)])
    levels = levels + rng.uniform(-0.04, 0.04, size=num_classes)
    base = levels[mask]
    # low-frequency background texture
    fy, fx = rng.uniform(0.5, 2.5, size=2) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.04 * np.sin(fy * yy + phase[0]) * np.cos(fx * xx + phase[1])
    img = ndimage.gaussian_filter(base, 0.6) + texture
    img = img[:, :, None] + SOURCE_NOISE_STD * rng.standard_normal((size, size, channels))
    return np.clip(img, 0.0, 1.0), mask


def apply_shift(image: np.ndarray, spec: SyntheticShiftSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.is_identity:
        return image
    out = image
    if spec.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(spec.blur_sigma, spec.blur_sigma, 0))
    contrast, offset = spec.contrast_scale, spec.intensity_offset
    # drawn only when enabled so jitter-free shifts keep their noise stream
    if spec.contrast_jitter > 0:
        contrast *= 1 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    if spec.offset_jitter > 0:
        offset += rng.uniform(-spec.offset_jitter, spec.offset_jitter)
    out = (out - 0.5) * contrast + 0.5 + offset
    if spec.noise_std > 0:
        out = out + spec.noise_std * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def _render_split(spec, split, n, size, offset):
    src, tgt = [], []
    for i in range(n):
        scene_ss = np.random.SeedSequence([spec.seed, offset + i])
        scene_rng, shift_rng = (np.random.default_rng(s) for s in scene_ss.spawn(2))
        img, mask = render_scene(scene_rng, size, spec.num_classes, spec.shape_count_range, spec.channels)
        if spec.scan_gamma_jitter > 0:
            img = img ** np.exp(scene_rng.uniform(-spec.scan_gamma_jitter, spec.scan_gamma_jitter))
        shifted = apply_shift(img, spec, shift_rng)
        src.append(Sample(f"src-{split}-{i:04d}", img.astype(np.float32), mask))
        tgt.append(Sample(f"tgt-{split}-{i:04d}", shifted.astype(np.float32), mask.copy()))
    k = spec.num_classes
    return (Dataset(tuple(src), k, "source", split), Dataset(tuple(tgt), k, "target", split))


def generate_synthetic_pair(spec: SyntheticShiftSpec, n_train: int, n_test: int,
                            image_size: int) -> tuple[DomainData, DomainData]:
    """Render paired source/target benchmark domains.

    Sample ``i`` of a target split is the shifted rendering of the same scene as
    sample ``i`` of the matching source split. Target masks are kept for
    held-out evaluation only.
    """
    spec.validate()
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    if image_size < 16:
        raise ConfigError("image_size must be >= 16")
    src_train, tgt_train = _render_split(spec, "train", n_train, image_size, 0)
    # test scenes are drawn from a disjoint region of the seed space
    src_test, tgt_test = _render_split(spec, "test", n_test, image_size, 1_000_000)
    return DomainData(src_train, src_test), DomainData(tgt_train, tgt_test)


# ---------------------------------------------------------------------------
# resizing


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    if h <= 0 or w <= 0:
        raise InputError("target size must be positive")
    img = np.asarray(image)
    H, W = img.shape[:2]
    if (H, W) == (h, w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, wy = coords(H, h)
    x0, x1, wx = coords(W, w)
    wy = wy[:, None, None] if img.ndim == 3 else wy[:, None]
    wx = wx[None, :, None] if img.ndim == 3 else wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor resize; output pixel centers map back to source pixels."""
    if h <= 0 or w <= 0:
        raise InputError("target size must be positive")
    mask = np.asarray(mask)
    H, W = mask.shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return mask[rows][:, cols]


def resize_dataset(ds: Dataset, h: int, w: int) -> Dataset:
    if ds.image_shape[:2] == (h, w):
        return ds
    samples = tuple(
        Sample(s.id, np.clip(resize(s.image, h, w), 0, 1),
               None if s.mask is None else resize_mask(s.mask, h, w))
        for s in ds.samples)
    return dataclasses.replace(ds, samples=samples)


# ---------------------------------------------------------------------------
# on-disk datasets: <root>/images/<id>.png and <root>/masks/<id>.png


_PALETTE = [0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0, 255, 0, 255]


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.labeled:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        img = np.round(s.image * 255).astype(np.uint8)
        img = img[:, :, 0] if img.shape[2] == 1 else img
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            m8 = np.ascontiguousarray(s.mask, dtype=np.uint8)
            m = Image.frombytes("P", (m8.shape[1], m8.shape[0]), m8.tobytes())
            m.putpalette(_PALETTE + [0] * (768 - len(_PALETTE)))
            m.save(root / "masks" / f"{s.id}.png")
    return root


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if mode in ("P", "PA"):
        raise DataError(f"{path.name}: palette images are not supported as inputs")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.float64)
    elif np.issubdtype(arr.dtype, np.integer):
        wide = arr.dtype == np.uint16 or (arr.dtype != np.uint8 and arr.max() > 255)
        arr = arr.astype(np.float64) / (65535.0 if wide else 255.0)
    else:
        arr = arr.astype(np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32)


def load_dataset(path, num_classes: int, domain: str = "source", split: str = "train") -> Dataset:
    """Read ``images/*.png`` (and ``masks/*.png`` when present) under ``path``.

    Integer images are rescaled by their dtype range into [0, 1]. Masks must
    hold class indices below ``num_classes``.
    """
    root = Path(path)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"{img_dir} does not exist")
    mask_dir = root / "masks"
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        image = _read_image(img_path)
        mask = None
        mask_path = mask_dir / img_path.name
        if mask_path.exists():
            with Image.open(mask_path) as m:
                mask = np.asarray(m)
            if mask.ndim != 2:
                raise DataError(f"{mask_path.name}: mask must be single-channel")
            if mask.shape != image.shape[:2]:
                raise DataError(f"{img_path.stem}: image {image.shape[:2]} and mask {mask.shape} differ")
            mask = check_mask(mask, num_classes, image.shape)
        elif mask_dir.is_dir():
            raise DataError(f"{img_path.stem}: missing mask")
        samples.append(Sample(img_path.stem, image, mask))
    if not samples:
        raise DataError(f"no images found under {img_dir}")
    return Dataset(tuple(samples), num_classes, domain, split)


def check_disjoint(train: Dataset, test: Dataset) -> None:
    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise DataError(f"train/test overlap: {sorted(overlap)[:5]}")
