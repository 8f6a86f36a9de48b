"""Small U-shaped encoder-decoder segmentation networks and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import as_image, check_soft_labels
from .errors import CheckpointError, ConfigError, InputError

CHECKPOINT_FORMAT = "bbsfda-checkpoint/1"

# base channel count and convs per block for each architecture
ARCHITECTURES = {
    "small-encdec": (16, 2),
    "tiny-encdec": (8, 1),
}


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "small-encdec"
    width_factor: int = 1
    depth: int = 2
    in_channels: int = 1
    num_classes: int = 3
    init_seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {sorted(ARCHITECTURES)}")
        if not 1 <= self.depth <= 4:
            raise ConfigError("depth must be between 1 and 4")
        if self.width_factor < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("width_factor, in_channels >= 1 and num_classes >= 2 required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


def _block(c_in, c_out, n_convs):
    layers = []
    for i in range(n_convs):
        layers += [nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, padding=1, bias=False),
                   nn.BatchNorm2d(c_out),
                   nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class SegmentationModel(nn.Module):
    """U-Net style network returning per-pixel class logits ``(N, K, H, W)``.

    Input height and width must be divisible by ``2 ** spec.depth``.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        base, n_convs = ARCHITECTURES[spec.arch]
        widths = [base * spec.width_factor * 2 ** i for i in range(spec.depth + 1)]
        self.encoders = nn.ModuleList()
        c_in = spec.in_channels
        for w in widths:
            self.encoders.append(_block(c_in, w, n_convs))
            c_in = w
        self.decoders = nn.ModuleList()
        for w_skip, w_deep in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.decoders.append(_block(w_skip + w_deep, w_skip, n_convs))
        self.head = nn.Conv2d(widths[0], spec.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)


def build_model(spec: ModelSpec) -> SegmentationModel:
    """Fresh model whose parameters depend only on ``spec`` (incl. ``init_seed``)."""
    model = SegmentationModel(spec)
    g = torch.Generator().manual_seed(spec.init_seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                m.reset_running_stats()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, C)`` numpy batch to an ``(N, C, H, W)`` tensor."""
    arr = np.array(np.asarray(images).transpose(0, 3, 1, 2), order="C")
    return torch.from_numpy(arr).to(dtype)


def predict_proba(model: SegmentationModel, image) -> np.ndarray:
    """Eval-mode soft label map ``(H, W, K)`` for one ``(H, W, C)`` image."""
    image = as_image(image)
    if image.shape[2] != model.spec.in_channels:
        raise InputError(f"model expects {model.spec.in_channels} channels, image has {image.shape[2]}")
    f = 2 ** model.spec.depth
    if image.shape[0] % f or image.shape[1] % f:
        raise InputError(f"image height and width must be divisible by {f}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        p = model.probs(images_to_tensor(image[None], dtype))
    model.train(was_training)
    out = p[0].permute(1, 2, 0).numpy().astype(np.float32)
    check_soft_labels(out)
    return out


def parameters_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# ---------------------------------------------------------------------------
# checkpoints: a zip holding meta.json (format tag, spec, tensor manifest) and
# params.bin (raw little-endian tensor bytes in manifest order)

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(model: SegmentationModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    manifest = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": blob.tell(), "nbytes": arr.nbytes})
        blob.write(arr.tobytes())
    meta = {"format": CHECKPOINT_FORMAT, "spec": model.spec.to_dict(),
            "tensors": manifest, "extra": extra or {}}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        _zip_write(zf, "params.bin", blob.getvalue())
    return path


def read_checkpoint_meta(path) -> dict:
    """Spec and manifest of a checkpoint without touching the parameter blob."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load_checkpoint(path, into: SegmentationModel | None = None,
                    expected_spec: ModelSpec | None = None) -> SegmentationModel:
    meta = read_checkpoint_meta(path)
    spec = ModelSpec.from_dict(meta["spec"])
    want = into.spec if into is not None else expected_spec
    if want is not None and want != spec:
        raise CheckpointError(f"checkpoint holds {spec}, expected {want}")
    with zipfile.ZipFile(path) as zf:
        blob = zf.read("params.bin")
    state = {}
    for t in meta["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model = into if into is not None else SegmentationModel(spec)
    if into is None and any(t["dtype"] == "<f8" for t in meta["tensors"]):
        model.double()
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(str(e)) from e
    return model
