"""Pixel-wise training objectives on probability maps.

All losses take probability tensors laid out ``(N, K, H, W)`` (a single
``(K, H, W)`` map is promoted) and return the mean over every pixel of the
batch, in nats.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import InputError

EPS = 1e-8


def _batched(p: torch.Tensor) -> torch.Tensor:
    if p.ndim == 3:
        p = p.unsqueeze(0)
    if p.ndim != 4:
        raise InputError(f"expected (N, K, H, W) probabilities, got shape {tuple(p.shape)}")
    return p


def cross_entropy(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log p[target]`` with ``p`` floored at ``EPS``."""
    prediction = _batched(prediction)
    if target.ndim == 2:
        target = target.unsqueeze(0)
    n, k, h, w = prediction.shape
    if tuple(target.shape) != (n, h, w):
        raise InputError(f"target shape {tuple(target.shape)} does not match prediction {(n, h, w)}")
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise InputError(f"target classes must lie in [0, {k - 1}]")
    picked = prediction.gather(1, target.unsqueeze(1))
    return -picked.clamp_min(EPS).log().mean()


def kl_distillation(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel ``KL(teacher || student)``; the teacher is treated as a constant."""
    teacher, student = _batched(teacher), _batched(student)
    if teacher.shape != student.shape:
        raise InputError(f"teacher {tuple(teacher.shape)} and student {tuple(student.shape)} differ")
    t = teacher.detach().clamp_min(EPS)
    per_pixel = (t * (t.log() - student.clamp_min(EPS).log())).sum(dim=1)
    return per_pixel.mean()


def loss_gradient_check(loss_fn, model: torch.nn.Module, batch, n_params: int = 20,
                        step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(model, batch)`` must return a scalar tensor. The check runs on a
    float64 copy of ``model`` in eval mode and samples ``n_params`` scalar
    parameters uniformly over all parameter entries.
    """
    import copy

    m = copy.deepcopy(model).double().eval()
    batch = tuple(b.double() if torch.is_floating_point(b) else b for b in batch)
    params = [p for p in m.parameters() if p.requires_grad]
    m.zero_grad()
    loss_fn(m, batch).backward()

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for f in flat:
        pi = int(np.searchsorted(bounds, f, side="right"))
        idx = int(f - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        analytic = float(p.grad.view(-1)[idx])
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
            p.view(-1)[idx] = orig + step
            up = float(loss_fn(m, batch))
            p.view(-1)[idx] = orig - step
            down = float(loss_fn(m, batch))
            p.view(-1)[idx] = orig
        numeric = (up - down) / (2 * step)
        # floor keeps exactly-zero gradients (dead ReLUs) from dividing roundoff by zero
        denom = max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
