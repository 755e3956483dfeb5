"""Differentiable tensor substrate.

Reverse-mode gradients come from torch autograd. This module adds the small
set of primitives the model is written against, and an independent
central-difference harness (:func:`grad_check`) that verifies those gradients.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

NORM_FLOOR = 1e-8


def configure_threads(default: int = 1) -> int:
    """Cap intra-op threads from ``SHUBERT_NUM_THREADS`` and pin determinism."""
    n = int(os.environ.get("SHUBERT_NUM_THREADS", default))
    n = max(1, n)
    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True)
    return n


# --- primitives -------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    y = x @ weight.transpose(-1, -2)
    return y if bias is None else y + bias


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, stride: int) -> torch.Tensor:
    return F.conv1d(x, weight, bias, stride=stride)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    ex = shifted.exp()
    return ex / ex.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


class _Sqrt(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        out = torch.from_numpy(np.sqrt(x.detach().cpu().numpy())).to(x.device)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        return grad * 0.5 / out


def sqrt(x: torch.Tensor) -> torch.Tensor:
    """Correctly rounded square root.

    torch's float64 kernel can be off by one ulp on some CPU builds, which
    breaks identities such as sqrt(s * s) == s that the correlation code relies on.
    """
    return _Sqrt.apply(x)


def row_mean_var(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and biased variance over the last axis, keepdim."""
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return mean, var


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return x.index_select(-2, index)


def scatter_rows(x: torch.Tensor, index: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Out-of-place replacement of rows ``index`` of a 2-D ``x`` by ``rows``."""
    keep = torch.ones(x.shape[0], 1, dtype=x.dtype, device=x.device)
    keep = keep.index_fill(0, index, 0.0)
    placed = torch.zeros_like(x).index_copy(0, index, rows.expand(len(index), -1).to(x.dtype))
    return x * keep + placed


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine along ``dim``; each norm is floored at 1e-8.

    The denominator is sqrt(|a|^2 |b|^2) so that cosine(a, a) == 1 exactly.
    """
    floor = NORM_FLOOR ** 2
    sa = (a * a).sum(dim=dim).clamp_min(floor)
    sb = (b * b).sum(dim=dim).clamp_min(floor)
    return (a * b).sum(dim=dim) / sqrt(sa * sb)


def concat(xs: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    return torch.cat(list(xs), dim=dim)


def mean_pool(x: torch.Tensor, dim: int = -2) -> torch.Tensor:
    return x.mean(dim=dim)


# --- gradient verification --------------------------------------------------

@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    passed: bool
    tolerance: float
    n_checked: int = 0
    failure: tuple[str, int] | None = None
    message: str = ""

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_error": self.worst,
            "per_parameter": self.max_rel_error,
            "n_checked": self.n_checked,
            "failure": list(self.failure) if self.failure else None,
            "message": self.message,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), NORM_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    directions: int = 0,
    seed: int = 0,
) -> GradReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and reads the parameter tensors in
    ``params`` (perturbed in place here, restored afterwards). By default every
    scalar of every parameter is perturbed. With ``max_coords``, tensors larger
    than that are checked on a seeded random subset of their coordinates, and
    ``directions`` random +-1 directions per tensor additionally check the
    directional derivative g.v, which involves every coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}

    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        return GradReport({}, False, tol, failure=("loss", -1), message="non-finite loss")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)

    def central(apply_plus, apply_minus, restore):
        apply_plus()
        up = loss_fn().item()
        apply_minus()
        down = loss_fn().item()
        restore()
        return up, down

    errors: dict[str, float] = {}
    n_checked = 0
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            analytic = np.zeros(p.numel()) if g is None else g.detach().reshape(-1).cpu().double().numpy()
            bad = np.flatnonzero(~np.isfinite(analytic))
            if bad.size:
                return GradReport(errors, False, tol, n_checked, (name, int(bad[0])), "non-finite gradient")
            flat = p.view(-1)
            n = flat.numel()
            coords = np.arange(n)
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            worst = 0.0
            for i in coords:
                i = int(i)
                orig = flat[i].item()
                up, down = central(lambda: flat.__setitem__(i, orig + eps),
                                   lambda: flat.__setitem__(i, orig - eps),
                                   lambda: flat.__setitem__(i, orig))
                if not (math.isfinite(up) and math.isfinite(down)):
                    return GradReport(errors, False, tol, n_checked, (name, i), "non-finite loss under perturbation")
                numeric = (up - down) / (2 * eps)
                worst = max(worst, float(relative_error(analytic[i:i + 1], np.array([numeric]))[0]))
            n_checked += len(coords)
            for _ in range(directions if n else 0):
                v = torch.from_numpy(rng.choice([-1.0, 1.0], size=n)).to(p.dtype).view_as(p)
                saved = p.detach().clone()
                up, down = central(lambda: p.copy_(saved + eps * v), lambda: p.copy_(saved - eps * v),
                                   lambda: p.copy_(saved))
                if not (math.isfinite(up) and math.isfinite(down)):
                    return GradReport(errors, False, tol, n_checked, (name, -1), "non-finite loss under perturbation")
                a = float(analytic @ v.reshape(-1).double().numpy())
                worst = max(worst, float(relative_error(np.array([a]), np.array([(up - down) / (2 * eps)]))[0]))
            errors[name] = worst

    passed = all(e <= tol for e in errors.values())
    return GradReport(errors, passed, tol, n_checked)
