"""Losses: masked pseudo-label cross-entropy, the cross-correlation loss
between the two views, and their unweighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .numerics import NORM_FLOOR, affine, cosine_similarity, gather_rows, log_softmax, sqrt


class PredictionHead(nn.Module):
    """Cosine similarity between projected frames and K codeword embeddings, over a temperature.

    With ``cosine=False`` the head is a plain affine map to K logits.
    """

    def __init__(self, dim: int, head_dim: int, k: int, temperature: float = 0.1, cosine: bool = True):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self.cosine = cosine
        self.proj = nn.Linear(dim, head_dim if cosine else k)
        self.codewords = nn.Parameter(torch.randn(k, head_dim))

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        z = affine(c, self.proj.weight, self.proj.bias)
        if not self.cosine:
            return z
        return cosine_similarity(z.unsqueeze(-2), self.codewords, dim=-1) / self.temperature


def predict_logits(C: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    if C.shape[-1] != head.proj.in_features:
        raise ValueError("frame dim does not match the prediction head")
    return head(C)


def masked_ce(logits: torch.Tensor, labels, mask, training: bool = True) -> torch.Tensor:
    """Mean negative log-likelihood of ``labels`` over masked frames.

    ``mask`` is a boolean array/tensor over frames or a ``MaskPlan``; leading
    axes of ``logits`` (e.g. batch) are flattened together with time.
    """
    if hasattr(mask, "as_bool"):
        mask = mask.as_bool()
    mask = torch.as_tensor(mask, dtype=torch.bool).reshape(-1)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    idx = torch.nonzero(mask).reshape(-1)
    if idx.numel() == 0:
        if training:
            raise ValueError("no masked frames: masked CE is undefined")
        return flat.sum() * 0.0
    picked = log_softmax(gather_rows(flat, idx), dim=-1)
    nll = -picked.gather(-1, labels[idx].unsqueeze(-1)).squeeze(-1)
    return nll.mean()


class LinearProjectionBlock(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, out_dim)

    def forward(self, c):
        return affine(c, self.proj.weight, self.proj.bias)


def sample_frame_pairs(T: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of N of the T frames, drawn without replacement (N clamped to T)."""
    N = min(N, T)
    return np.sort(rng.choice(T, size=N, replace=False))


def project_and_sample(C, C_tilde, lpb: LinearProjectionBlock, N: int, rng: np.random.Generator):
    """Pick the same N frames from both views and project them through the shared block."""
    if C.shape != C_tilde.shape:
        raise ValueError("both views must have the same shape")
    idx = torch.from_numpy(sample_frame_pairs(C.shape[-2], N, rng))
    return lpb(gather_rows(C, idx)), lpb(gather_rows(C_tilde, idx))


@dataclass
class CCResult:
    R: torch.Tensor
    invariance_term: torch.Tensor
    redundancy_term: torch.Tensor
    lam: float

    @property
    def loss(self) -> torch.Tensor:
        return self.invariance_term + self.lam * self.redundancy_term


def cross_correlation(Z: torch.Tensor, Z_tilde: torch.Tensor, center: bool = True) -> torch.Tensor:
    """D_z x D_z matrix of column-normalized correlations between the two views."""
    if Z.shape != Z_tilde.shape:
        raise ValueError("Z and Z_tilde must have the same shape")
    if Z.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if center:
        Z = Z - Z.mean(dim=0, keepdim=True)
        Z_tilde = Z_tilde - Z_tilde.mean(dim=0, keepdim=True)
    # squared norms come from the same matmul as the cross terms, and the
    # denominator is sqrt(|a|^2 |b|^2), so identical views give R_ii == 1 exactly
    floor = NORM_FLOOR ** 2
    ga = torch.diagonal(Z.transpose(0, 1) @ Z).clamp_min(floor)
    gb = torch.diagonal(Z_tilde.transpose(0, 1) @ Z_tilde).clamp_min(floor)
    return (Z.transpose(0, 1) @ Z_tilde) / sqrt(ga[:, None] * gb[None, :])


def cc_loss(Z: torch.Tensor, Z_tilde: torch.Tensor, lam: float = 5e-3, center: bool = True) -> CCResult:
    """Push the cross-correlation matrix towards identity.

    invariance = sum_i (1 - R_ii)^2, redundancy = sum_{i != j} R_ij^2,
    loss = invariance + lam * redundancy.
    """
    R = cross_correlation(Z, Z_tilde, center)
    diag = torch.diagonal(R)
    invariance = ((1.0 - diag) ** 2).sum()
    redundancy = (R ** 2).sum() - (diag ** 2).sum()
    return CCResult(R, invariance, redundancy, lam)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce_a: torch.Tensor
    ce_b: torch.Tensor
    cc_inv: torch.Tensor
    cc_red: torch.Tensor
    cc: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce_a", "ce_b", "cc_inv", "cc_red")}


def total_loss(ce_a: torch.Tensor, ce_b: torch.Tensor | None, cc: CCResult | None) -> LossBreakdown:
    """CE on view A + CE on view B + CC loss; missing terms (one-path mode) count as zero."""
    zero = ce_a * 0.0
    ce_b = zero if ce_b is None else ce_b
    if cc is None:
        inv = red = cc_val = zero
    else:
        inv, red, cc_val = cc.invariance_term, cc.redundancy_term, cc.loss
    total = ce_a + ce_b + cc_val
    for name, v in (("ce_a", ce_a), ("ce_b", ce_b), ("cc", cc_val)):
        if not torch.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {name}: {float(v)}")
    return LossBreakdown(total, ce_a, ce_b, inv, red, cc_val)
