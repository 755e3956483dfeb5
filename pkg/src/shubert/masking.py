"""Span masking of frame-level representations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class MaskPlan:
    masked_indices: np.ndarray
    span_starts: np.ndarray
    span_length: int
    n_frames: int

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.n_frames, dtype=bool)
        m[self.masked_indices] = True
        return m

    def __len__(self):
        return len(self.masked_indices)


def plan_from_starts(T: int, span_starts, span_length: int) -> MaskPlan:
    starts = np.unique(np.asarray(span_starts, dtype=np.int64))
    if span_length < 1:
        raise ValueError("span_length must be >= 1")
    if starts.size and (starts.min() < 0 or starts.max() >= T):
        raise ValueError(f"span start out of range for T={T}")
    m = np.zeros(T, dtype=bool)
    for s in starts:
        m[s:s + span_length] = True
    return MaskPlan(np.flatnonzero(m), starts, span_length, T)


def plan_mask(T: int, p_start: float, span_length: int, rng: np.random.Generator) -> MaskPlan:
    """Each frame starts a span with probability ``p_start``; spans may overlap."""
    if not 0.0 <= p_start <= 1.0:
        raise ValueError("p_start must lie in [0, 1]")
    if T < 1:
        raise ValueError("T must be >= 1")
    starts = np.flatnonzero(rng.random(T) < p_start)
    return plan_from_starts(T, starts, span_length)


def empty_plan(T: int, span_length: int = 1) -> MaskPlan:
    return plan_from_starts(T, [], span_length)


def apply_mask(H: torch.Tensor, plan, mask_embed: torch.Tensor) -> torch.Tensor:
    """Replace masked rows of ``H`` by ``mask_embed``.

    ``plan`` is a :class:`MaskPlan` for a single T x D matrix, or a boolean
    tensor shaped like ``H`` without its feature axis. Unmasked rows are
    passed through untouched.
    """
    if isinstance(plan, MaskPlan):
        if plan.n_frames != H.shape[-2] or (len(plan) and plan.masked_indices.max() >= H.shape[-2]):
            raise ValueError("mask plan does not match the number of frames")
        mask = torch.from_numpy(plan.as_bool())
    else:
        mask = plan
    return torch.where(mask.unsqueeze(-1), mask_embed.to(H.dtype), H)
