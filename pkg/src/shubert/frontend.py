"""Strided 1-D convolutional feature encoder: waveform -> frame matrix H."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import FrontendConfig
from .numerics import conv1d


def receptive_field(kernels, strides) -> int:
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


def hop_length(strides) -> int:
    return math.prod(strides)


def n_frames(length: int, kernels, strides) -> int:
    """Frames produced for a waveform of ``length`` samples (0 if too short)."""
    rf = receptive_field(kernels, strides)
    if length < rf:
        return 0
    return (length - rf) // hop_length(strides) + 1


def frame_centers(n: int, kernels, strides) -> list[int]:
    rf, hop = receptive_field(kernels, strides), hop_length(strides)
    return [t * hop + rf // 2 for t in range(n)]


class FrameLayerNorm(nn.Module):
    """Per-frame layer norm written out explicitly (same arithmetic as the encoder's)."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mean = x.mean(dim=-1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class ConvFrontend(nn.Module):
    """Stack of unpadded strided convolutions with GELU, then per-frame layer norm.

    No normalization mixes time steps, so the map is equivariant to shifts
    by a whole hop.
    """

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.cfg = cfg
        self.kernels = tuple(cfg.kernels)
        self.strides = tuple(cfg.strides)
        chans = [1] + [cfg.dim] * len(self.kernels)
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], k, stride=s)
            for i, (k, s) in enumerate(zip(self.kernels, self.strides))
        )
        self.norm = FrameLayerNorm(cfg.dim)
        self.input_gain = cfg.input_gain
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernels, self.strides)

    @property
    def hop(self) -> int:
        return hop_length(self.strides)

    def n_frames(self, length: int) -> int:
        return n_frames(length, self.kernels, self.strides)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """``wav`` is (B, L) or (L,); returns (B, T, D) or (T, D)."""
        squeeze = wav.dim() == 1
        x = wav.unsqueeze(0) if squeeze else wav
        if x.shape[-1] < self.receptive_field:
            raise ValueError(
                f"waveform of {x.shape[-1]} samples is shorter than the receptive field {self.receptive_field}"
            )
        x = (x * self.input_gain).unsqueeze(1)
        for conv in self.convs:
            x = F.gelu(conv1d(x, conv.weight, conv.bias, conv.stride[0]))
        x = self.norm(x.transpose(1, 2))
        return x[0] if squeeze else x


def encode_frames(wav, frontend: ConvFrontend) -> torch.Tensor:
    """Encode one waveform (array or tensor) into its T x D frame matrix."""
    p = next(frontend.parameters())
    x = torch.as_tensor(getattr(wav, "samples", wav), dtype=p.dtype)
    return frontend(x)
