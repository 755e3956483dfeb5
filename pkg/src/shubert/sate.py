"""Speaker adapted transformer encoder.

A pre-norm transformer stack in which one layer (the speaker adapted layer)
replaces its layer norms with a conditional layer norm: the affine scale is
``w(e) * gamma + b(e)`` where ``w`` and ``b`` are affine maps of the speaker
embedding ``e``. Every other layer uses the plain layer norm.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .numerics import affine, matmul, row_mean_var, softmax


def _normalize(x: torch.Tensor, eps: float) -> torch.Tensor:
    mean, var = row_mean_var(x)
    return (x - mean) / torch.sqrt(var + eps)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return _normalize(x, eps) * gamma + beta


def cond_layer_norm(x, e, gamma, beta, w_weight, w_bias, b_weight, b_bias, eps: float = 1e-5):
    """Conditional layer norm over the last axis.

    ``x`` is (..., T, D) and ``e`` is (..., E); the scale ``w(e) * gamma + b(e)``
    is broadcast over the T axis.
    """
    scale = affine(e, w_weight, w_bias) * gamma + affine(e, b_weight, b_bias)
    return _normalize(x, eps) * scale.unsqueeze(-2) + beta


class Norm(nn.Module):
    """Layer norm parameters, with speaker projections when ``conditioned``."""

    def __init__(self, dim: int, emb_dim: int, conditioned: bool, eps: float):
        super().__init__()
        self.eps = eps
        self.conditioned = conditioned
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        if conditioned:
            # w(e) = 1 and b(e) = 0 at init: the layer starts as a vanilla one
            self.w_weight = nn.Parameter(torch.zeros(dim, emb_dim))
            self.w_bias = nn.Parameter(torch.ones(dim))
            self.b_weight = nn.Parameter(torch.zeros(dim, emb_dim))
            self.b_bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x, e=None):
        if not self.conditioned:
            return layer_norm(x, self.gamma, self.beta, self.eps)
        return cond_layer_norm(x, e, self.gamma, self.beta, self.w_weight, self.w_bias,
                               self.b_weight, self.b_bias, self.eps)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError("model dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        # no key bias: it shifts every score of a query equally and cancels in the softmax
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_valid=None):
        B, T, D = x.shape
        h, dh = self.n_heads, D // self.n_heads

        def split(t):
            return t.view(B, T, h, dh).transpose(1, 2)

        q = split(affine(x, self.q.weight, self.q.bias))
        k = split(affine(x, self.k.weight))
        v = split(affine(x, self.v.weight, self.v.bias))
        scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], -1e9)
        ctx = matmul(softmax(scores, dim=-1), v).transpose(1, 2).reshape(B, T, D)
        return affine(ctx, self.out.weight, self.out.bias)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, emb_dim: int, cfg: EncoderConfig, speaker_adapted: bool):
        super().__init__()
        self.speaker_adapted = speaker_adapted
        self.norm1 = Norm(dim, emb_dim, speaker_adapted, cfg.ln_eps)
        self.attn = SelfAttention(dim, cfg.n_heads)
        self.norm2 = Norm(dim, emb_dim, speaker_adapted and cfg.cond_both_norms, cfg.ln_eps)
        self.ff1 = nn.Linear(dim, cfg.ffn_dim)
        self.ff2 = nn.Linear(cfg.ffn_dim, dim)

    def forward(self, x, e=None, key_valid=None):
        x = x + self.attn(self.norm1(x, e), key_valid)
        y = F.gelu(affine(self.norm2(x, e), self.ff1.weight, self.ff1.bias))
        return x + affine(y, self.ff2.weight, self.ff2.bias)


def sinusoidal_positions(T: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / dim))
    pe = torch.zeros(T, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class SpeakerAdaptedEncoder(nn.Module):
    """Transformer stack; ``cfg.satl_index`` picks the speaker adapted layer.

    ``speaker_adapted=False`` builds the plain encoder with the same layout,
    whose parameter names are a subset of the adapted one's.
    """

    def __init__(self, dim: int, emb_dim: int, cfg: EncoderConfig, speaker_adapted: bool = True):
        super().__init__()
        if not 0 <= cfg.satl_index < cfg.n_layers:
            raise ValueError("satl_index must lie in [0, n_layers)")
        self.cfg = cfg
        self.dim = dim
        self.layers = nn.ModuleList(
            EncoderLayer(dim, emb_dim, cfg, speaker_adapted and i == cfg.satl_index)
            for i in range(cfg.n_layers)
        )
        self.final_norm = Norm(dim, emb_dim, False, cfg.ln_eps)

    def forward(self, h, e=None, key_valid=None, upto: int | None = None, positions: bool = True):
        """Encode (B, T, D) frames. With ``upto=i`` return the output of layer i (0-based)."""
        if h.shape[-1] != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {h.shape[-1]}")
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
            e = None if e is None else e.reshape(1, -1)
        x = h
        if positions:
            x = x + self.cfg.pos_scale * sinusoidal_positions(h.shape[1], self.dim, h.dtype)
        for i, layer in enumerate(self.layers):
            x = layer(x, e, key_valid)
            if upto is not None and i == upto:
                return x[0] if squeeze else x
        x = self.final_norm(x)
        return x[0] if squeeze else x


def encode(h_masked, e, encoder: SpeakerAdaptedEncoder, key_valid=None):
    """Contextual representation C of masked frames, conditioned on ``e``."""
    return encoder(h_masked, e, key_valid)
