"""Speaker embeddings from enrollment audio.

The learned embedder is a frontend of its own, mean-pooled over time,
projected to E dims and L2-normalized. It is trained jointly with the
pre-training loss. :func:`oracle_embedding` gives frozen per-speaker vectors
for tests.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import FrontendConfig, SpkEmbConfig
from .frontend import ConvFrontend
from .numerics import affine, mean_pool


def oracle_embedding(speaker_id: int, seed: int = 0, dim: int = 32) -> np.ndarray:
    if speaker_id < 0:
        raise ValueError("speaker_id must be non-negative")
    v = np.random.default_rng([seed, 31337, speaker_id]).standard_normal(dim)
    return v / np.linalg.norm(v)


def l2_normalize(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class SpeakerEmbedder(nn.Module):
    def __init__(self, frontend_cfg: FrontendConfig, cfg: SpkEmbConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = ConvFrontend(frontend_cfg)
        self.proj = nn.Linear(frontend_cfg.dim, cfg.dim)

    def pool(self, frames: torch.Tensor, n_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Mean over the time axis of (B, T, D) frames, honoring per-row valid counts."""
        if n_valid is None:
            return mean_pool(frames, dim=-2)
        t = torch.arange(frames.shape[-2])
        w = (t[None, :] < n_valid[:, None]).to(frames.dtype)
        return (frames * w.unsqueeze(-1)).sum(-2) / n_valid.to(frames.dtype).unsqueeze(-1)

    def embed_frames(self, frames: torch.Tensor, n_valid: torch.Tensor | None = None) -> torch.Tensor:
        return l2_normalize(affine(self.pool(frames, n_valid), self.proj.weight, self.proj.bias))

    def forward(self, wav: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, L) enrollment batch -> (B, E) unit vectors; ``lengths`` in samples."""
        frames = self.frontend(wav)
        n_valid = None
        if lengths is not None:
            n_valid = torch.tensor([self.frontend.n_frames(int(n)) for n in lengths])
            if (n_valid < 1).any():
                raise ValueError("enrollment too short for a single frame")
        return self.embed_frames(frames, n_valid)


def embed_enrollment(x, embedder: SpeakerEmbedder) -> torch.Tensor:
    """Embed one enrollment waveform; returns an E-vector of unit norm."""
    p = next(embedder.parameters())
    samples = torch.as_tensor(getattr(x, "samples", x), dtype=p.dtype)
    if len(samples) < embedder.frontend.receptive_field:
        raise ValueError("enrollment too short for a single frame")
    return embedder(samples.unsqueeze(0))[0]
