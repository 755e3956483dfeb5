"""The full pre-training model and its two-branch forward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .frontend import ConvFrontend, n_frames
from .masking import apply_mask, plan_mask
from .objective import (
    LinearProjectionBlock,
    LossBreakdown,
    PredictionHead,
    cc_loss,
    masked_ce,
    project_and_sample,
    total_loss,
)
from .sate import SpeakerAdaptedEncoder
from .spkemb import SpeakerEmbedder, oracle_embedding


class SHuBERT(nn.Module):
    """Frontend F, mask embedding, speaker embedder, adapted encoder, prediction head and LPB."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.frontend.dim
        self.frontend = ConvFrontend(cfg.frontend)
        self.mask_embed = nn.Parameter(torch.empty(D).uniform_())
        self.embedder = SpeakerEmbedder(cfg.frontend, cfg.spkemb)
        self.encoder = SpeakerAdaptedEncoder(D, cfg.spkemb.dim, cfg.encoder)
        o = cfg.objective
        self.head = PredictionHead(D, o.head_dim, cfg.quantizer.k, o.temperature, o.cosine_head)
        self.lpb = LinearProjectionBlock(D, o.lpb_dim)

    @property
    def dtype(self):
        return self.mask_embed.dtype

    def n_frames(self, length: int) -> int:
        return self.frontend.n_frames(length)

    def speaker_embedding(self, enroll: torch.Tensor, lengths=None, speakers=None) -> torch.Tensor:
        if self.cfg.spkemb.mode == "oracle":
            if speakers is None:
                raise ValueError("oracle embeddings need speaker ids")
            vecs = [oracle_embedding(int(s), self.cfg.spkemb.oracle_seed, self.cfg.spkemb.dim) for s in speakers]
            return torch.tensor(np.stack(vecs), dtype=self.dtype)
        return self.embedder(enroll, lengths)

    def encode_view(self, wav, valid, mask, e, upto=None, positions=True):
        """Frames -> masked frames -> contextual representation for one padded batch of views."""
        H = self.frontend(wav)[:, : valid.shape[1]]
        if mask is not None:
            H = apply_mask(H, mask & valid, self.mask_embed)
        return self.encoder(H, e, key_valid=valid, upto=upto, positions=positions)


def build_model(cfg: RunConfig, seed: int, dtype=torch.float32) -> SHuBERT:
    """Deterministic initialization from ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SHuBERT(cfg)
    return model.to(dtype)


@dataclass
class Batch:
    ids: list[str]
    view_a: torch.Tensor
    view_b: torch.Tensor
    valid: torch.Tensor
    n_frames: list[int]
    enroll: torch.Tensor
    enroll_lengths: torch.Tensor
    labels: torch.Tensor
    mask_a: torch.Tensor
    mask_b: torch.Tensor
    speakers: list[int]


def pad_stack(arrays: Sequence[np.ndarray], dtype) -> torch.Tensor:
    L = max(len(a) for a in arrays)
    out = np.zeros((len(arrays), L), dtype=np.float64)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return torch.tensor(out, dtype=dtype)


def make_batch(
    examples: Sequence,
    labels: Mapping[str, np.ndarray],
    cfg: RunConfig,
    rng: np.random.Generator,
    dtype=torch.float32,
    mask: bool = True,
) -> Batch:
    """Pad a list of examples into a batch and draw their mask plans from ``rng``."""
    fc = cfg.frontend
    T = [n_frames(len(ex.clean), fc.kernels, fc.strides) for ex in examples]
    Tmax = max(T)
    B = len(examples)
    valid = torch.zeros(B, Tmax, dtype=torch.bool)
    lab = torch.zeros(B, Tmax, dtype=torch.long)
    mask_a = torch.zeros(B, Tmax, dtype=torch.bool)
    mask_b = torch.zeros(B, Tmax, dtype=torch.bool)
    mc = cfg.mask
    for i, (ex, t) in enumerate(zip(examples, T)):
        if ex.id not in labels:
            raise KeyError(f"no pseudo-labels for example {ex.id}")
        u = np.asarray(labels[ex.id])
        if len(u) != t:
            raise ValueError(f"example {ex.id}: {len(u)} labels for {t} frames")
        valid[i, :t] = True
        lab[i, :t] = torch.from_numpy(u.astype(np.int64))
        if mask:
            plan = plan_mask(t, mc.p_start, mc.span_length, rng)
            mask_a[i, :t] = torch.from_numpy(plan.as_bool())
            if mc.shared:
                mask_b[i, :t] = mask_a[i, :t]
            else:
                mask_b[i, :t] = torch.from_numpy(plan_mask(t, mc.p_start, mc.span_length, rng).as_bool())
    return Batch(
        ids=[ex.id for ex in examples],
        view_a=pad_stack([ex.view_a.samples for ex in examples], dtype),
        view_b=pad_stack([ex.view_b.samples for ex in examples], dtype),
        valid=valid,
        n_frames=T,
        enroll=pad_stack([ex.enrollment.samples for ex in examples], dtype),
        enroll_lengths=torch.tensor([len(ex.enrollment) for ex in examples]),
        labels=lab,
        mask_a=mask_a,
        mask_b=mask_b,
        speakers=[ex.target_speaker for ex in examples],
    )


@dataclass
class ForwardOutput:
    losses: LossBreakdown
    C_a: torch.Tensor
    C_b: torch.Tensor | None
    e: torch.Tensor


def forward_losses(
    model: SHuBERT,
    batch: Batch,
    rng: np.random.Generator,
    one_path: bool = False,
) -> ForwardOutput:
    """Both views through the same frontend, mask embedding and encoder; CE + CE + CC."""
    cfg = model.cfg
    e = model.speaker_embedding(batch.enroll, batch.enroll_lengths, batch.speakers)
    C_a = model.encode_view(batch.view_a, batch.valid, batch.mask_a, e)
    ce_a = masked_ce(model.head(C_a), batch.labels, batch.mask_a & batch.valid)
    if one_path:
        return ForwardOutput(total_loss(ce_a, None, None), C_a, None, e)

    C_b = model.encode_view(batch.view_b, batch.valid, batch.mask_b, e)
    ce_b = masked_ce(model.head(C_b), batch.labels, batch.mask_b & batch.valid)
    za, zb = [], []
    for i, t in enumerate(batch.n_frames):
        z1, z2 = project_and_sample(C_a[i, :t], C_b[i, :t], model.lpb, cfg.objective.cc_frames, rng)
        za.append(z1)
        zb.append(z2)
    cc = cc_loss(torch.cat(za), torch.cat(zb), cfg.objective.cc_lambda, cfg.objective.cc_center)
    return ForwardOutput(total_loss(ce_a, ce_b, cc), C_a, C_b, e)
