"""Verification probes: enrollment-swap selectivity and cross-view invariance."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import RunConfig, tiny_config
from .masking import plan_mask
from .mixsim import make_dataset
from .model import SHuBERT, build_model, forward_losses, make_batch, pad_stack
from .numerics import GradReport, cosine_similarity, grad_check


@dataclass
class ProbeReport:
    target_masked_accuracy: float
    interferer_masked_accuracy: float | None
    swap_consistency: float | None
    mean_view_cosine: float | None
    n_examples: int
    n_masked_frames: int = 0
    collision_rate: float | None = None
    skipped: int = 0
    per_example_gap: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_example_gap")
        return d


def probe_masks(examples: Sequence, model: SHuBERT, seed: int, p_start: float, span_length: int) -> list[np.ndarray]:
    """Fixed per-example probe masks; an example with no span gets its first frame masked."""
    out = []
    for i, ex in enumerate(examples):
        t = model.n_frames(len(ex.view_a))
        m = plan_mask(t, p_start, span_length, np.random.default_rng([seed, i])).as_bool()
        if not m.any():
            m[: min(span_length, t)] = True
        out.append(m)
    return out


@torch.no_grad()
def _predict(model: SHuBERT, mixtures, enrollments, masks, speakers, batch_size: int = 16) -> list[np.ndarray]:
    preds = []
    for s in range(0, len(mixtures), batch_size):
        mix = mixtures[s:s + batch_size]
        enr = enrollments[s:s + batch_size]
        T = [len(m) for m in masks[s:s + batch_size]]
        valid = torch.zeros(len(mix), max(T), dtype=torch.bool)
        mask = torch.zeros_like(valid)
        for j, m in enumerate(masks[s:s + batch_size]):
            valid[j, : len(m)] = True
            mask[j, : len(m)] = torch.from_numpy(m)
        e = model.speaker_embedding(pad_stack(enr, model.dtype), torch.tensor([len(x) for x in enr]),
                                    speakers[s:s + batch_size])
        C = model.encode_view(pad_stack(mix, model.dtype), valid, mask, e)
        pred = model.head(C).argmax(-1)
        preds.extend(pred[j, : T[j]].numpy() for j in range(len(mix)))
    return preds


def selectivity_probe(
    model: SHuBERT,
    examples: Sequence,
    labels: Mapping[str, np.ndarray],
    interferer_labels: Mapping[str, np.ndarray],
    seed: int = 1234,
    p_start: float = 0.08,
    span_length: int = 10,
) -> ProbeReport:
    """Masked-frame accuracy against the enrolled speaker's labels and against the other talker's.

    Only mixtures and enrollments are encoded. Examples without an interferer
    source (or its labels) are scored on target accuracy alone and counted in
    ``skipped`` for the interferer metrics.
    """
    model.eval()
    masks = probe_masks(examples, model, seed, p_start, span_length)
    speakers_a = [ex.target_speaker for ex in examples]
    pred_a = _predict(model, [ex.view_a.samples for ex in examples],
                      [ex.enrollment.samples for ex in examples], masks, speakers_a)

    dual = [i for i, ex in enumerate(examples)
            if ex.interferer_enrollment is not None and ex.id in interferer_labels]
    pred_b = {}
    if dual:
        got = _predict(model, [examples[i].view_a.samples for i in dual],
                       [examples[i].interferer_enrollment.samples for i in dual],
                       [masks[i] for i in dual], [examples[i].interferer_speaker for i in dual])
        pred_b = dict(zip(dual, got))

    hit_t = hit_i = n_t = n_i = collide = 0
    swaps = 0
    gaps = []
    for i, ex in enumerate(examples):
        m = masks[i]
        ua = np.asarray(labels[ex.id])
        hit_t += int((pred_a[i][m] == ua[m]).sum())
        n_t += int(m.sum())
        if i in pred_b:
            ub = np.asarray(interferer_labels[ex.id])
            hit_i += int((pred_a[i][m] == ub[m]).sum())
            n_i += int(m.sum())
            collide += int((ua[m] == ub[m]).sum())
            gaps.append(float((pred_a[i][m] == ua[m]).mean() - (pred_a[i][m] == ub[m]).mean()))
            # with B enrolled, B's labels must beat A's
            if (pred_b[i][m] == ub[m]).sum() > (pred_b[i][m] == ua[m]).sum():
                swaps += 1
    return ProbeReport(
        target_masked_accuracy=hit_t / max(n_t, 1),
        interferer_masked_accuracy=hit_i / n_i if n_i else None,
        swap_consistency=swaps / len(pred_b) if pred_b else None,
        mean_view_cosine=None,
        n_examples=len(examples),
        n_masked_frames=n_t,
        collision_rate=collide / n_i if n_i else None,
        skipped=len(examples) - len(pred_b),
        per_example_gap=gaps,
    )


@torch.no_grad()
def view_representations(model: SHuBERT, examples: Sequence, batch_size: int = 16):
    """Unmasked C for view A and view B of each example, both with its enrollment."""
    model.eval()
    outs = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        T = [model.n_frames(len(ex.view_a)) for ex in chunk]
        valid = torch.zeros(len(chunk), max(T), dtype=torch.bool)
        for j, t in enumerate(T):
            valid[j, :t] = True
        enr = [ex.enrollment.samples for ex in chunk]
        e = model.speaker_embedding(pad_stack(enr, model.dtype), torch.tensor([len(x) for x in enr]),
                                    [ex.target_speaker for ex in chunk])
        Ca = model.encode_view(pad_stack([ex.view_a.samples for ex in chunk], model.dtype), valid, None, e)
        Cb = model.encode_view(pad_stack([ex.view_b.samples for ex in chunk], model.dtype), valid, None, e)
        outs.extend((Ca[j, :t], Cb[j, :t]) for j, t in enumerate(T))
    return outs


def invariance_metric(model: SHuBERT, examples: Sequence) -> float:
    """Mean over examples of the mean per-frame cosine between C and C-tilde (no masking)."""
    per_example = [float(cosine_similarity(a, b, dim=-1).mean()) for a, b in view_representations(model, examples)]
    return float(np.mean(per_example))


def gradcheck_model(
    seed: int,
    cfg: RunConfig | None = None,
    n_examples: int = 2,
    eps: float = 1e-4,
    tol: float = 1e-4,
    perturb: float = 0.1,
    max_coords: int | None = 24,
    directions: int = 2,
) -> GradReport:
    """Finite-difference check of the full dual-path loss over every model parameter.

    Runs in float64 on a small synthetic batch. All parameters are jittered
    first: at init the conditioning projections are zero, which would make the
    embedder's gradient exactly zero and the check vacuous there.
    ``max_coords``/``directions`` bound the number of loss evaluations (see
    :func:`grad_check`); ``max_coords=None`` checks every scalar.
    """
    cfg = cfg or tiny_config()
    examples = make_dataset(cfg.mix, seed, n_examples, "gradcheck", cfg.frontend)
    model = build_model(cfg, seed, torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(perturb * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    lab_rng = np.random.default_rng([seed, 101])
    labels = {ex.id: lab_rng.integers(0, cfg.quantizer.k, model.n_frames(len(ex.clean))) for ex in examples}
    batch = make_batch(examples, labels, cfg, np.random.default_rng([seed, 102]), dtype=torch.float64)
    if not (batch.mask_a & batch.valid).any():
        batch.mask_a[0, 0] = batch.mask_b[0, 0] = True
    model.train()

    def loss_fn():
        return forward_losses(model, batch, np.random.default_rng([seed, 103])).losses.total

    return grad_check(loss_fn, dict(model.named_parameters()), eps=eps, tol=tol,
                      max_coords=max_coords, directions=directions, seed=seed)
