import copy
import dataclasses
import math

import numpy as np
import pytest
import torch

from shubert.config import RunConfig
from shubert.evalsuite import invariance_metric, probe_masks, selectivity_probe
from shubert.mixsim import make_dataset
from shubert.model import build_model
from shubert.quantizer import label_examples, fit_codebook


@pytest.fixture(scope="module")
def default_setup():
    cfg = RunConfig()
    train = make_dataset(cfg.mix, 0, 40, "train", cfg.frontend)
    ev = make_dataset(cfg.mix, 0, 80, "eval", cfg.frontend, mixture_type="two_talker")
    label_model = build_model(cfg, cfg.quantizer.seed)
    cb = fit_codebook(label_model, train, cfg.quantizer.layer_index, cfg.quantizer.k)
    store = label_examples(label_model, ev, cb, cfg.quantizer.layer_index)
    return cfg, ev, store


def test_untrained_model_is_at_chance(default_setup):
    cfg, ev, store = default_setup
    model = build_model(cfg, 99)
    rep = selectivity_probe(model, ev, store.labels, store.interferer_labels)
    K, n = cfg.quantizer.k, rep.n_masked_frames
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(rep.target_masked_accuracy - 1 / K) <= 3 * sigma
    assert abs(rep.interferer_masked_accuracy - 1 / K) <= 3 * sigma
    assert abs(rep.target_masked_accuracy - rep.interferer_masked_accuracy) <= 0.05
    assert rep.skipped == 0 and rep.n_examples == len(ev)
    for v in (rep.target_masked_accuracy, rep.interferer_masked_accuracy, rep.swap_consistency, rep.collision_rate):
        assert 0.0 <= v <= 1.0


def test_probe_is_deterministic_and_ignores_clean_audio(default_setup):
    cfg, ev, store = default_setup
    model = build_model(cfg, 5)
    a = selectivity_probe(model, ev[:20], store.labels, store.interferer_labels)
    blind = [dataclasses.replace(ex, clean=None, interferer=None) for ex in ev[:20]]
    b = selectivity_probe(model, blind, store.labels, store.interferer_labels)
    assert a.to_dict() == b.to_dict()


def test_clean_input_with_self_enrollment(tiny_corpus):
    cfg, ex, store, _ = tiny_corpus
    model = build_model(cfg, 1).eval()
    clean = [dataclasses.replace(e, view_a=e.clean, interferer_enrollment=None) for e in ex[:6]]
    rep = selectivity_probe(model, clean, store.labels, store.interferer_labels)
    assert rep.interferer_masked_accuracy is None and rep.swap_consistency is None
    assert rep.skipped == 6
    # one example at a time, no padding: plain masked-prediction accuracy
    masks = probe_masks(clean, model, cfg.probe.mask_seed, cfg.probe.p_start, cfg.probe.span_length)
    hits = total = 0
    with torch.no_grad():
        for e, m in zip(clean, masks):
            wav = torch.tensor(e.clean.samples[None], dtype=torch.float32)
            enr = torch.tensor(e.enrollment.samples[None], dtype=torch.float32)
            emb = model.speaker_embedding(enr)
            valid = torch.ones(1, len(m), dtype=torch.bool)
            pred = model.head(model.encode_view(wav, valid, torch.from_numpy(m)[None], emb))[0].argmax(-1).numpy()
            hits += int((pred[m] == store.labels[e.id][m]).sum())
            total += int(m.sum())
    assert rep.target_masked_accuracy == pytest.approx(hits / total, abs=1e-12)


def test_missing_interferer_labels_are_counted(tiny_corpus):
    cfg, ex, store, _ = tiny_corpus
    dual = [e for e in ex if e.interferer_enrollment is not None]
    assert dual
    rep = selectivity_probe(build_model(cfg, 1), dual, store.labels, {})
    assert rep.skipped == len(dual) and rep.interferer_masked_accuracy is None


def test_every_probe_mask_is_nonempty(tiny_corpus):
    cfg, ex, _, _ = tiny_corpus
    model = build_model(cfg, 0)
    for m in probe_masks(ex, model, 1234, 0.0, 10):
        assert m.any()


def test_identical_views_have_unit_cosine(tiny_corpus):
    cfg, ex, _, _ = tiny_corpus
    same = [dataclasses.replace(e, view_b=e.view_a) for e in ex]
    assert invariance_metric(build_model(cfg, 2), same) == 1.0


def test_untrained_view_cosine_is_bounded(tiny_corpus):
    cfg, ex, _, _ = tiny_corpus
    c = invariance_metric(build_model(cfg, 2), ex)
    assert -1.0 < c < 1.0
