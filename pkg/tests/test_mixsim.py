import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shubert.config import FrontendConfig, MixConfig
from shubert.frontend import n_frames
from shubert.mixsim import (
    MIXTURE_TYPES,
    SpeakerProfile,
    make_dataset,
    make_speakers,
    manifest_digest,
    mix_at_snr,
    read_manifest,
    rms,
    sample_example,
    synth_utterance,
    write_manifest,
)

FC = FrontendConfig()


@pytest.fixture(scope="module")
def speakers():
    return make_speakers(MixConfig())


def test_synth_is_deterministic(speakers):
    a, la = synth_utterance(speakers[0], [1, 2, 3], 0.08, seed=5)
    b, lb = synth_utterance(speakers[0], [1, 2, 3], 0.08, seed=5)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(la, lb)


def test_synth_length(speakers):
    wav, labels = synth_utterance(speakers[0], [0, 1, 2, 3, 4], 0.1, seed=0)
    assert len(wav) == 8000
    assert len(labels) == n_frames(8000, FC.kernels, FC.strides)


def test_synth_rejects_bad_input(speakers):
    with pytest.raises(ValueError):
        synth_utterance(speakers[0], [12], 0.1, seed=0)
    with pytest.raises(ValueError):
        synth_utterance(speakers[0], [], 0.1, seed=0)
    with pytest.raises(ValueError):
        synth_utterance(speakers[0], [1], 0.03, seed=0)


def test_spectral_peak_at_f0(speakers):
    # FFT peak-pick oracle
    sr = 16000
    spectra = []
    for prof in speakers[:2]:
        wav, _ = synth_utterance(prof, [0, 3, 5, 7, 9, 2], 0.1, seed=3)
        mag = np.abs(np.fft.rfft(wav.samples))
        freqs = np.fft.rfftfreq(len(wav), 1 / sr)
        peak = freqs[np.argmax(mag)]
        assert abs(peak - prof.f0) <= freqs[1] + 1e-9
        spectra.append(mag)
    assert not np.allclose(spectra[0], spectra[1])
    assert np.corrcoef(spectra[0], spectra[1])[0, 1] < 0.99


def test_labels_follow_phone_at_frame_center(speakers):
    wav, labels = synth_utterance(speakers[1], [4, 7], 0.2, seed=0)
    # first phone spans samples [0, 3200)
    from shubert.frontend import frame_centers
    centers = frame_centers(len(labels), FC.kernels, FC.strides)
    expect = [4 if c < 3200 else 7 for c in centers]
    assert labels.tolist() == expect


def test_speaker_f0_spacing(speakers):
    f0 = sorted(p.f0 for p in speakers)
    assert min(np.diff(f0)) >= 10.0
    assert len({p.speaker_id for p in speakers}) == len(speakers)


def test_mix_at_snr_hand_example():
    out = mix_at_snr(np.array([1.0, -1.0, 1.0, -1.0]), np.array([0.5, 0.5, 0.5, 0.5]), 0.0)
    np.testing.assert_allclose(out, [2.0, 0.0, 2.0, 0.0], atol=1e-15)


def test_mix_at_snr_high_snr_limit():
    rng = np.random.default_rng(0)
    s, n = rng.standard_normal(100), rng.standard_normal(100)
    assert np.max(np.abs(mix_at_snr(s, n, 300.0) - s)) < 1e-10


def test_mix_at_snr_self_interference():
    s = np.random.default_rng(1).standard_normal(50)
    np.testing.assert_allclose(mix_at_snr(s, s, 0.0), 2 * s, rtol=1e-12)


def test_mix_at_snr_silent_interference():
    with pytest.raises(ValueError):
        mix_at_snr(np.ones(4), np.zeros(4), 0.0)


def test_mix_at_snr_loops_short_interference():
    s = np.ones(10)
    out = mix_at_snr(s, np.array([1.0, -1.0, 1.0]), 0.0)
    assert len(out) == 10


@settings(max_examples=30, deadline=None)
@given(snr=st.floats(-20, 20), seed=st.integers(0, 10_000))
def test_mix_achieves_requested_snr(snr, seed):
    rng = np.random.default_rng(seed)
    s, n = rng.standard_normal(256), rng.standard_normal(256)
    residual = mix_at_snr(s, n, snr) - s
    assert 20 * math.log10(rms(s) / rms(residual)) == pytest.approx(snr, abs=1e-9)


def test_mixture_type_frequencies(speakers):
    # binomial 3-sigma bound on the uniform type draw
    cfg = MixConfig()
    n = 10000
    counts = dict.fromkeys(MIXTURE_TYPES, 0)
    for i in range(n):
        rng = np.random.default_rng([99, i])
        counts[MIXTURE_TYPES[int(rng.integers(3))]] += 1
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for c in counts.values():
        assert abs(c - n / 3) < 3 * sigma


def test_sample_example_type_frequencies(speakers):
    cfg = MixConfig(min_phones=3, max_phones=3, n_harmonics=4, enroll_dur=0.1)
    n = 600
    types = [sample_example(cfg, np.random.default_rng([5, i]), speakers).mixture_type for i in range(n)]
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for t in MIXTURE_TYPES:
        assert abs(types.count(t) - n / 3) < 3 * sigma


@pytest.fixture(scope="module")
def examples():
    return make_dataset(MixConfig(), 3, 30)


def test_views_differ_and_are_additive(examples):
    for ex in examples:
        da = ex.view_a.samples - ex.clean.samples
        db = ex.view_b.samples - ex.clean.samples
        assert not np.array_equal(da, db)
        assert len(ex.view_a) == len(ex.clean) == len(ex.view_b)
        np.testing.assert_allclose(da, ex.gain * ex.interference_a, atol=1e-6)
        np.testing.assert_allclose(db, ex.gain * ex.interference_b, atol=1e-6)


def test_enrollment_properties(examples):
    for ex in examples:
        assert ex.enrollment_phones != ex.clean_phones
        assert len(ex.enrollment) == 16000
        if ex.interferer_speaker is not None:
            assert ex.interferer_speaker != ex.target_speaker
            assert len(ex.interferer_phone_labels) == len(ex.phone_labels)


def test_peak_normalized(examples):
    for ex in examples:
        for w in (ex.clean, ex.view_a, ex.view_b, ex.enrollment):
            assert np.abs(w.samples).max() <= 1.0
            assert np.all(np.isfinite(w.samples))


def test_labels_align_with_frontend(examples):
    for ex in examples:
        assert len(ex.phone_labels) == n_frames(len(ex.clean), FC.kernels, FC.strides)


def test_single_speaker_two_talker_rejected():
    cfg = MixConfig(n_speakers=1)
    with pytest.raises(ValueError):
        sample_example(cfg, np.random.default_rng(0), make_speakers(cfg), mixture_type="two_talker")


def test_dataset_regeneration_bitwise():
    a = make_dataset(MixConfig(), 11, 4)
    b = make_dataset(MixConfig(), 11, 4)
    for x, y in zip(a, b):
        for f in ("clean", "view_a", "view_b", "enrollment"):
            assert getattr(x, f).samples.tobytes() == getattr(y, f).samples.tobytes()


def test_manifest_round_trip(tmp_path, examples):
    path = write_manifest(examples[:5], tmp_path / "m")
    back = read_manifest(path)
    assert [e.id for e in back] == [e.id for e in examples[:5]]
    for x, y in zip(examples[:5], back):
        assert np.array_equal(x.view_a.samples, y.view_a.samples)
        assert np.array_equal(x.phone_labels, y.phone_labels)
        assert x.mixture_type == y.mixture_type
        assert (x.interferer is None) == (y.interferer is None)
    again = write_manifest(examples[:5], tmp_path / "m2")
    assert manifest_digest(path) == manifest_digest(again)
