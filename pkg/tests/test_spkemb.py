import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from shubert.config import FrontendConfig, SpkEmbConfig
from shubert.spkemb import SpeakerEmbedder, embed_enrollment, l2_normalize, oracle_embedding


def _embedder():
    torch.manual_seed(0)
    return SpeakerEmbedder(FrontendConfig(), SpkEmbConfig()).double()


def test_oracle_deterministic_and_unit_norm():
    a = oracle_embedding(3, 7, 32)
    assert np.array_equal(a, oracle_embedding(3, 7, 32))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6
    assert not np.array_equal(a, oracle_embedding(3, 8, 32))


def test_oracle_pairs_nearly_orthogonal():
    cos = [abs(float(oracle_embedding(2 * i, 0) @ oracle_embedding(2 * i + 1, 0))) for i in range(100)]
    assert max(cos) < 0.7


def test_oracle_rejects_negative_id():
    with pytest.raises(ValueError):
        oracle_embedding(-1)


def test_constant_frames_give_projection_of_single_frame():
    emb = _embedder()
    row = torch.randn(64, dtype=torch.float64)
    frames = row.expand(1, 12, 64)
    with torch.no_grad():
        got = emb.embed_frames(frames)[0]
        want = l2_normalize(emb.proj(row))
    torch.testing.assert_close(got, want, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 30))
def test_frame_permutation_invariance(seed, T):
    emb = _embedder()
    g = torch.Generator().manual_seed(seed)
    frames = torch.randn(1, T, 64, generator=g, dtype=torch.float64)
    perm = torch.randperm(T, generator=g)
    with torch.no_grad():
        a = emb.embed_frames(frames)
        b = emb.embed_frames(frames[:, perm])
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_palindromic_frame_sequence_matches_reversal():
    emb = _embedder()
    g = torch.Generator().manual_seed(1)
    half = torch.randn(1, 5, 64, generator=g, dtype=torch.float64)
    frames = torch.cat([half, half.flip(1)], dim=1)
    with torch.no_grad():
        assert torch.equal(emb.embed_frames(frames), emb.embed_frames(frames.flip(1)))


def test_enrollment_unit_norm_and_length_aware():
    emb = _embedder()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(4000) * 0.05
    with torch.no_grad():
        e = embed_enrollment(x, emb)
        assert e.shape == (32,)
        assert abs(float(e.norm()) - 1.0) < 1e-12
        # zero padding with explicit lengths does not change the embedding
        padded = torch.tensor(np.stack([np.concatenate([x, np.zeros(2000)]), rng.standard_normal(6000)]))
        eb = emb(padded, torch.tensor([4000, 6000]))
    torch.testing.assert_close(eb[0], e, atol=1e-12, rtol=0)


def test_short_enrollment_rejected():
    emb = _embedder()
    with pytest.raises(ValueError):
        embed_enrollment(np.zeros(100), emb)
    with pytest.raises(ValueError):
        emb(torch.zeros(2, 1000, dtype=torch.float64), torch.tensor([1000, 100]))
