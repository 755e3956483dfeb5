import numpy as np
import pytest
import torch

from shubert.config import FrontendConfig
from shubert.frontend import ConvFrontend, encode_frames, frame_centers, hop_length, n_frames, receptive_field
from shubert.mixsim import Waveform, make_dataset


def _frontend(dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return ConvFrontend(FrontendConfig()).to(dtype)


def test_default_geometry():
    cfg = FrontendConfig()
    # rf = 1 + sum (k_i - 1) * prod(previous strides)
    assert receptive_field(cfg.kernels, cfg.strides) == 1 + 63 + 7 * 8 + 4 * 32 + 2 * 160
    assert hop_length(cfg.strides) == 320


def test_frame_count_boundaries():
    fe = _frontend()
    rf = fe.receptive_field
    assert encode_frames(np.zeros(rf), fe).shape == (1, 64)
    assert encode_frames(np.zeros(rf + 320), fe).shape == (2, 64)
    assert encode_frames(np.zeros(rf + 319), fe).shape == (1, 64)
    for L in (rf, 1000, 8000, 12345):
        assert fe.n_frames(L) == (L - rf) // 320 + 1


def test_too_short_rejected():
    fe = _frontend()
    with pytest.raises(ValueError, match="receptive field"):
        encode_frames(np.zeros(fe.receptive_field - 1), fe)
    assert n_frames(10, fe.kernels, fe.strides) == 0


def test_zero_waveform_gives_identical_rows():
    fe = _frontend()
    with torch.no_grad():
        for conv in fe.convs:  # nonzero biases so the bias response is non-trivial
            conv.bias.normal_()
        H = encode_frames(np.zeros(4000), fe)
    assert torch.isfinite(H).all()
    assert torch.equal(H, H[:1].expand_as(H))


def test_hop_shift_equivariance():
    fe = _frontend()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(6000) * 0.05
    with torch.no_grad():
        H = encode_frames(x, fe)
        Hs = encode_frames(np.concatenate([np.zeros(320), x]), fe)
    assert Hs.shape[0] == H.shape[0] + 1
    torch.testing.assert_close(Hs[2:], H[1:], atol=1e-6, rtol=0)


def test_batch_matches_single():
    fe = _frontend()
    rng = np.random.default_rng(1)
    x = torch.tensor(rng.standard_normal((3, 3000)) * 0.05)
    with torch.no_grad():
        Hb = fe(x)
        for i in range(3):
            torch.testing.assert_close(Hb[i], fe(x[i]), atol=1e-12, rtol=0)


def test_accepts_waveform_type():
    fe = _frontend()
    w = Waveform(np.full(2000, 0.1), 16000)
    assert encode_frames(w, fe).shape[0] == fe.n_frames(2000)


def test_labels_align_with_frames(tiny_cfg):
    ds = make_dataset(tiny_cfg.mix, 3, 6, frontend=tiny_cfg.frontend)
    fc = tiny_cfg.frontend
    for ex in ds:
        T = n_frames(len(ex.clean), fc.kernels, fc.strides)
        assert len(ex.phone_labels) == T
        assert len(frame_centers(T, fc.kernels, fc.strides)) == T
