import numpy as np
import pytest
import torch

from portraitgen.audio import AudioEncoder, AudioWindow, SelfAttention, build_audio_encoder
from portraitgen.core import AUDIO_DIM, AUDIO_WINDOW_SHAPE


class TestAudioWindow:
    def test_accepts_valid(self):
        w = AudioWindow(np.zeros(AUDIO_WINDOW_SHAPE))
        assert w.features.shape == AUDIO_WINDOW_SHAPE
        assert w.features.dtype == np.float32

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            AudioWindow(np.zeros((16, 28)))

    def test_rejects_nonfinite(self):
        bad = np.zeros(AUDIO_WINDOW_SHAPE)
        bad[3, 7] = np.inf
        with pytest.raises(ValueError):
            AudioWindow(bad)


class TestSelfAttention:
    def test_weights_are_row_stochastic(self):
        torch.manual_seed(0)
        attn = SelfAttention(8)
        x = torch.randn(2, 5, 8)
        _, w = attn(x, return_weights=True)
        assert w.shape == (2, 5, 5)
        torch.testing.assert_close(w.sum(dim=-1), torch.ones(2, 5))
        assert (w >= 0).all()

    def test_residual_identity_when_out_zeroed(self):
        attn = SelfAttention(8)
        with torch.no_grad():
            attn.out.weight.zero_()
            attn.out.bias.zero_()
        x = torch.randn(1, 4, 8)
        torch.testing.assert_close(attn(x), x)

    def test_permutation_equivariance_with_identical_keys(self):
        # identical time steps -> every output step identical
        attn = SelfAttention(6)
        x = torch.ones(1, 5, 6) * 0.3
        out = attn(x)
        torch.testing.assert_close(out, out[:, :1].expand_as(out))

    def test_rejects_wrong_dim(self):
        attn = SelfAttention(8)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 4, 7))


class TestAudioEncoder:
    def test_output_shape(self):
        enc = build_audio_encoder(seed=0)
        out = enc(torch.randn(3, *AUDIO_WINDOW_SHAPE))
        assert out.shape == (3, AUDIO_DIM)

    def test_single_window_auto_batched(self):
        enc = build_audio_encoder(seed=0)
        out = enc(torch.randn(*AUDIO_WINDOW_SHAPE))
        assert out.shape == (1, AUDIO_DIM)

    def test_temporal_downsampling_16_to_4(self):
        enc = build_audio_encoder(seed=0)
        h = torch.randn(1, AUDIO_WINDOW_SHAPE[1], 16)
        h = enc.conv1(h)
        assert h.shape[-1] == 8
        assert enc.conv2(h).shape[-1] == 4

    def test_rejects_wrong_window(self):
        enc = build_audio_encoder(seed=0)
        with pytest.raises(ValueError):
            enc(torch.randn(2, 16, 28))

    def test_encode_convenience(self):
        enc = build_audio_encoder(seed=0)
        rng = np.random.default_rng(0)
        vec = enc.encode(AudioWindow(rng.normal(size=AUDIO_WINDOW_SHAPE)))
        assert vec.shape == (AUDIO_DIM,)
        assert np.all(np.isfinite(vec))

    def test_deterministic_build_and_forward(self):
        a, b = build_audio_encoder(seed=3), build_audio_encoder(seed=3)
        x = torch.randn(2, *AUDIO_WINDOW_SHAPE)
        torch.testing.assert_close(a(x), b(x))

    def test_input_dependence(self):
        enc = build_audio_encoder(seed=0)
        a = enc(torch.zeros(1, *AUDIO_WINDOW_SHAPE))
        b = enc(torch.ones(1, *AUDIO_WINDOW_SHAPE))
        assert (a - b).abs().max() > 0

    def test_trainable(self):
        enc = build_audio_encoder(seed=0)
        out = enc(torch.randn(2, *AUDIO_WINDOW_SHAPE))
        out.square().mean().backward()
        grads = [p.grad for p in enc.parameters()]
        assert all(g is not None for g in grads)
        assert any(g.abs().sum() > 0 for g in grads)
