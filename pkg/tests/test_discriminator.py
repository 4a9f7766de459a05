import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from portraitgen.discriminator import (
    DiscriminatorConfig,
    DiscriminatorModel,
    SNConv2d,
    build_discriminator,
    spectral_normalize,
)


class TestSpectralNormalize:
    def test_diagonal_matrix_sigma(self):
        w = torch.diag(torch.tensor([3.0, 1.0, 0.5]))
        w_norm, _, sigma = spectral_normalize(w, n_iter=50)
        assert sigma.item() == pytest.approx(3.0, rel=1e-5)
        assert torch.linalg.matrix_norm(w_norm, ord=2).item() == pytest.approx(1.0, rel=1e-5)

    def test_rank_one_exact_in_one_iter(self):
        # power iteration converges immediately on a rank-1 matrix
        u = torch.tensor([[2.0], [1.0]])
        v = torch.tensor([[1.0, 2.0, 2.0]])
        w = u @ v  # sigma = |u| * |v| = sqrt(5) * 3
        _, _, sigma = spectral_normalize(w, n_iter=1)
        assert sigma.item() == pytest.approx(np.sqrt(5) * 3, rel=1e-5)

    def test_conv_weight_reshape(self):
        torch.manual_seed(0)
        w = torch.randn(8, 4, 3, 3)
        w_norm, _, sigma = spectral_normalize(w, n_iter=50)
        ref = torch.linalg.matrix_norm(w.reshape(8, -1), ord=2).item()
        assert sigma.item() == pytest.approx(ref, rel=1e-4)
        assert w_norm.shape == w.shape

    def test_scale_invariance(self):
        torch.manual_seed(1)
        w = torch.randn(6, 10)
        a, _, _ = spectral_normalize(w, n_iter=30)
        b, _, _ = spectral_normalize(2.5 * w, n_iter=30)
        torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6)

    def test_zero_weight_warns(self):
        with pytest.warns(UserWarning):
            w_norm, _, sigma = spectral_normalize(torch.zeros(4, 4))
        assert torch.equal(w_norm, torch.zeros(4, 4))
        assert sigma.item() == 0.0

    def test_rejects_nonfinite(self):
        w = torch.full((3, 3), np.nan)
        with pytest.raises(ValueError):
            spectral_normalize(w)

    def test_gradient_flows_through_weight(self):
        w = torch.randn(4, 4, requires_grad=True)
        w_norm, _, _ = spectral_normalize(w, n_iter=10)
        w_norm.sum().backward()
        assert w.grad is not None and torch.isfinite(w.grad).all()

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_sigma_converges_to_matrix_norm(self, seed):
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(5, 7, generator=g)
        _, _, sigma = spectral_normalize(w, n_iter=100)
        ref = torch.linalg.matrix_norm(w, ord=2).item()
        assert sigma.item() == pytest.approx(ref, rel=1e-3)


class TestSNConv2d:
    def test_u_buffer_persists_in_train_mode(self):
        layer = SNConv2d(3, 8, 4, 2, 1)
        u0 = layer.u.clone()
        layer.train()
        layer(torch.randn(1, 3, 16, 16))
        assert not torch.equal(layer.u, u0)
        u1 = layer.u.clone()
        layer.eval()
        layer(torch.randn(1, 3, 16, 16))
        assert torch.equal(layer.u, u1)

    def test_u_in_state_dict(self):
        layer = SNConv2d(3, 8, 4, 2, 1)
        assert "u" in layer.state_dict()

    def test_effective_sigma_near_one(self):
        torch.manual_seed(0)
        layer = SNConv2d(3, 8, 4, 2, 1).train()
        for _ in range(20):  # let power iteration settle
            layer(torch.randn(1, 3, 16, 16))
        assert layer.effective_sigma() == pytest.approx(1.0, rel=1e-2)


class TestDiscriminatorModel:
    def test_patch_map_256_to_30(self):
        model = build_discriminator(DiscriminatorConfig(), seed=0)
        out = model(torch.randn(2, 3, 256, 256))
        assert out.shape == (2, 1, 30, 30)

    def test_small_config_shape(self):
        model = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0)
        out = model(torch.randn(1, 3, 64, 64))
        assert out.shape[:2] == (1, 1)
        assert out.shape[-1] < 64

    def test_channel_growth_capped_at_8x(self):
        model = DiscriminatorModel(DiscriminatorConfig(base_channels=4, n_layers=5))
        widths = [c.conv.weight.shape[0] for c in model.convs]
        assert max(widths) == 4 * 8

    def test_rejects_wrong_channels(self):
        model = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0)
        with pytest.raises(ValueError):
            model(torch.randn(1, 1, 64, 64))

    def test_image_size_validation(self):
        model = build_discriminator(DiscriminatorConfig(base_channels=8, image_size=64), seed=0)
        model(torch.randn(1, 3, 64, 64))
        with pytest.raises(ValueError):
            model(torch.randn(1, 3, 32, 32))

    def test_deterministic_build(self):
        a = build_discriminator(DiscriminatorConfig(base_channels=8), seed=5)
        b = build_discriminator(DiscriminatorConfig(base_channels=8), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_all_convs_spectrally_normalized(self):
        model = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0)
        assert len(model.snconvs()) == len(model.convs)

    def test_lipschitz_bound_after_settling(self):
        # once u converges, every layer's effective weight has sigma ~ 1
        torch.manual_seed(0)
        model = build_discriminator(DiscriminatorConfig(base_channels=8), seed=1).train()
        for _ in range(30):
            model(torch.randn(1, 3, 64, 64))
        for conv in model.snconvs():
            assert conv.effective_sigma() == pytest.approx(1.0, rel=2e-2)
