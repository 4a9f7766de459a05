import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from portraitgen.losses import (
    IdentityFeatureExtractor,
    LossWeights,
    RandomConvFeatureExtractor,
    adversarial_losses,
    consistency_loss,
    perceptual_loss,
    reconstruction_loss,
    total_losses,
    velocity_loss,
)

LN2 = float(np.log(2.0))


class TestLossWeights:
    def test_stage_presets(self):
        assert LossWeights.stage1() == LossWeights(100.0, 0.0, 0.0, 1.0)
        assert LossWeights.stage2() == LossWeights(100.0, 1.0, 1.0, 1.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 0.0, 0.0, 0.0)


class TestReconstruction:
    def test_zero_at_identical(self):
        y = torch.rand(2, 3, 8, 8)
        yc = torch.rand(2, 3, 2, 2)
        assert reconstruction_loss(y, y, yc, yc).item() == 0

    def test_constant_offset_closed_form(self):
        y = torch.zeros(1, 3, 4, 4)
        yc = torch.zeros(1, 3, 2, 2)
        # fine off by 0.5 -> MSE 0.25; coarse off by 1 -> MSE 1
        val = reconstruction_loss(y, y + 0.5, yc, yc + 1.0)
        assert val.item() == pytest.approx(0.25 + 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 8, 8),
                                torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2))

    @given(st.integers(0, 500))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_symmetric_in_pairs(self, seed):
        g = torch.Generator().manual_seed(seed)
        y, p = torch.rand(1, 3, 4, 4, generator=g), torch.rand(1, 3, 4, 4, generator=g)
        yc, pc = torch.rand(1, 3, 2, 2, generator=g), torch.rand(1, 3, 2, 2, generator=g)
        a = reconstruction_loss(y, p, yc, pc)
        b = reconstruction_loss(p, y, pc, yc)
        assert a.item() >= 0
        assert a.item() == pytest.approx(b.item(), rel=1e-6)


class TestPerceptual:
    def test_identity_extractor_closed_form(self):
        fx = IdentityFeatureExtractor()
        g = torch.zeros(2, 3, 4, 4)
        t = torch.full((2, 3, 4, 4), 0.3)
        # channel means differ by 0.3 everywhere, one feature channel
        assert perceptual_loss(g, t, fx).item() == pytest.approx(0.3, rel=1e-6)

    def test_sums_over_channels(self):
        fx = RandomConvFeatureExtractor(seed=0, channels=4)
        g, t = torch.zeros(1, 3, 8, 8), torch.ones(1, 3, 8, 8)
        fg, ft = fx(g), fx(t)
        expected = (ft - fg).abs().mean(dim=(0, 2, 3)).sum().item()
        assert perceptual_loss(g, t, fx).item() == pytest.approx(expected)

    def test_extractor_is_frozen(self):
        fx = RandomConvFeatureExtractor(seed=0)
        assert all(not p.requires_grad for p in fx.parameters())

    def test_extractor_deterministic(self):
        a = RandomConvFeatureExtractor(seed=7)
        b = RandomConvFeatureExtractor(seed=7)
        x = torch.randn(1, 3, 8, 8)
        torch.testing.assert_close(a(x), b(x))

    def test_gradient_reaches_image_not_extractor(self):
        fx = RandomConvFeatureExtractor(seed=0)
        g = torch.rand(1, 3, 8, 8, requires_grad=True)
        perceptual_loss(g, torch.zeros(1, 3, 8, 8), fx).backward()
        assert g.grad is not None and g.grad.abs().sum() > 0


class TestConsistency:
    def test_zero_when_estimator_exact(self):
        phi = lambda img: img.mean(dim=(2, 3)).repeat(1, 58)[:, :58] * 0 + 0.5
        target = torch.full((2, 58), 0.5)
        assert consistency_loss(target, torch.rand(2, 3, 8, 8), phi).item() == 0

    def test_mse_closed_form(self):
        phi = lambda img: torch.zeros(img.shape[0], 58)
        target = torch.ones(3, 58)
        assert consistency_loss(target, torch.rand(3, 3, 8, 8), phi).item() == pytest.approx(1.0)

    def test_gradient_into_image_only(self):
        conv = torch.nn.Conv2d(3, 58, 8)
        for p in conv.parameters():
            p.requires_grad_(False)
        phi = lambda img: conv(img).reshape(img.shape[0], 58)
        g = torch.rand(1, 3, 8, 8, requires_grad=True)
        consistency_loss(torch.zeros(1, 58), g, phi).backward()
        assert g.grad is not None and g.grad.abs().sum() > 0


class TestAdversarial:
    def test_zero_logits_reference_values(self):
        z = torch.zeros(2, 1, 4, 4)
        ld, lg = adversarial_losses(z, z)
        assert ld.item() == pytest.approx(2 * LN2, rel=1e-6)
        assert lg.item() == pytest.approx(LN2, rel=1e-6)

    def test_confident_discriminator_low_loss(self):
        ld, _ = adversarial_losses(torch.full((1, 1, 2, 2), 10.0), torch.full((1, 1, 2, 2), -10.0))
        assert ld.item() < 1e-3

    def test_fooled_discriminator_low_generator_loss(self):
        _, lg = adversarial_losses(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 10.0))
        assert lg.item() < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adversarial_losses(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3))

    @given(st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=40, deadline=None)
    def test_monotonic_in_logits(self, r, f):
        shape = (1, 1, 2, 2)
        ld, lg = adversarial_losses(torch.full(shape, r), torch.full(shape, f))
        ld2, lg2 = adversarial_losses(torch.full(shape, r + 1.0), torch.full(shape, f))
        assert ld2.item() < ld.item()  # higher real logit always helps D
        _, lg3 = adversarial_losses(torch.full(shape, r), torch.full(shape, f + 1.0))
        assert lg3.item() < lg.item()  # higher fake logit always helps G


class TestVelocity:
    def test_closed_form_unit_vector(self):
        v = np.zeros(32)
        v[0] = 1.0
        # ||v|| + ||0|| + ||v - 0|| = 2
        assert velocity_loss(v, np.zeros(32)).item() == pytest.approx(2.0)

    def test_zero_at_origin(self):
        assert velocity_loss(np.zeros(32), np.zeros(32)).item() == 0

    def test_no_squares(self):
        v = np.zeros(32)
        v[0] = 3.0
        # with squared norms this would be 9 + 9 = 18
        assert velocity_loss(v, v).item() == pytest.approx(6.0)

    def test_batch_averaging(self):
        a = np.zeros((2, 32))
        a[0, 0] = 1.0
        per_row = [2.0, 0.0]
        assert velocity_loss(a, np.zeros((2, 32))).item() == pytest.approx(np.mean(per_row))

    def test_gradient_flows(self):
        v = torch.randn(2, 32, requires_grad=True)
        velocity_loss(v, v.detach() * 0.5).backward()
        assert v.grad is not None

    @given(st.integers(0, 500))
    @settings(max_examples=30, deadline=None)
    def test_symmetry_and_nonnegativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=32), rng.normal(size=32)
        assert velocity_loss(a, b).item() == pytest.approx(velocity_loss(b, a).item(), rel=1e-9)
        assert velocity_loss(a, b).item() >= 0


class TestTotalLosses:
    def test_stage1_combination(self):
        comps = {"rec": torch.tensor(0.5), "vel": torch.tensor(2.0)}
        lg, ld = total_losses(comps, LossWeights.stage1(), stage=1)
        assert lg.item() == pytest.approx(100 * 0.5 + 1 * 2.0)
        assert ld.item() == 0

    def test_stage1_rejects_adversarial_components(self):
        comps = {"rec": torch.tensor(0.5), "vel": torch.tensor(0.1), "adv_g": torch.tensor(1.0)}
        with pytest.raises(ValueError):
            total_losses(comps, LossWeights.stage1(), stage=1)

    def test_stage1_rejects_nonzero_alpha23(self):
        comps = {"rec": torch.tensor(0.5), "vel": torch.tensor(0.1)}
        with pytest.raises(ValueError):
            total_losses(comps, LossWeights.stage2(), stage=1)

    def test_stage2_combination(self):
        comps = {
            "rec": torch.tensor(0.1),
            "per": torch.tensor(0.2),
            "con": torch.tensor(0.3),
            "vel": torch.tensor(0.4),
            "adv_g": torch.tensor(0.5),
            "adv_d": torch.tensor(0.6),
        }
        lg, ld = total_losses(comps, LossWeights.stage2(), stage=2)
        assert lg.item() == pytest.approx(0.5 + 100 * 0.1 + 0.2 + 0.3 + 0.4)
        assert ld.item() == pytest.approx(0.6)

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            total_losses({}, LossWeights.stage1(), stage=3)
