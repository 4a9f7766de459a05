"""Training objectives and per-stage weight schedules.

Reconstruction (fine + coarse MSE), perceptual (per-channel L1 against a
texture image), parameter consistency through a frozen estimator,
non-saturating patch adversarial terms, and the latent velocity loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    alpha1: float  # reconstruction
    alpha2: float  # perceptual
    alpha3: float  # consistency
    alpha4: float  # velocity

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ValueError("loss weights must be non-negative")

    @staticmethod
    def stage1() -> "LossWeights":
        return LossWeights(100.0, 0.0, 0.0, 1.0)

    @staticmethod
    def stage2() -> "LossWeights":
        return LossWeights(100.0, 1.0, 1.0, 1.0)


class FeatureExtractor(nn.Module):
    """Fixed (non-trained) map image -> I feature channels.

    Subclasses set ``n_channels`` and implement ``features``; parameters
    are frozen so no gradient ever reaches the extractor itself.
    """

    n_channels: int = 0

    def features(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise ValueError("expected (B, C, H, W) images")
        out = self.features(images)
        if out.shape[1] != self.n_channels:
            raise RuntimeError("extractor channel count mismatch")
        return out

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class IdentityFeatureExtractor(FeatureExtractor):
    """Channel-mean of the image itself; 1 feature channel."""

    n_channels = 1

    def features(self, images):
        return images.mean(dim=1, keepdim=True)


class RandomConvFeatureExtractor(FeatureExtractor):
    """Small fixed random-weight conv stack (random-feature perceptual family)."""

    def __init__(self, seed: int = 0, channels: int = 16):
        super().__init__()
        self.n_channels = channels
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, channels, 3, stride=2, padding=1)
            self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.freeze()

    def features(self, images):
        h = torch.tanh(self.conv1(images))
        return torch.tanh(self.conv2(h))


class PooledFeatureExtractor(RandomConvFeatureExtractor):
    """Globally pooled random-conv features: color/texture statistics only.

    Spatial pooling removes geometry from the perceptual signal. Used as
    the desk-scale stage-II default because auxiliary frames are paired
    with nearest-neighbor textures whose geometry differs from the target
    parameters by construction; a spatially local perceptual pull would
    drag those frames toward the wrong geometry and fight the
    consistency loss.
    """

    def features(self, images):
        return F.adaptive_avg_pool2d(super().features(images), 1)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(y, g, y_coarse, g_coarse) -> torch.Tensor:
    """Pixel MSE of the full pair plus MSE of the coarse pair.

    ``y_coarse`` is the ground truth downsampled to the coarse grid (the
    caller supplies it, normally via bilinear downsampling).
    """
    y, g = torch.as_tensor(y), torch.as_tensor(g)
    y_coarse, g_coarse = torch.as_tensor(y_coarse), torch.as_tensor(g_coarse)
    _check_same_shape(y, g, "reconstruction_loss fine pair")
    _check_same_shape(y_coarse, g_coarse, "reconstruction_loss coarse pair")
    return F.mse_loss(g, y) + F.mse_loss(g_coarse, y_coarse)


def perceptual_loss(g, t, fx: FeatureExtractor) -> torch.Tensor:
    """Sum over feature channels of the mean absolute feature difference."""
    g, t = torch.as_tensor(g), torch.as_tensor(t)
    _check_same_shape(g, t, "perceptual_loss")
    fg, ft = fx(g), fx(t)
    return (ft - fg).abs().mean(dim=(0, 2, 3)).sum()


def consistency_loss(c_target: torch.Tensor, g: torch.Tensor, phi) -> torch.Tensor:
    """MSE between the driving parameters and the estimate phi(g).

    ``c_target`` is (B, 58): pose + expression + gaze concatenated. The
    estimator phi is frozen; gradients flow only into g.
    """
    pred = phi(g)
    c_target = torch.as_tensor(c_target)
    _check_same_shape(pred, c_target, "consistency_loss")
    return F.mse_loss(pred, c_target)


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Non-saturating patch GAN losses -> (L_D, L_G).

    L_D = mean softplus(d_fake) + mean softplus(-d_real) pushes real
    logits up and fake logits down; L_G = mean softplus(-d_fake).
    """
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    _check_same_shape(d_real, d_fake, "adversarial_losses")
    loss_d = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
    loss_g = F.softplus(-d_fake).mean()
    return loss_d, loss_g


def velocity_loss(v_i, v_next) -> torch.Tensor:
    """(||v_i|| + ||v_next||) + ||v_i - v_next||, Euclidean, no squares.

    Accepts single codes (32,) or batches (B, 32); batches are averaged.
    """
    v_i = torch.as_tensor(np.asarray(v_i, dtype=np.float64)) if not torch.is_tensor(v_i) else v_i
    v_next = (
        torch.as_tensor(np.asarray(v_next, dtype=np.float64))
        if not torch.is_tensor(v_next)
        else v_next
    )
    _check_same_shape(v_i, v_next, "velocity_loss")
    norms = v_i.norm(dim=-1) + v_next.norm(dim=-1)
    diff = (v_i - v_next).norm(dim=-1)
    return (norms + diff).mean()


def total_losses(components: dict, weights: LossWeights, stage: int):
    """Combine per-term values into (L_G, L_D) per the stage contract.

    Stage I uses only reconstruction + velocity (alpha2 = alpha3 = 0,
    no adversarial terms); stage II adds perceptual, consistency and the
    adversarial pair.
    """
    w = weights
    if stage == 1:
        if w.alpha2 != 0 or w.alpha3 != 0:
            raise ValueError("stage I requires alpha2 = alpha3 = 0")
        for k in ("adv_g", "adv_d", "per", "con"):
            if k in components:
                raise ValueError(f"stage I must not receive component {k!r}")
        loss_g = w.alpha1 * components["rec"] + w.alpha4 * components["vel"]
        return loss_g, torch.zeros(())
    if stage == 2:
        loss_g = (
            components["adv_g"]
            + w.alpha1 * components["rec"]
            + w.alpha2 * components["per"]
            + w.alpha3 * components["con"]
            + w.alpha4 * components["vel"]
        )
        return loss_g, components["adv_d"]
    raise ValueError(f"unknown stage {stage}")
