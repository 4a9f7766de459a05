"""Patch-level discriminator with spectral normalization (stage II only).

Canonical 70x70-receptive-field stack: three stride-2 convolutions, one
stride-1, then a stride-1 logit head. Every convolution weight is
divided by a power-iteration estimate of its largest singular value;
the per-weight iteration vectors persist across steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor | None = None, n_iter: int = 1):
    """Divide ``weight`` by its power-iteration top singular value.

    The weight is viewed as a 2D matrix (out_features x rest). Returns
    (normalized weight, updated u vector, sigma estimate). A zero weight
    is returned unchanged with a warning.
    """
    if not torch.isfinite(weight).all():
        raise ValueError("weight contains non-finite values")
    w = weight.reshape(weight.shape[0], -1)
    if torch.count_nonzero(w) == 0:
        warnings.warn("spectral_normalize: zero weight left unchanged")
        if u is None:
            u = torch.ones(w.shape[0]) / w.shape[0] ** 0.5
        return weight, u, torch.tensor(0.0)
    if u is None:
        u = F.normalize(torch.ones(w.shape[0]), dim=0)
    with torch.no_grad():
        for _ in range(n_iter):
            v = F.normalize(w.t() @ u, dim=0)
            u = F.normalize(w @ v, dim=0)
    sigma = torch.einsum("i,ij,j->", u, w, v)
    return weight / sigma, u, sigma.detach()


class SNConv2d(nn.Module):
    """Conv2d whose weight is spectrally normalized at every forward."""

    def __init__(self, in_ch, out_ch, kernel, stride, padding, n_iter: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding)
        self.n_iter = n_iter
        self.register_buffer("u", F.normalize(torch.randn(out_ch), dim=0))

    def forward(self, x):
        w_norm, u, _ = spectral_normalize(self.conv.weight, self.u, self.n_iter)
        if self.training:
            self.u = u
        return F.conv2d(x, w_norm, self.conv.bias, self.conv.stride, self.conv.padding)

    def effective_sigma(self, n_iter: int = 20) -> float:
        """Top singular value of the normalized weight (fresh power iteration)."""
        w_norm, _, _ = spectral_normalize(self.conv.weight, self.u, self.n_iter)
        m = w_norm.detach().reshape(w_norm.shape[0], -1)
        return float(torch.linalg.matrix_norm(m, ord=2))


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 3  # stride-2 conv count after the first
    image_size: int | None = None  # when set, inputs are validated against it


class DiscriminatorModel(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        nf = cfg.base_channels
        layers = [SNConv2d(3, nf, 4, 2, 1)]
        mult = 1
        for i in range(1, cfg.n_layers + 1):
            prev, mult = mult, min(2**i, 8)
            stride = 2 if i < cfg.n_layers else 1
            layers.append(SNConv2d(nf * prev, nf * mult, 4, stride, 1))
        layers.append(SNConv2d(nf * mult, 1, 4, 1, 1))
        self.convs = nn.ModuleList(layers)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Image batch (B, 3, H, W) in [-1, 1] -> patch logit map (B, 1, h, w)."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError("input must be (B, 3, H, W)")
        size = self.cfg.image_size
        if size is not None and (image.shape[2] != size or image.shape[3] != size):
            raise ValueError(
                f"input resolution {tuple(image.shape[2:])} != training resolution {size}"
            )
        h = image
        for conv in self.convs[:-1]:
            h = F.leaky_relu(conv(h), 0.2)
        logits = self.convs[-1](h)
        if logits.shape[-1] >= image.shape[-1]:
            raise RuntimeError("patch map must be spatially smaller than the input")
        return logits

    def snconvs(self):
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> DiscriminatorModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DiscriminatorModel(cfg)
    return model
