"""Coordinate-conditioned generator: per-pixel MLP + convolutional decoder.

The MLP maps one conditioning vector per grid pixel to a feature vector
and a coarse RGB estimate; the decoder refines the feature grid with
residual blocks and two bilinear x2 upsamplings (never transposed
convolution), so output resolution = grid_size * 4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    LATENT_DIM,
    EncodingConfig,
    FaceParams,
    Mode,
    conditioning_dim,
    make_coordinate_grid,
    positional_encode,
)


@dataclass(frozen=True)
class GeneratorConfig:
    mlp_layers: int = 8
    mlp_width: int = 128
    feature_dim: int = 128
    residual_blocks: int = 6
    upsample_blocks: int = 2
    grid_size: int = 64
    decoder_channels: int = 128
    mode: Mode = Mode.VIDEO_DRIVEN
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if self.grid_size < 4:
            raise ValueError("grid_size must be >= 4")
        if self.mlp_layers < 1 or self.residual_blocks < 0:
            raise ValueError("invalid architecture counts")

    @property
    def output_size(self) -> int:
        return self.grid_size * 2**self.upsample_blocks

    @property
    def cond_dim(self) -> int:
        return conditioning_dim(self.encoding, self.mode)


def bilinear_upsample(x, factor: int = 2):
    """Bilinear x2 upsampling with corner alignment.

    Accepts a numpy (h, w, c) array or a torch (B, C, H, W) tensor and
    returns the same layout. Exactly linear in its input.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if isinstance(x, np.ndarray):
        if x.ndim != 3:
            raise ValueError("numpy input must be (h, w, c)")
        h, w, _ = x.shape
        if h < 2 or w < 2:
            raise ValueError("spatial dimensions must be >= 2")
        t = torch.as_tensor(x, dtype=torch.float64).permute(2, 0, 1).unsqueeze(0)
        out = F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=True)
        return out.squeeze(0).permute(1, 2, 0).numpy().astype(x.dtype)
    if x.ndim != 4:
        raise ValueError("torch input must be (B, C, H, W)")
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("spatial dimensions must be >= 2")
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)


class CoordMLP(nn.Module):
    """Eight fully connected layers; predicts features and a coarse pixel."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.cond_dim] + [cfg.mlp_width] * (cfg.mlp_layers - 1) + [cfg.feature_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(cfg.mlp_layers)
        )
        self.rgb_head = nn.Linear(cfg.feature_dim, 3)

    def forward(self, cond):
        if cond.shape[-1] != self.cfg.cond_dim:
            raise ValueError(
                f"conditioning dim {cond.shape[-1]} != expected {self.cfg.cond_dim}"
            )
        h = cond
        for layer in self.layers:
            h = F.relu(layer(h))
        coarse = torch.tanh(self.rgb_head(h))
        return h, coarse


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class Decoder(nn.Module):
    """Residual blocks then bilinear x2 upsample+conv stages, tanh output."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.decoder_channels
        self.conv_in = nn.Conv2d(cfg.feature_dim, ch, 3, padding=1)
        self.res_blocks = nn.ModuleList(ResidualBlock(ch) for _ in range(cfg.residual_blocks))
        ups = []
        cur = ch
        for _ in range(cfg.upsample_blocks):
            nxt = max(cur // 2, 8)
            ups.append(
                nn.ModuleDict(
                    {
                        "conv": nn.Conv2d(cur, nxt, 3, padding=1),
                        "norm": nn.InstanceNorm2d(nxt, affine=True),
                    }
                )
            )
            cur = nxt
        self.up_blocks = nn.ModuleList(ups)
        self.conv_out = nn.Conv2d(cur, 3, 3, padding=1)

    def forward(self, feat):
        g = self.cfg.grid_size
        if feat.shape[-1] != g or feat.shape[-2] != g:
            raise ValueError(f"feature map must be {g}x{g}, got {tuple(feat.shape[-2:])}")
        h = F.relu(self.conv_in(feat))
        for block in self.res_blocks:
            h = block(h)
        for up in self.up_blocks:
            h = bilinear_upsample(h)
            h = F.relu(up["norm"](up["conv"](h)))
        return torch.tanh(self.conv_out(h))


class GeneratorModel(nn.Module):
    """Full generator: conditioning assembly, coordinate MLP, decoder."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mlp = CoordMLP(cfg)
        self.decoder = Decoder(cfg)
        grid = make_coordinate_grid(cfg.grid_size, cfg.grid_size).reshape(-1, 2)
        coord_enc = positional_encode(grid, cfg.encoding.n_freq_coord)
        self.register_buffer(
            "coord_enc", torch.as_tensor(coord_enc, dtype=torch.float32), persistent=False
        )

    def conditioning_batch(self, params_list, latents, audio=None):
        """Assemble (B*P, D) conditioning for a batch of frames.

        Mirrors core.build_conditioning_vector's concatenation order;
        ``latents`` is (B, 32) and may carry gradients, ``audio`` is an
        optional (B, 32) tensor (audio-driven mode).
        """
        cfg = self.cfg
        enc = cfg.encoding
        B = len(params_list)
        P = self.coord_enc.shape[0]
        for p in params_list:
            if p.mode != cfg.mode:
                raise ValueError(f"params mode {p.mode} != model mode {cfg.mode}")
        dtype = self.coord_enc.dtype
        pose = torch.as_tensor(np.stack([p.pose for p in params_list])).to(dtype)
        gaze = torch.as_tensor(np.stack([p.gaze for p in params_list])).to(dtype)
        expr = torch.as_tensor(np.stack([p.expression for p in params_list])).to(dtype)
        parts = [
            positional_encode(pose, enc.n_freq_pose),
            positional_encode(gaze, enc.n_freq_gaze),
        ]
        if enc.encode_expression:
            parts.append(positional_encode(expr, enc.n_freq_pose))
        else:
            parts.append(expr)
        if cfg.mode == Mode.AUDIO_DRIVEN:
            if audio is None:
                audio_np = []
                for p in params_list:
                    if p.audio is None:
                        raise ValueError("audio-driven frame lacks an audio vector")
                    audio_np.append(p.audio)
                audio = torch.as_tensor(np.stack(audio_np))
            parts.append(audio.to(dtype))
        elif audio is not None:
            raise ValueError("audio vector supplied to a video-driven model")
        if latents.shape != (B, LATENT_DIM):
            raise ValueError(f"latents must be ({B}, {LATENT_DIM})")
        parts.append(latents.to(dtype))
        per_frame = torch.cat(parts, dim=-1)  # (B, D - coord_dim)
        coord = self.coord_enc.unsqueeze(0).expand(B, P, -1)
        frame = per_frame.unsqueeze(1).expand(B, P, per_frame.shape[-1])
        return torch.cat([coord, frame], dim=-1).reshape(B * P, -1)

    def forward(self, params_list, latents, audio=None):
        """Returns (images B,3,H,W in [-1,1], coarse maps B,3,g,g)."""
        g = self.cfg.grid_size
        B = len(params_list)
        cond = self.conditioning_batch(params_list, latents, audio)
        feat, coarse = self.mlp(cond)
        # .contiguous() is load-bearing: feeding the permuted view straight
        # into the decoder (conv + instance norm + skip fan-out) yields wrong
        # autograd gradients on this torch build.
        feat = feat.reshape(B, g, g, self.cfg.feature_dim).permute(0, 3, 1, 2).contiguous()
        coarse = coarse.reshape(B, g, g, 3).permute(0, 3, 1, 2).contiguous()
        image = self.decoder(feat)
        return image, coarse

    @torch.no_grad()
    def generate(self, params: FaceParams, latent) -> tuple[np.ndarray, np.ndarray]:
        """Single-frame inference; returns (HxWx3 image, gxgx3 coarse map)."""
        lat = torch.as_tensor(np.asarray(latent, dtype=np.float32)).reshape(1, LATENT_DIM)
        image, coarse = self.forward([params], lat)
        return (
            image[0].permute(1, 2, 0).numpy(),
            coarse[0].permute(1, 2, 0).numpy(),
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_generator(cfg: GeneratorConfig, seed: int) -> GeneratorModel:
    """Deterministically initialized generator (isolated RNG fork)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = GeneratorModel(cfg)
    return model
