"""Audio-related network: 16x29 speech-feature windows -> 32-d audio vectors.

Two temporal 1D convolutions (16 -> 4 steps), scaled dot-product
self-attention with a residual connection, temporal mean pooling and a
linear head. Trained jointly with the generator in audio-driven mode.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import AUDIO_DIM, AUDIO_WINDOW_SHAPE


class AudioWindow:
    """A validated 16x29 window of speech features."""

    def __init__(self, features):
        arr = np.asarray(features, dtype=np.float32)
        if arr.shape != AUDIO_WINDOW_SHAPE:
            raise ValueError(f"audio window must be {AUDIO_WINDOW_SHAPE}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("audio window contains non-finite values")
        self.features = arr


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over time, with residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, seq, return_weights: bool = False):
        if seq.ndim != 3 or seq.shape[-1] != self.dim:
            raise ValueError(f"expected (B, T, {self.dim}) input, got {tuple(seq.shape)}")
        q, k, v = self.query(seq), self.key(seq), self.value(seq)
        weights = torch.softmax(q @ k.transpose(-1, -2) / self.dim**0.5, dim=-1)
        attended = self.out(weights @ v) + seq
        if return_weights:
            return attended, weights
        return attended


class AudioEncoder(nn.Module):
    def __init__(self, hidden: int = 64):
        super().__init__()
        n_feat = AUDIO_WINDOW_SHAPE[1]
        self.conv1 = nn.Conv1d(n_feat, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(hidden, hidden, 3, stride=2, padding=1)
        self.attention = SelfAttention(hidden)
        self.head = nn.Linear(hidden, AUDIO_DIM)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, 16, 29) windows -> (B, 32) audio vectors."""
        if windows.ndim == 2:
            windows = windows.unsqueeze(0)
        if windows.shape[1:] != AUDIO_WINDOW_SHAPE:
            raise ValueError(f"expected (B,) + {AUDIO_WINDOW_SHAPE}, got {tuple(windows.shape)}")
        h = windows.permute(0, 2, 1).contiguous()  # channels = features, length = time
        h = F.leaky_relu(self.conv1(h), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = self.attention(h.permute(0, 2, 1))
        return self.head(h.mean(dim=1))

    def encode(self, window: AudioWindow) -> np.ndarray:
        with torch.no_grad():
            out = self.forward(torch.as_tensor(window.features).unsqueeze(0))
        return out[0].numpy()


def build_audio_encoder(seed: int, hidden: int = 64) -> AudioEncoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = AudioEncoder(hidden)
    return model
