"""Shared domain types and pure operations.

Face parameters, frames, datasets, the per-frame latent table, positional
encoding, coordinate grids, parameter distances and conditioning-vector
assembly. Everything here is deterministic and reentrant; only
:class:`LatentTable` is mutated (during training, externally serialized).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

POSE_DIM = 6
EXPR_DIM = 50
GAZE_DIM = 2
AUDIO_DIM = 32
LATENT_DIM = 32
AUDIO_WINDOW_SHAPE = (16, 29)


class Mode(str, enum.Enum):
    VIDEO_DRIVEN = "video_driven"
    AUDIO_DRIVEN = "audio_driven"


class Role(str, enum.Enum):
    PERFORMING = "performing"
    AUXILIARY = "auxiliary"
    DRIVEN = "driven"


def _as_f32(x, dim, name):
    arr = np.asarray(x, dtype=np.float32).reshape(-1)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have dimension {dim}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FaceParams:
    """One frame's control signal: pose (R6), expression (R50), gaze (R2).

    In audio-driven mode the frame additionally carries either a raw
    16x29 speech-feature window, an encoded 32-d audio vector, or both.
    """

    pose: np.ndarray
    expression: np.ndarray
    gaze: np.ndarray
    audio: np.ndarray | None = None
    audio_window: np.ndarray | None = None
    mode: Mode = Mode.VIDEO_DRIVEN

    def __post_init__(self):
        object.__setattr__(self, "pose", _as_f32(self.pose, POSE_DIM, "pose"))
        object.__setattr__(self, "expression", _as_f32(self.expression, EXPR_DIM, "expression"))
        object.__setattr__(self, "gaze", _as_f32(self.gaze, GAZE_DIM, "gaze"))
        if self.audio is not None:
            object.__setattr__(self, "audio", _as_f32(self.audio, AUDIO_DIM, "audio"))
        if self.audio_window is not None:
            win = np.asarray(self.audio_window, dtype=np.float32)
            if win.shape != AUDIO_WINDOW_SHAPE:
                raise ValueError(f"audio_window must be {AUDIO_WINDOW_SHAPE}, got {win.shape}")
            if not np.all(np.isfinite(win)):
                raise ValueError("audio_window contains non-finite values")
            object.__setattr__(self, "audio_window", win)
        has_audio = self.audio is not None or self.audio_window is not None
        if (self.mode == Mode.AUDIO_DRIVEN) != has_audio:
            raise ValueError("audio data must be present iff mode is audio_driven")

    def concat(self) -> np.ndarray:
        """pose + expression + gaze stacked into a single R58 vector."""
        return np.concatenate([self.pose, self.expression, self.gaze])


@dataclass
class Frame:
    """Image plus its face parameters and temporal index.

    ``image`` may be None for parameter-only datasets (auxiliary/driven).
    """

    params: FaceParams
    index: int
    image: np.ndarray | None = None
    latent_id: str | None = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float32)
            if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
                raise ValueError(f"image must be HxWx3 with H=W, got {img.shape}")
            if img.min() < -1.0 or img.max() > 1.0:
                raise ValueError("image values must lie in [-1, 1]")
            self.image = img


@dataclass
class VideoDataset:
    """An ordered frame sequence with a training role."""

    frames: list[Frame]
    role: Role
    name: str

    def __post_init__(self):
        self.role = Role(self.role)
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.index != prev.index + 1:
                raise ValueError(
                    f"frame indices must increase by 1 ({prev.index} -> {cur.index})"
                )

    def __len__(self):
        return len(self.frames)

    def has_images(self) -> bool:
        return all(f.image is not None for f in self.frames)

    def param_space(self, label: str = "S") -> "ParamSpace":
        return ParamSpace([f.params for f in self.frames], label=label)


@dataclass
class ParamSpace:
    """A finite set of face parameters with simple coverage queries."""

    entries: list[FaceParams]
    label: str = "S"

    def __len__(self):
        return len(self.entries)

    def union(self, other: "ParamSpace", label: str = "S_prime") -> "ParamSpace":
        return ParamSpace(list(self.entries) + list(other.entries), label=label)

    def matrix(self, target: str = "expression") -> np.ndarray:
        if target not in ("expression", "pose", "gaze"):
            raise ValueError(f"unknown target {target!r}")
        return np.stack([getattr(p, target) for p in self.entries])

    def contains_all(self, other: "ParamSpace") -> bool:
        """Set inclusion by exact parameter equality."""
        keys = {p.concat().tobytes() for p in self.entries}
        return all(p.concat().tobytes() in keys for p in other.entries)


class LatentTable:
    """Per-frame learnable 32-d latent codes keyed by (dataset name, index)."""

    def __init__(self, dim: int = LATENT_DIM, learnable: bool = True):
        self.dim = dim
        self.learnable = learnable
        self._codes: dict[str, torch.nn.Parameter] = {}

    @staticmethod
    def key(name: str, index: int) -> str:
        return f"{name}/{index:06d}"

    def allocate(self, name: str, index: int, init: np.ndarray | None = None) -> str:
        k = self.key(name, index)
        if k not in self._codes:
            if init is None:
                t = torch.zeros(self.dim, dtype=torch.float32)
            else:
                t = torch.as_tensor(np.asarray(init, dtype=np.float32))
                if t.shape != (self.dim,):
                    raise ValueError(f"latent init must have dim {self.dim}")
            self._codes[k] = torch.nn.Parameter(t, requires_grad=self.learnable)
        return k

    def __contains__(self, key: str) -> bool:
        return key in self._codes

    def get(self, key: str) -> torch.nn.Parameter:
        return self._codes[key]

    def keys(self):
        return self._codes.keys()

    def parameters(self):
        return list(self._codes.values())

    def mean_code(self) -> torch.Tensor:
        if not self._codes:
            return torch.zeros(self.dim)
        return torch.stack([p.detach() for p in self._codes.values()]).mean(0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.detach().numpy().copy() for k, p in self._codes.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self._codes = {
            k: torch.nn.Parameter(
                torch.as_tensor(np.asarray(v, dtype=np.float32)),
                requires_grad=self.learnable,
            )
            for k, v in arrays.items()
        }


@dataclass(frozen=True)
class EncodingConfig:
    """Frequency counts for the positional encodings fed to the generator."""

    n_freq_coord: int = 10
    n_freq_pose: int = 4
    n_freq_gaze: int = 4
    encode_expression: bool = False

    def __post_init__(self):
        for f in (self.n_freq_coord, self.n_freq_pose, self.n_freq_gaze):
            if f < 1:
                raise ValueError("all frequency counts must be >= 1")


def positional_encode(x, n_freq: int):
    """Sinusoidal encoding [sin(2^k pi x), cos(2^k pi x)] for k < n_freq.

    Bands are interleaved per frequency: sin block then cos block for
    band 0, then band 1, etc. Works on numpy arrays and torch tensors;
    the trailing axis is expanded from d to 2*n_freq*d.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    if isinstance(x, torch.Tensor):
        if not torch.isfinite(x).all():
            raise ValueError("positional_encode input must be finite")
        parts = []
        for k in range(n_freq):
            arg = (2.0**k) * torch.pi * x
            parts.append(torch.sin(arg))
            parts.append(torch.cos(arg))
        return torch.cat(parts, dim=-1)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("positional_encode input must be finite")
    parts = []
    for k in range(n_freq):
        arg = (2.0**k) * np.pi * arr
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def make_coordinate_grid(h: int, w: int) -> np.ndarray:
    """Row-major (x, y) grid spanning [-1, 1]^2 with corners included."""
    if h < 2 or w < 2:
        raise ValueError("grid dimensions must be >= 2")
    xs = np.linspace(-1.0, 1.0, w)
    ys = np.linspace(-1.0, 1.0, h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def conditioning_dim(cfg: EncodingConfig, mode: Mode) -> int:
    """Dimension of the assembled conditioning vector for a given mode."""
    d = 2 * cfg.n_freq_coord * 2 + 2 * cfg.n_freq_pose * POSE_DIM + 2 * cfg.n_freq_gaze * GAZE_DIM
    if cfg.encode_expression:
        d += 2 * cfg.n_freq_pose * EXPR_DIM
    else:
        d += EXPR_DIM
    if Mode(mode) == Mode.AUDIO_DRIVEN:
        d += AUDIO_DIM
    return d + LATENT_DIM


def build_conditioning_vector(
    coord, params: FaceParams, latent, cfg: EncodingConfig = EncodingConfig()
) -> np.ndarray:
    """Assemble the generator input for one pixel.

    Fixed concatenation order (stable for checkpoint portability):
    encode(coord) | encode(pose) | encode(gaze) | expression |
    [audio vector, audio-driven only] | latent.
    """
    coord = np.asarray(coord, dtype=np.float64).reshape(-1)
    if coord.shape != (2,):
        raise ValueError("coord must be a 2-vector")
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    if latent.shape != (LATENT_DIM,):
        raise ValueError(f"latent must have dimension {LATENT_DIM}")
    parts = [
        positional_encode(coord, cfg.n_freq_coord),
        positional_encode(params.pose, cfg.n_freq_pose),
        positional_encode(params.gaze, cfg.n_freq_gaze),
    ]
    if cfg.encode_expression:
        parts.append(positional_encode(params.expression, cfg.n_freq_pose))
    else:
        parts.append(params.expression.astype(np.float64))
    if params.mode == Mode.AUDIO_DRIVEN:
        if params.audio is None:
            raise ValueError("audio-driven params need an encoded audio vector")
        parts.append(params.audio.astype(np.float64))
    parts.append(latent)
    out = np.concatenate(parts)
    assert out.shape == (conditioning_dim(cfg, params.mode),)
    return out


def param_distance(
    a: FaceParams,
    b: FaceParams,
    w_pose: float = 1.0,
    w_expr: float = 1.0,
    w_gaze: float = 1.0,
) -> float:
    """Weighted Euclidean distance between two parameter vectors."""
    if min(w_pose, w_expr, w_gaze) < 0:
        raise ValueError("distance weights must be non-negative")
    if a.mode != b.mode:
        raise ValueError("param_distance requires matching modes")
    dp = float(np.sum((a.pose - b.pose) ** 2))
    de = float(np.sum((a.expression - b.expression) ** 2))
    dg = float(np.sum((a.gaze - b.gaze) ** 2))
    return float(np.sqrt(w_pose * dp + w_expr * de + w_gaze * dg))
