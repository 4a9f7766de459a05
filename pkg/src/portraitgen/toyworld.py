"""Synthetic toy-face world: renderer, datasets, parameter estimator.

A deterministic analytic renderer gives ground-truth images for *any*
face parameter, which is what makes the generalization claims testable:
held-out parameters have known targets. Also owns dataset persistence
(manifest + params.jsonl + numbered PNG frames) and nearest-neighbor
texture retrieval.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .core import (
    EXPR_DIM,
    AUDIO_WINDOW_SHAPE,
    FaceParams,
    Frame,
    Mode,
    Role,
    VideoDataset,
    param_distance,
)

VALID_RENDER_SIZES = (32, 64, 128, 256)

# Documented trajectory / geometry constants.
MAX_PARAM_STEP = 0.08  # per-frame bound on any parameter delta in toy videos
TRANSLATION_PX_PER_UNIT = 0.5  # pixel shift = pose[1] * size * 0.5
USED_POSE_DIMS = 3
USED_EXPR_DIMS = 5
USED_DIM_COUNT = USED_POSE_DIMS + USED_EXPR_DIMS + 2  # + gaze


@dataclass(frozen=True)
class ToyIdentity:
    """Appearance constants derived deterministically from a seed."""

    seed: int

    @property
    def traits(self) -> dict:
        rng = np.random.default_rng(self.seed)
        return {
            "face_color": rng.uniform(0.55, 0.85, 3),
            "bg_a": rng.uniform(0.05, 0.35, 3),
            "bg_b": rng.uniform(0.15, 0.45, 3),
            "bg_angle": rng.uniform(0, 2 * np.pi),
            "face_rx": rng.uniform(0.30, 0.38),
            "face_ry": rng.uniform(0.40, 0.48),
            "eye_dx": rng.uniform(0.13, 0.17),
            "eye_y": rng.uniform(0.10, 0.16),
            "eye_r": rng.uniform(0.055, 0.075),
            "mouth_y": rng.uniform(0.20, 0.26),
            "mouth_w": rng.uniform(0.12, 0.16),
            "brow_gap": rng.uniform(0.06, 0.09),
            "nose_len": rng.uniform(0.06, 0.10),
        }


def _ellipse_alpha(u, v, cx, cy, rx, ry, edge):
    """Anti-aliased ellipse coverage via a smooth ramp on normalized radius."""
    r = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return np.clip((1.0 - r) / edge + 0.5, 0.0, 1.0)


def render_toy_face(identity: ToyIdentity, params: FaceParams, size: int) -> np.ndarray:
    """Deterministic analytic face render, (size, size, 3) float32 in [-1, 1].

    Parameter wiring: pose[0] in-plane rotation (radians), pose[1]
    horizontal translation (pixel shift = pose[1] * size / 2), pose[2]
    log-scale of the head; expression[0] mouth openness, [1] mouth
    curvature, [2]/[3] left/right eye openness, [4] eyebrow raise;
    gaze offsets the pupils. Remaining dims are carried but ignored.
    Output is quantized to the 8-bit grid so PNG round trips are bitwise.
    """
    if size not in VALID_RENDER_SIZES:
        raise ValueError(f"size must be one of {VALID_RENDER_SIZES}, got {size}")
    t = identity.traits
    xs = np.linspace(-1.0, 1.0, size)
    u, v = np.meshgrid(xs, xs)  # v grows downward (row-major)

    theta = float(params.pose[0])
    tx = float(params.pose[1])
    scale = float(np.exp(np.clip(params.pose[2], -1.0, 1.0)))
    e = params.expression
    edge = 3.0 / size  # ~1.5 px anti-aliasing band in grid units

    # Face-frame coordinates: undo translation, rotation, scale.
    uc, vc = u - tx, v
    cos_t, sin_t = np.cos(-theta), np.sin(-theta)
    uf = (uc * cos_t - vc * sin_t) / scale
    vf = (uc * sin_t + vc * cos_t) / scale

    # Background: fixed per identity, never moves with the head.
    g = 0.5 + 0.5 * (np.cos(t["bg_angle"]) * u + np.sin(t["bg_angle"]) * v) / np.sqrt(2)
    img = t["bg_a"][None, None, :] * (1 - g[..., None]) + t["bg_b"][None, None, :] * g[..., None]

    def paint(alpha, color):
        nonlocal img
        img = img * (1 - alpha[..., None]) + np.asarray(color)[None, None, :] * alpha[..., None]

    head = _ellipse_alpha(uf, vf, 0.0, 0.0, t["face_rx"], t["face_ry"], edge)
    paint(head, t["face_color"])

    # Eyebrows (raise with e[4]).
    brow_y = -(t["eye_y"] + t["brow_gap"] + 0.06 * float(np.clip(e[4], -1, 1)))
    for sx in (-1.0, 1.0):
        brow = _ellipse_alpha(uf, vf, sx * t["eye_dx"], brow_y, t["eye_r"] * 1.2, 0.02, edge)
        paint(brow * head, t["face_color"] * 0.35)

    # Eyes and gaze-driven pupils.
    for sx, open_coef in ((-1.0, float(e[2])), (1.0, float(e[3]))):
        openness = float(np.clip(0.7 + 0.6 * open_coef, 0.08, 1.6))
        ry_eye = t["eye_r"] * openness
        eye = _ellipse_alpha(uf, vf, sx * t["eye_dx"], -t["eye_y"], t["eye_r"] * 1.15, ry_eye, edge)
        paint(eye * head, np.array([0.95, 0.95, 0.95]))
        px = sx * t["eye_dx"] + 0.5 * t["eye_r"] * float(np.clip(params.gaze[0], -1, 1))
        py = -t["eye_y"] + 0.5 * ry_eye * float(np.clip(params.gaze[1], -1, 1))
        pupil = _ellipse_alpha(uf, vf, px, py, t["eye_r"] * 0.45, t["eye_r"] * 0.45, edge)
        paint(pupil * eye * head, np.array([0.08, 0.08, 0.12]))

    # Nose: static identity feature.
    nose = _ellipse_alpha(uf, vf, 0.0, 0.06, 0.025, t["nose_len"], edge)
    paint(nose * head, t["face_color"] * 0.8)

    # Mouth: openness e[0], curvature e[1] bends the centerline.
    openness = float(np.clip(0.5 + 0.7 * float(e[0]), 0.1, 1.8))
    curve = 0.08 * float(np.clip(e[1], -1, 1))
    bend = curve * ((uf / t["mouth_w"]) ** 2 - 0.5)
    mouth = _ellipse_alpha(uf, vf - bend, 0.0, t["mouth_y"], t["mouth_w"], 0.045 * openness, edge)
    paint(mouth * head, np.array([0.55, 0.15, 0.18]))
    if openness > 0.6:  # inner mouth appears as it opens
        inner = _ellipse_alpha(
            uf, vf - bend, 0.0, t["mouth_y"], t["mouth_w"] * 0.7, 0.03 * (openness - 0.5), edge
        )
        paint(inner * head, np.array([0.12, 0.04, 0.05]))

    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return (quantized.astype(np.float32) / 255.0) * 2.0 - 1.0


_AUDIO_BASE = None


def _audio_base_pattern():
    global _AUDIO_BASE
    if _AUDIO_BASE is None:
        tt = np.hanning(AUDIO_WINDOW_SHAPE[0])
        ff = np.linspace(0.2, 1.0, AUDIO_WINDOW_SHAPE[1])
        _AUDIO_BASE = np.outer(tt, ff).astype(np.float32)
    return _AUDIO_BASE


def make_toy_video(
    identity: ToyIdentity,
    n_frames: int,
    param_trajectory_seed: int,
    size: int = 64,
    role: Role = Role.PERFORMING,
    mode: Mode = Mode.VIDEO_DRIVEN,
    with_images: bool = True,
    name: str | None = None,
) -> VideoDataset:
    """Smooth random-walk parameter trajectory with rendered frames.

    Each trajectory orbits a seed-dependent center, so distinct seeds
    occupy distinct parameter-space regions; every per-frame parameter
    delta is bounded by MAX_PARAM_STEP.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    rng = np.random.default_rng(param_trajectory_seed)
    center = np.zeros(USED_DIM_COUNT)
    center[:USED_POSE_DIMS] = rng.uniform(-0.45, 0.45, USED_POSE_DIMS)
    center[USED_POSE_DIMS : USED_POSE_DIMS + USED_EXPR_DIMS] = rng.uniform(-0.6, 0.6, USED_EXPR_DIMS)
    center[-2:] = rng.uniform(-0.45, 0.45, 2)
    expr_rest = rng.normal(0.0, 0.05, EXPR_DIM - USED_EXPR_DIMS).astype(np.float32)

    mode = Mode(mode)
    frames = []
    x = center.copy()
    for i in range(n_frames):
        pose = np.zeros(6, dtype=np.float32)
        pose[:USED_POSE_DIMS] = x[:USED_POSE_DIMS]
        expr = np.zeros(EXPR_DIM, dtype=np.float32)
        expr[:USED_EXPR_DIMS] = x[USED_POSE_DIMS : USED_POSE_DIMS + USED_EXPR_DIMS]
        expr[USED_EXPR_DIMS:] = expr_rest
        gaze = x[-2:].astype(np.float32)
        window = None
        if mode == Mode.AUDIO_DRIVEN:
            noise = rng.normal(0.0, 0.05, AUDIO_WINDOW_SHAPE).astype(np.float32)
            window = _audio_base_pattern() * float(expr[0]) + noise
        params = FaceParams(pose, expr, gaze, audio_window=window, mode=mode)
        image = render_toy_face(identity, params, size) if with_images else None
        frames.append(Frame(params=params, index=i, image=image))
        step = 0.12 * (center - x) + rng.normal(0.0, 0.03, USED_DIM_COUNT)
        x = x + np.clip(step, -MAX_PARAM_STEP, MAX_PARAM_STEP)
        x = np.clip(x, center - 0.25, center + 0.25)

    return VideoDataset(
        frames=frames,
        role=role,
        name=name or f"toy_id{identity.seed}_traj{param_trajectory_seed}",
    )


class EstimatorFitError(RuntimeError):
    pass


class ToyParamEstimator(nn.Module):
    """Differentiable image -> 58-d (pose|expression|gaze) regressor.

    Two stages: a pose head reads the pooled image directly, then the
    image is differentiably warped into the canonical (pose-free) frame
    with the predicted pose and a second head regresses expression and
    gaze there. Estimating the fine cues on the canonicalized face is
    what makes the fit sample-efficient; a single monolithic head
    plateaus well above the validation threshold because every
    expression dim has to be learned jointly with rotation, shift and
    scale. Inputs are average-pooled to 64x64, so any render or
    generator resolution is accepted. Frozen after fitting.
    """

    def __init__(self):
        super().__init__()

        def stack(channels):
            return nn.ModuleList(
                nn.Conv2d(channels[i], channels[i + 1], 3, stride=2, padding=1)
                for i in range(len(channels) - 1)
            )

        # pose reads a 64x64 pooled view; the rigid transform is coarse
        self.pose_convs = stack([3, 16, 32, 64, 128])
        self.pose_fc1 = nn.Linear(128 * 4 * 4, 128)
        self.pose_fc2 = nn.Linear(128, 6)
        # expression/gaze read the canonicalized 128x128 view: mouth
        # height, brow shift and pupil offsets are sub-pixel at 64
        self.expr_convs = stack([3, 16, 32, 64, 128, 128])
        self.expr_fc1 = nn.Linear(128 * 4 * 4, 128)
        self.expr_fc2 = nn.Linear(128, EXPR_DIM + 2)

    @staticmethod
    def _trunk(convs, fc1, fc2, h):
        for conv in convs:
            h = F.leaky_relu(conv(h), 0.2)
        h = F.leaky_relu(fc1(h.flatten(1)), 0.2)
        return fc2(h)

    @staticmethod
    def _canonicalize(images, pose):
        """Inverse-warp by the predicted rigid pose (differentiable)."""
        theta = pose[:, 0]
        tx = pose[:, 1]
        scale = torch.exp(torch.clamp(pose[:, 2], -1.0, 1.0))
        cos_t, sin_t = torch.cos(theta), torch.sin(theta)
        # canonical (uf, vf) samples the source at s*R(theta)*[uf,vf] + [tx,0]
        mat = torch.stack(
            [
                torch.stack([scale * cos_t, -scale * sin_t, tx], dim=1),
                torch.stack([scale * sin_t, scale * cos_t, torch.zeros_like(tx)], dim=1),
            ],
            dim=1,
        )
        grid = F.affine_grid(mat, list(images.shape), align_corners=True)
        return F.grid_sample(images, grid, align_corners=True, padding_mode="border")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError("expected (B, 3, H, W) images")
        pose = self._trunk(
            self.pose_convs, self.pose_fc1, self.pose_fc2, F.adaptive_avg_pool2d(images, 64)
        )
        canon = self._canonicalize(F.adaptive_avg_pool2d(images, 128), pose)
        rest = self._trunk(self.expr_convs, self.expr_fc1, self.expr_fc2, canon)
        return torch.cat([pose, rest], dim=1)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


USED_DIM_INDEX = np.array([0, 1, 2] + [6 + i for i in range(USED_EXPR_DIMS)] + [56, 57])

ESTIMATOR_VALIDATION_THRESHOLD = 0.05  # mean abs error over the used dims


def face_crop(images, params_list, out_size: int = 32) -> torch.Tensor:
    """Partially aligned face crops, analog of ArcFace-style alignment.

    The renderer's rigid transform gives the face's centre and radius in
    closed form from the driving parameters, so both ground-truth and
    generated frames are cropped with the same box and resampled to
    ``out_size``. The box follows half of the horizontal translation and
    scales with the head radius: this keeps the face inside the crop so
    metrics are not dominated by background pixels, while residual
    displacement stays visible, so an embedder trained on these crops
    both tolerates moderate misplacement (it varies in the training
    distribution) and can still penalise it.

    ``images``: (B, H, W, 3) array or list of (H, W, 3) frames in [-1, 1].
    Returns a (B, 3, out_size, out_size) float tensor.
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
    if len(params_list) != x.shape[0]:
        raise ValueError("one FaceParams per image required")
    crops = []
    for i, p in enumerate(params_list):
        tx = float(p.pose[1])
        scale = float(np.exp(np.clip(p.pose[2], -1.0, 1.0)))
        # grid coordinates: face centre at (tx, 0), head radius ~0.62*scale
        r = 0.62 * scale
        cx, cy = 0.5 * tx, 0.0
        ys = torch.linspace(cy - r, cy + r, out_size)
        xs = torch.linspace(cx - r, cx + r, out_size)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        grid = torch.stack([gx, gy], dim=-1).unsqueeze(0)
        crops.append(
            F.grid_sample(
                x[i : i + 1], grid, mode="bilinear", padding_mode="border", align_corners=True
            )[0]
        )
    return torch.stack(crops)


def _random_used_params(rng) -> FaceParams:
    pose = np.zeros(6, dtype=np.float32)
    pose[:3] = rng.uniform(-0.55, 0.55, 3)
    expr = np.zeros(EXPR_DIM, dtype=np.float32)
    expr[:USED_EXPR_DIMS] = rng.uniform(-0.75, 0.75, USED_EXPR_DIMS)
    gaze = rng.uniform(-0.55, 0.55, 2).astype(np.float32)
    return FaceParams(pose, expr, gaze)


def fit_toy_estimator(
    identity: ToyIdentity,
    n_samples: int = 3000,
    seed: int = 0,
    size: int = 128,
    steps: int = 3000,
    batch: int = 32,
) -> ToyParamEstimator:
    """Train the toy parameter regressor on fresh renders; returned frozen.

    Fitting is staged to match the model: the pose head trains alone
    first, then the training set is canonicalized once with the frozen
    pose predictions and the expression/gaze head trains on the aligned
    images. Raises EstimatorFitError with diagnostics if the held-out
    mean parameter error on the renderer-controlled dims is not below
    ESTIMATOR_VALIDATION_THRESHOLD.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    rng = np.random.default_rng(seed)
    n_val = max(n_samples // 6, 100)
    params = [_random_used_params(rng) for _ in range(n_samples + n_val)]
    images = np.stack([render_toy_face(identity, p, size) for p in params])
    targets = np.stack([p.concat() for p in params])
    x = torch.as_tensor(images).permute(0, 3, 1, 2).contiguous()
    y = torch.as_tensor(targets)
    x_train, y_train = x[:n_samples], y[:n_samples]
    x_val, y_val = x[n_samples:], y[n_samples:]

    used_w = torch.ones(EXPR_DIM + 2)
    used_w[:USED_EXPR_DIMS] = 5.0
    used_w[-2:] = 5.0

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyParamEstimator()
        sampler = torch.Generator().manual_seed(seed)

        pose_params = list(model.pose_convs.parameters()) + list(
            model.pose_fc1.parameters()
        ) + list(model.pose_fc2.parameters())
        opt = torch.optim.Adam(pose_params, lr=1e-3)
        x_train_64 = F.adaptive_avg_pool2d(x_train, 64)
        for _ in range(steps):
            idx = torch.randint(0, n_samples, (batch,), generator=sampler)
            opt.zero_grad()
            pose = model._trunk(model.pose_convs, model.pose_fc1, model.pose_fc2, x_train_64[idx])
            F.mse_loss(pose, y_train[idx][:, :6]).backward()
            opt.step()

        # canonicalize once with the now-fixed pose head, then train the
        # expression/gaze head on the aligned images
        model.eval()
        canon = []
        with torch.no_grad():
            for start in range(0, n_samples, 256):
                pose = model._trunk(
                    model.pose_convs, model.pose_fc1, model.pose_fc2,
                    x_train_64[start : start + 256],
                )
                canon.append(
                    model._canonicalize(
                        F.adaptive_avg_pool2d(x_train[start : start + 256], 128), pose
                    )
                )
        canon = torch.cat(canon)
        model.train()

        expr_params = list(model.expr_convs.parameters()) + list(
            model.expr_fc1.parameters()
        ) + list(model.expr_fc2.parameters())
        opt = torch.optim.Adam(expr_params, lr=1e-3)
        y_rest = y_train[:, 6:]
        for _ in range(steps):
            idx = torch.randint(0, n_samples, (batch,), generator=sampler)
            opt.zero_grad()
            rest = model._trunk(model.expr_convs, model.expr_fc1, model.expr_fc2, canon[idx])
            (((rest - y_rest[idx]).square()) * used_w).mean().backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        pred = model(x_val)
    err = (pred - y_val).abs().numpy()[:, USED_DIM_INDEX].mean()
    if err >= ESTIMATOR_VALIDATION_THRESHOLD:
        raise EstimatorFitError(
            f"toy estimator validation error {err:.4f} >= "
            f"{ESTIMATOR_VALIDATION_THRESHOLD} (n_samples={n_samples}, steps={steps}, "
            f"size={size}, seed={seed}); increase steps or samples"
        )
    return model.freeze()


# ---------------------------------------------------------------------------
# Dataset persistence: manifest.json + params.jsonl + frames/NNNNNN.png


class DatasetError(ValueError):
    pass


def save_dataset(dataset: VideoDataset, out_dir, extra: dict | None = None) -> Path:
    """Write manifest + parameter records + PNG frames; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    has_images = any(f.image is not None for f in dataset.frames)
    resolution = None
    if has_images:
        resolution = int(next(f.image.shape[0] for f in dataset.frames if f.image is not None))
        (out / "frames").mkdir(exist_ok=True)

    with open(out / "params.jsonl", "w") as fh:
        for f in dataset.frames:
            rec = {
                "index": f.index,
                "pose": [float(v) for v in f.params.pose],
                "expression": [float(v) for v in f.params.expression],
                "gaze": [float(v) for v in f.params.gaze],
            }
            if f.params.audio is not None:
                rec["audio"] = [float(v) for v in f.params.audio]
            if f.params.audio_window is not None:
                rec["audio_window"] = [[float(v) for v in row] for row in f.params.audio_window]
            fh.write(json.dumps(rec) + "\n")
            if f.image is not None:
                u8 = np.round((f.image + 1.0) * 0.5 * 255.0).astype(np.uint8)
                Image.fromarray(u8).save(out / "frames" / f"{f.index:06d}.png")

    manifest = {
        "format_version": 1,
        "name": dataset.name,
        "role": dataset.role.value,
        "mode": dataset.frames[0].params.mode.value if dataset.frames else "video_driven",
        "frame_count": len(dataset.frames),
        "resolution": resolution,
        "params_file": "params.jsonl",
        "frames_dir": "frames" if has_images else None,
    }
    if extra:
        manifest["extra"] = extra
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(manifest_path) -> VideoDataset:
    """Load a dataset directory; bitwise-inverse of save_dataset."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    base = path.parent
    mode = Mode(manifest.get("mode", "video_driven"))
    frames_dir = manifest.get("frames_dir")

    frames = []
    params_path = base / manifest["params_file"]
    if not params_path.exists():
        raise DatasetError(f"parameter file missing: {params_path}")
    with open(params_path) as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                params = FaceParams(
                    pose=rec["pose"],
                    expression=rec["expression"],
                    gaze=rec["gaze"],
                    audio=rec.get("audio"),
                    audio_window=rec.get("audio_window"),
                    mode=mode,
                )
                index = int(rec["index"])
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise DatasetError(f"bad parameter record at line {lineno} of {params_path}: {exc}")
            image = None
            if frames_dir is not None:
                img_path = base / frames_dir / f"{index:06d}.png"
                if img_path.exists():
                    u8 = np.asarray(Image.open(img_path), dtype=np.uint8)
                    image = (u8.astype(np.float32) / 255.0) * 2.0 - 1.0
                else:
                    raise DatasetError(f"frame image missing for index {index}: {img_path}")
            frames.append(Frame(params=params, index=index, image=image))

    if len(frames) != manifest["frame_count"]:
        raise DatasetError(
            f"frame_count {manifest['frame_count']} != {len(frames)} records on disk"
        )
    return VideoDataset(frames=frames, role=Role(manifest["role"]), name=manifest["name"])


def nearest_texture(
    c: FaceParams,
    performing: VideoDataset,
    w_pose: float = 1.0,
    w_expr: float = 1.0,
    w_gaze: float = 0.0,
) -> Frame:
    """Performing frame whose parameters are closest to c (lowest index on ties)."""
    candidates = [f for f in performing.frames if f.image is not None]
    if not candidates:
        raise ValueError("performing dataset has no frames with images")
    best, best_d = None, float("inf")
    for f in candidates:
        d = param_distance(c, f.params, w_pose, w_expr, w_gaze)
        if d < best_d:
            best, best_d = f, d
    return best


def frames_to_tensor(frames: list[Frame]) -> torch.Tensor:
    """Stack frame images into a (B, 3, H, W) float tensor."""
    imgs = []
    for f in frames:
        if f.image is None:
            raise ValueError(f"frame {f.index} has no image")
        imgs.append(f.image)
    return torch.as_tensor(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
