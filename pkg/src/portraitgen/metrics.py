"""Evaluation suite: L1, perceptual distance, FID, CSIM, AED/APD, 2D projection.

Embedders are pluggable; the desk-scale FID/CSIM embedder is a small
conv identity classifier trained once on toy renders, so absolute values
are artifact-internal and only orderings are compared across runs.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FaceParams
from .losses import FeatureExtractor
from .toyworld import ToyIdentity, _random_used_params, render_toy_face

FID_SHRINKAGE = 1e-6


def _check_paired(a, b):
    if len(a) != len(b):
        raise ValueError(f"paired sets must have equal sizes ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise ValueError("empty image sets")


def _stack(images) -> np.ndarray:
    return np.stack([np.asarray(im, dtype=np.float64) for im in images])


def l1_metric(a, b) -> float:
    """Mean absolute pixel difference over paired image sets."""
    _check_paired(a, b)
    sa, sb = _stack(a), _stack(b)
    if sa.shape != sb.shape:
        raise ValueError(f"shape mismatch {sa.shape} vs {sb.shape}")
    return float(np.abs(sa - sb).mean())


def perceptual_metric(a, b, fx: FeatureExtractor) -> float:
    """Mean feature-space absolute distance over paired sets."""
    _check_paired(a, b)
    ta = torch.as_tensor(_stack(a), dtype=torch.float32).permute(0, 3, 1, 2)
    tb = torch.as_tensor(_stack(b), dtype=torch.float32).permute(0, 3, 1, 2)
    with torch.no_grad():
        fa, fb = fx(ta), fx(tb)
    return float((fa - fb).abs().mean())


class Embedder(nn.Module):
    """Deterministic map image batch -> (B, d) feature vectors."""

    dim: int = 0

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images):
        return self.embed(images)


def _embed_set(images, emb: Embedder) -> np.ndarray:
    t = torch.as_tensor(_stack(images), dtype=torch.float32).permute(0, 3, 1, 2)
    with torch.no_grad():
        out = emb.embed(t)
    return out.numpy().astype(np.float64)


def _frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    diff = float(np.sum((mu_a - mu_b) ** 2))
    # Tr((Sa Sb)^1/2) via eigendecomposition of Sa^1/2 Sb Sa^1/2, clipping
    # small negative eigenvalues from roundoff at zero.
    wa, va = np.linalg.eigh(cov_a)
    sqrt_a = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    inner = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    return diff + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt


def fid_from_features(fa: np.ndarray, fb: np.ndarray, shrinkage: float = FID_SHRINKAGE) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    fa, fb = np.atleast_2d(fa), np.atleast_2d(fb)
    d = fa.shape[1]
    if shrinkage <= 0 and (fa.shape[0] <= d or fb.shape[0] <= d):
        raise ValueError(f"need more than d={d} samples per set without shrinkage")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.cov(fa, rowvar=False).reshape(d, d) + shrinkage * np.eye(d)
    cov_b = np.cov(fb, rowvar=False).reshape(d, d) + shrinkage * np.eye(d)
    return max(_frechet_gaussian(mu_a, cov_a, mu_b, cov_b), 0.0)


def fid(a, b, emb: Embedder) -> float:
    if len(a) < 2 or len(b) < 2:
        raise ValueError("fid needs at least 2 images per set")
    return fid_from_features(_embed_set(a, emb), _embed_set(b, emb))


def csim(a, b, emb: Embedder) -> float:
    """Mean cosine similarity of paired embeddings; zero-norm pairs skipped."""
    _check_paired(a, b)
    fa, fb = _embed_set(a, emb), _embed_set(b, emb)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    ok = (na > 0) & (nb > 0)
    skipped = int((~ok).sum())
    if skipped:
        import warnings

        warnings.warn(f"csim: skipped {skipped} zero-norm embedding pairs")
    if not ok.any():
        raise ValueError("all embedding pairs have zero norm")
    sims = np.sum(fa[ok] * fb[ok], axis=1) / (na[ok] * nb[ok])
    return float(sims.mean())


def aed_apd(gen, driven, phi) -> tuple[float, float]:
    """Mean L2 of estimated expression / pose coefficients over pairs."""
    _check_paired(gen, driven)
    tg = torch.as_tensor(_stack(gen), dtype=torch.float32).permute(0, 3, 1, 2)
    td = torch.as_tensor(_stack(driven), dtype=torch.float32).permute(0, 3, 1, 2)
    with torch.no_grad():
        pg, pd = phi(tg).numpy(), phi(td).numpy()
    pose_g, pose_d = pg[:, :6], pd[:, :6]
    expr_g, expr_d = pg[:, 6:56], pd[:, 6:56]
    aed = float(np.linalg.norm(expr_g - expr_d, axis=1).mean())
    apd = float(np.linalg.norm(pose_g - pose_d, axis=1).mean())
    return aed, apd


def project_params_2d(sets: dict[str, list[FaceParams]], target: str = "expression"):
    """Top-2 principal-component projection of pooled coefficients.

    Returns {label: (n, 2) array}; deterministic up to a fixed sign
    convention (largest-magnitude loading made positive). Degenerate
    pooled sets (zero variance) map everything to the origin.
    """
    if target not in ("expression", "pose"):
        raise ValueError("target must be 'expression' or 'pose'")
    labels = list(sets.keys())
    mats = [np.stack([getattr(p, target) for p in sets[k]]).astype(np.float64) for k in labels]
    pooled = np.concatenate(mats)
    if pooled.shape[0] < 3:
        raise ValueError("need at least 3 points total")
    centered = pooled - pooled.mean(0)
    if np.allclose(centered, 0):
        return {k: np.zeros((m.shape[0], 2)) for k, m in zip(labels, mats)}
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    out = {}
    start = 0
    projected = centered @ comps.T
    for k, m in zip(labels, mats):
        out[k] = projected[start : start + m.shape[0]]
        start += m.shape[0]
    return out


class ToyEmbedder(Embedder):
    """Small conv identity classifier; penultimate layer is the embedding."""

    def __init__(self, dim: int = 16, n_classes: int = 4):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.fc = nn.Linear(32, dim)
        self.head = nn.Linear(dim, n_classes)

    def embed(self, images):
        h = F.adaptive_avg_pool2d(images, 32)
        h = F.leaky_relu(self.conv1(h), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return self.fc(h.mean(dim=(2, 3)))

    def logits(self, images):
        return self.head(self.embed(images))


def train_toy_embedder(
    identity_seeds=(0, 1, 2, 3),
    seed: int = 0,
    size: int = 64,
    n_per_identity: int = 80,
    steps: int = 600,
) -> ToyEmbedder:
    """Train the desk-scale FID/CSIM embedder once; returned frozen."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls, id_seed in enumerate(identity_seeds):
        ident = ToyIdentity(id_seed)
        for _ in range(n_per_identity):
            images.append(render_toy_face(ident, _random_used_params(rng), size))
            labels.append(cls)
    x = torch.as_tensor(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyEmbedder(n_classes=len(identity_seeds))
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        sampler = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            idx = torch.randint(0, x.shape[0], (32,), generator=sampler)
            opt.zero_grad()
            loss = F.cross_entropy(model.logits(x[idx]), y[idx])
            loss.backward()
            opt.step()
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


class AlignedEmbedder(Embedder):
    """Embedder for face-aligned crops; multi-task trained.

    The embedding is shaped by identity classification plus regression of
    the driving parameters, so its feature distribution is sensitive to
    both appearance and geometry — the desk-scale analog of Inception
    features for FID. Inputs are ``face_crop`` outputs, not full frames.
    """

    def __init__(self, dim: int = 16, n_classes: int = 4):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.fc = nn.Linear(32 * 4, dim)
        self.head = nn.Linear(dim, n_classes)
        self.param_head = nn.Linear(dim, 10)

    def embed(self, crops):
        h = F.leaky_relu(self.conv1(crops), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return self.fc(F.adaptive_avg_pool2d(h, 2).flatten(1))


def train_aligned_embedder(
    identity_seeds=(0, 1, 2, 3),
    seed: int = 0,
    size: int = 64,
    n_per_identity: int = 80,
    steps: int = 800,
    param_weight: float = 5.0,
) -> AlignedEmbedder:
    """Train the aligned-FID embedder on cropped clean renders; frozen.

    Identity classification plus parameter regression on partially
    aligned crops gives an embedding sensitive to identity, geometry and
    facial detail at once, while the residual displacement left by
    ``face_crop`` keeps moderate misplacement in-distribution.
    """
    from .toyworld import USED_DIM_INDEX, face_crop

    rng = np.random.default_rng(seed)
    images, labels, params = [], [], []
    for cls, id_seed in enumerate(identity_seeds):
        ident = ToyIdentity(id_seed)
        for _ in range(n_per_identity):
            p = _random_used_params(rng)
            images.append(render_toy_face(ident, p, size))
            labels.append(cls)
            params.append(p)
    crops = face_crop(np.stack(images), params)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    t = torch.as_tensor(
        np.stack([p.concat()[USED_DIM_INDEX] for p in params]).astype(np.float32)
    )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = AlignedEmbedder(n_classes=len(identity_seeds))
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        sampler = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            idx = torch.randint(0, crops.shape[0], (32,), generator=sampler)
            emb = model.embed(crops[idx])
            loss = F.cross_entropy(model.head(emb), y[idx]) + param_weight * F.mse_loss(
                model.param_head(emb), t[idx]
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def fid_aligned(gen, ref, params_list, emb: AlignedEmbedder) -> float:
    """FID over aligned face crops; both sets share the driving params."""
    from .toyworld import face_crop

    _check_paired(gen, ref)
    with torch.no_grad():
        fa = emb.embed(face_crop(gen, params_list)).numpy()
        fb = emb.embed(face_crop(ref, params_list)).numpy()
    return fid_from_features(fa, fb)
