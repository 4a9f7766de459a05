import numpy as np
import pytest
import torch

from portraitgen.core import FaceParams, Mode
from portraitgen.toyworld import ToyIdentity, fit_toy_estimator, make_toy_video

torch.manual_seed(0)


@pytest.fixture(scope="session")
def identity():
    return ToyIdentity(0)


@pytest.fixture(scope="session")
def performing_video(identity):
    return make_toy_video(identity, 64, param_trajectory_seed=0, size=64, name="perf")


@pytest.fixture(scope="session")
def toy_estimator(identity):
    return fit_toy_estimator(identity, seed=0)


@pytest.fixture(scope="session")
def toy_embedder():
    from portraitgen.metrics import train_toy_embedder

    return train_toy_embedder(identity_seeds=(0, 1, 2, 3), seed=0)


@pytest.fixture
def neutral_params():
    return FaceParams(np.zeros(6), np.zeros(50), np.zeros(2))


def make_params(rng, mode=Mode.VIDEO_DRIVEN):
    audio = rng.normal(size=32).astype(np.float32) if mode == Mode.AUDIO_DRIVEN else None
    return FaceParams(
        pose=rng.normal(scale=0.3, size=6),
        expression=rng.normal(scale=0.3, size=50),
        gaze=rng.normal(scale=0.3, size=2),
        audio=audio,
        mode=mode,
    )


def fd_gradient_check(make_loss, params, n_probe=8, eps=1e-5, rel_tol=1e-3, seed=0):
    """Central finite differences vs autograd on a random slice of components.

    ``make_loss`` recomputes the scalar loss from scratch; ``params`` are
    float64 leaf tensors with requires_grad=True.
    """
    loss = make_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        for idx in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
            lp = make_loss().item()
            with torch.no_grad():
                flat[idx] = orig - eps
            lm = make_loss().item()
            with torch.no_grad():
                flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = gflat[idx].item()
            denom = max(abs(fd), abs(an), 1e-4)
            worst = max(worst, abs(fd - an) / denom)
    assert worst < rel_tol, f"finite-difference mismatch: worst relative error {worst:.2e}"
    return worst
