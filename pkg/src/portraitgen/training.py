"""Two-stage prior-guided training, inference, and checkpointing.

Stage I overfits the generator plus per-frame latent codes to the
performing video (reconstruction + velocity only). Stage II mixes
performing and auxiliary parameter samples 1:1 per batch, adds the
patch discriminator, perceptual and consistency terms, and thereby
widens the trainable parameter space from S to S'.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .audio import AudioEncoder, build_audio_encoder
from .core import LatentTable, Mode, ParamSpace, Role, VideoDataset, FaceParams
from .discriminator import DiscriminatorConfig, DiscriminatorModel, build_discriminator
from .generator import GeneratorConfig, GeneratorModel, build_generator
from .losses import (
    FeatureExtractor,
    LossWeights,
    PooledFeatureExtractor,
    RandomConvFeatureExtractor,
    adversarial_losses,
    consistency_loss,
    perceptual_loss,
    reconstruction_loss,
    total_losses,
    velocity_loss,
)
from .toyworld import ToyParamEstimator, frames_to_tensor, nearest_texture

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Stage1Config:
    iters: int = 100_000
    batch: int = 16
    lr: float = 5e-4


@dataclass(frozen=True)
class Stage2Config:
    iters: int = 100_000
    batch: int = 8
    lr_g: float = 1e-4
    lr_d: float = 4e-4


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    aux_video_count: int = 0
    mode: str = "online"  # online | offline
    seed: int = 0
    log_every: int = 1
    perceptual: str = "random_conv"  # random_conv | pooled

    def __post_init__(self):
        if self.mode not in ("online", "offline"):
            raise ValueError("mode must be 'online' or 'offline'")
        if self.aux_video_count < 0:
            raise ValueError("aux_video_count must be >= 0")
        if self.perceptual not in ("random_conv", "pooled"):
            raise ValueError("perceptual must be 'random_conv' or 'pooled'")

    @property
    def weights_stage1(self) -> LossWeights:
        return LossWeights.stage1()

    @property
    def weights_stage2(self) -> LossWeights:
        return LossWeights.stage2()

    @staticmethod
    def desk_scale(
        grid_size: int = 16,
        seed: int = 0,
        stage1_iters: int = 2000,
        stage2_iters: int = 800,
        batch: int = 4,
        mode: str = "online",
        aux_video_count: int = 0,
        drive_mode: Mode = Mode.VIDEO_DRIVEN,
    ) -> "TrainConfig":
        """Small preset: same loss formulas and weight presets, tiny sizes."""
        return TrainConfig(
            stage1=Stage1Config(iters=stage1_iters, batch=batch, lr=5e-4),
            stage2=Stage2Config(iters=stage2_iters, batch=batch, lr_g=2e-4, lr_d=5e-5),
            generator=GeneratorConfig(
                mlp_width=64,
                feature_dim=64,
                decoder_channels=32,
                grid_size=grid_size,
                mode=drive_mode,
            ),
            # a small, slow discriminator keeps the desk-scale GAN phase
            # stable; paper-scale capacity oscillates badly at this size
            discriminator=DiscriminatorConfig(base_channels=8, n_layers=2),
            aux_video_count=aux_video_count,
            mode=mode,
            seed=seed,
            perceptual="pooled",
        )


@dataclass
class TrainState:
    config: TrainConfig
    generator: GeneratorModel
    latent_table: LatentTable
    opt_g: torch.optim.Optimizer
    rng: torch.Generator
    param_space: ParamSpace
    stage: int = 1
    iteration: int = 0
    discriminator: DiscriminatorModel | None = None
    opt_d: torch.optim.Optimizer | None = None
    audio_encoder: AudioEncoder | None = None
    phi: ToyParamEstimator | None = None
    feature_extractor: FeatureExtractor | None = None
    loss_log: list = field(default_factory=list)


@dataclass
class TrainPlan:
    """Resolved online/offline decision for reporting."""

    mode: str
    auxiliary: list
    includes_driven: bool


def _params_only_copy(dataset: VideoDataset) -> VideoDataset:
    frames = [type(f)(params=f.params, index=f.index, image=None) for f in dataset.frames]
    return VideoDataset(frames=frames, role=Role.AUXILIARY, name=dataset.name)


def select_mode(cfg: TrainConfig, driven: VideoDataset, auxiliary: list | None = None) -> TrainPlan:
    """Offline training appends the driven parameters to the auxiliary pool."""
    pool = list(auxiliary or [])
    if cfg.mode == "offline":
        pool.append(_params_only_copy(driven))
        return TrainPlan(mode="offline", auxiliary=pool, includes_driven=True)
    return TrainPlan(mode="online", auxiliary=pool, includes_driven=False)


def sample_auxiliary(pool: list, k: int, seed: int) -> list:
    """Deterministic prefix of a seeded permutation; selection(k) grows with k."""
    if k > len(pool):
        raise ValueError(f"k={k} exceeds auxiliary pool size {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    return [pool[i] for i in order[:k]]


def _gen_params(state: TrainState):
    params = list(state.generator.parameters()) + state.latent_table.parameters()
    if state.audio_encoder is not None:
        params += list(state.audio_encoder.parameters())
    return params


def _forward_batch(state: TrainState, frames, names):
    """Run the generator on a list of frames using their table latents."""
    keys = [LatentTable.key(n, f.index) for n, f in zip(names, frames)]
    latents = torch.stack([state.latent_table.get(k) for k in keys])
    audio = None
    if state.config.generator.mode == Mode.AUDIO_DRIVEN:
        windows = torch.as_tensor(
            np.stack([f.params.audio_window for f in frames])
        )
        audio = state.audio_encoder(windows)
    images, coarse = state.generator([f.params for f in frames], latents, audio)
    return images, coarse, keys


def _latent_pairs(state: TrainState, dataset_names, indices):
    v_i = torch.stack(
        [state.latent_table.get(LatentTable.key(n, i)) for n, i in zip(dataset_names, indices)]
    )
    v_next = torch.stack(
        [
            state.latent_table.get(LatentTable.key(n, i + 1))
            for n, i in zip(dataset_names, indices)
        ]
    )
    return v_i, v_next


def _downsample(images: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=True)


def init_stage1_state(performing: VideoDataset, cfg: TrainConfig) -> TrainState:
    if not performing.has_images():
        raise ValueError("stage I requires images for every performing frame")
    generator = build_generator(cfg.generator, cfg.seed)
    table = LatentTable()
    for f in performing.frames:
        f.latent_id = table.allocate(performing.name, f.index)
    audio_encoder = None
    if cfg.generator.mode == Mode.AUDIO_DRIVEN:
        audio_encoder = build_audio_encoder(cfg.seed + 17)
    state = TrainState(
        config=cfg,
        generator=generator,
        latent_table=table,
        opt_g=None,
        rng=torch.Generator().manual_seed(cfg.seed),
        param_space=performing.param_space("S"),
        stage=1,
        audio_encoder=audio_encoder,
    )
    state.opt_g = torch.optim.Adam(_gen_params(state), lr=cfg.stage1.lr, betas=(0.9, 0.999))
    return state


def run_stage1(state: TrainState, performing: VideoDataset, n_iters: int) -> TrainState:
    cfg = state.config
    weights = cfg.weights_stage1
    n = len(performing)
    images_all = frames_to_tensor(performing.frames)
    grid = cfg.generator.grid_size
    for _ in range(n_iters):
        idx = torch.randint(0, n - 1, (cfg.stage1.batch,), generator=state.rng)
        frames = [performing.frames[int(i)] for i in idx]
        gen, coarse, _ = _forward_batch(state, frames, [performing.name] * len(frames))
        y = images_all[idx]
        rec = reconstruction_loss(y, gen, _downsample(y, grid), coarse)
        v_i, v_next = _latent_pairs(state, [performing.name] * len(frames), [f.index for f in frames])
        vel = velocity_loss(v_i, v_next)
        loss_g, _ = total_losses({"rec": rec, "vel": vel}, weights, stage=1)
        state.opt_g.zero_grad()
        loss_g.backward()
        state.opt_g.step()
        state.iteration += 1
        if state.iteration % cfg.log_every == 0:
            state.loss_log.append(
                {
                    "iteration": state.iteration,
                    "stage": 1,
                    "rec": float(rec.detach()),
                    "vel": float(vel.detach()),
                    "loss_g": float(loss_g.detach()),
                }
            )
    return state


def train_stage1(performing: VideoDataset, cfg: TrainConfig) -> TrainState:
    state = init_stage1_state(performing, cfg)
    return run_stage1(state, performing, cfg.stage1.iters)


def init_stage2_state(
    state: TrainState,
    performing: VideoDataset,
    auxiliary: list,
    phi: ToyParamEstimator,
    feature_extractor: FeatureExtractor | None = None,
) -> TrainState:
    cfg = state.config
    if cfg.aux_video_count > 0 and not auxiliary:
        raise ValueError("aux_video_count > 0 but the auxiliary pool is empty")
    if state.stage != 1:
        raise ValueError("stage II must start from a stage-I state")
    state.stage = 2
    state.discriminator = build_discriminator(cfg.discriminator, cfg.seed + 1)
    state.opt_d = torch.optim.Adam(
        state.discriminator.parameters(), lr=cfg.stage2.lr_d, betas=(0.9, 0.999)
    )
    state.phi = phi
    if feature_extractor is None:
        fx_cls = PooledFeatureExtractor if cfg.perceptual == "pooled" else RandomConvFeatureExtractor
        feature_extractor = fx_cls(seed=cfg.seed + 2)
    state.feature_extractor = feature_extractor
    for ds in auxiliary:
        for f in ds.frames:
            f.latent_id = state.latent_table.allocate(ds.name, f.index)
    state.opt_g = torch.optim.Adam(_gen_params(state), lr=cfg.stage2.lr_g, betas=(0.9, 0.999))
    space = state.param_space
    for ds in auxiliary:
        space = space.union(ds.param_space(), label="S_prime")
    state.param_space = space
    return state


def run_stage2(
    state: TrainState, performing: VideoDataset, auxiliary: list, n_iters: int
) -> TrainState:
    cfg = state.config
    weights = cfg.weights_stage2
    grid = cfg.generator.grid_size
    n_perf = len(performing)
    perf_images = frames_to_tensor(performing.frames)
    fx = state.feature_extractor
    texture_cache: dict[str, torch.Tensor] = {}

    def aux_texture(ds, frame) -> torch.Tensor:
        key = LatentTable.key(ds.name, frame.index)
        if key not in texture_cache:
            nn_frame = nearest_texture(frame.params, performing)
            texture_cache[key] = torch.as_tensor(nn_frame.image).permute(2, 0, 1).contiguous()
        return texture_cache[key]

    half = max(cfg.stage2.batch // 2, 1)
    for _ in range(n_iters):
        perf_idx = torch.randint(0, n_perf - 1, (half,), generator=state.rng)
        perf_frames = [performing.frames[int(i)] for i in perf_idx]
        aux_frames = []
        if auxiliary:
            for _ in range(half):
                d = int(torch.randint(0, len(auxiliary), (1,), generator=state.rng))
                i = int(torch.randint(0, len(auxiliary[d]) - 1, (1,), generator=state.rng))
                aux_frames.append((auxiliary[d], auxiliary[d].frames[i]))

        frames = perf_frames + [f for _, f in aux_frames]
        names = [performing.name] * len(perf_frames) + [ds.name for ds, _ in aux_frames]
        gen, coarse, _ = _forward_batch(state, frames, names)

        # Discriminator step: real pool is the performing video only.
        real_idx = torch.randint(0, n_perf, (len(frames),), generator=state.rng)
        d_real = state.discriminator(perf_images[real_idx])
        d_fake = state.discriminator(gen.detach())
        adv_d, _ = adversarial_losses(d_real, d_fake)
        state.opt_d.zero_grad()
        adv_d.backward()
        state.opt_d.step()

        # Generator step (reconstruction only where ground truth exists).
        y_perf = perf_images[perf_idx]
        gen_perf, coarse_perf = gen[: len(perf_frames)], coarse[: len(perf_frames)]
        rec = reconstruction_loss(y_perf, gen_perf, _downsample(y_perf, grid), coarse_perf)
        textures = [y_perf[j] for j in range(len(perf_frames))]
        textures += [aux_texture(ds, f) for ds, f in aux_frames]
        per = perceptual_loss(gen, torch.stack(textures), fx)
        c_target = torch.as_tensor(np.stack([f.params.concat() for f in frames]))
        con = consistency_loss(c_target, gen, state.phi)
        indices = [f.index for f in frames]
        v_i, v_next = _latent_pairs(state, names, indices)
        vel = velocity_loss(v_i, v_next)
        _, adv_g = adversarial_losses(d_real.detach(), state.discriminator(gen))
        loss_g, loss_d = total_losses(
            {"rec": rec, "per": per, "con": con, "vel": vel, "adv_g": adv_g, "adv_d": adv_d.detach()},
            weights,
            stage=2,
        )
        state.opt_g.zero_grad()
        loss_g.backward()
        state.opt_g.step()
        state.iteration += 1
        if state.iteration % cfg.log_every == 0:
            state.loss_log.append(
                {
                    "iteration": state.iteration,
                    "stage": 2,
                    "rec": float(rec.detach()),
                    "per": float(per.detach()),
                    "con": float(con.detach()),
                    "vel": float(vel.detach()),
                    "adv_g": float(adv_g.detach()),
                    "adv_d": float(adv_d.detach()),
                    "loss_g": float(loss_g.detach()),
                    "loss_d": float(loss_d.detach()),
                }
            )
    return state


def train_stage2(
    state: TrainState,
    performing: VideoDataset,
    auxiliary: list,
    phi: ToyParamEstimator,
    feature_extractor: FeatureExtractor | None = None,
) -> TrainState:
    state = init_stage2_state(state, performing, auxiliary, phi, feature_extractor)
    return run_stage2(state, performing, auxiliary, state.config.stage2.iters)


def infer(
    state: TrainState,
    params: FaceParams,
    latent_policy: str = "zero",
    latent_key: str | None = None,
):
    """Test-time generation; pure with respect to the state."""
    if latent_policy == "zero":
        latent = np.zeros(state.latent_table.dim, dtype=np.float32)
    elif latent_policy == "mean":
        latent = state.latent_table.mean_code().numpy()
    elif latent_policy == "lookup":
        if latent_key is None or latent_key not in state.latent_table:
            raise KeyError(f"latent lookup miss for key {latent_key!r}")
        latent = state.latent_table.get(latent_key).detach().numpy()
    else:
        raise ValueError(f"unknown latent policy {latent_policy!r}")
    state.generator.eval()
    try:
        image, coarse = state.generator.generate(params, latent)
    finally:
        state.generator.train()
    return image, coarse


# ---------------------------------------------------------------------------
# Checkpointing: a single .npz archive of named arrays plus a version field.


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().numpy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, npz):
    sd = {}
    plen = len(prefix) + 1
    for k in npz.files:
        if k.startswith(prefix + "/"):
            sd[k[plen:]] = torch.as_tensor(npz[k])
    module.load_state_dict(sd)


def _blob(obj) -> np.ndarray:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return np.frombuffer(buf.getvalue(), dtype=np.uint8)


def _unblob(arr: np.ndarray):
    return torch.load(io.BytesIO(arr.tobytes()), weights_only=False)


def _space_arrays(space: ParamSpace) -> dict:
    if not space.entries:
        return {"space/empty": np.zeros(1)}
    return {
        "space/pose": space.matrix("pose"),
        "space/expression": space.matrix("expression"),
        "space/gaze": space.matrix("gaze"),
    }


def save_checkpoint(state: TrainState, path) -> None:
    cfg_json = json.dumps(asdict(state.config), default=str)
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "stage": np.array(state.stage),
        "iteration": np.array(state.iteration),
        "config_json": np.frombuffer(cfg_json.encode(), dtype=np.uint8),
        "space_label": np.frombuffer(state.param_space.label.encode(), dtype=np.uint8),
        "space_mode": np.frombuffer(
            (state.param_space.entries[0].mode.value if state.param_space.entries else "video_driven").encode(),
            dtype=np.uint8,
        ),
        "rng_state": state.rng.get_state().numpy(),
        "opt_g_blob": _blob(state.opt_g.state_dict()),
        "loss_log_json": np.frombuffer(json.dumps(state.loss_log).encode(), dtype=np.uint8),
    }
    arrays.update(_module_arrays("gen", state.generator))
    arrays.update(_space_arrays(state.param_space))
    for k, v in state.latent_table.state_arrays().items():
        arrays[f"lat/{k}"] = v
    if state.discriminator is not None:
        arrays.update(_module_arrays("disc", state.discriminator))
        arrays["opt_d_blob"] = _blob(state.opt_d.state_dict())
    if state.audio_encoder is not None:
        arrays.update(_module_arrays("audio", state.audio_encoder))
    if state.phi is not None:
        arrays.update(_module_arrays("phi", state.phi))
    if state.feature_extractor is not None:
        arrays.update(_module_arrays("fx", state.feature_extractor))
    np.savez(path, **arrays)


def _config_from_dict(d: dict) -> TrainConfig:
    from .core import EncodingConfig

    gen = dict(d["generator"])
    gen["mode"] = Mode(gen["mode"])
    gen["encoding"] = EncodingConfig(**gen["encoding"])
    return TrainConfig(
        stage1=Stage1Config(**d["stage1"]),
        stage2=Stage2Config(**d["stage2"]),
        generator=GeneratorConfig(**gen),
        discriminator=DiscriminatorConfig(**d["discriminator"]),
        aux_video_count=d["aux_video_count"],
        mode=d["mode"],
        seed=d["seed"],
        log_every=d.get("log_every", 1),
        perceptual=d.get("perceptual", "random_conv"),
    )


def load_checkpoint(path) -> TrainState:
    npz = np.load(path)
    if int(npz["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(npz['version'])}")
    cfg = _config_from_dict(json.loads(npz["config_json"].tobytes().decode()))
    generator = GeneratorModel(cfg.generator)
    _load_module("gen", generator, npz)
    table = LatentTable()
    table.load_state_arrays(
        {k[len("lat/") :]: npz[k] for k in npz.files if k.startswith("lat/")}
    )
    label = npz["space_label"].tobytes().decode()
    mode = Mode(npz["space_mode"].tobytes().decode())
    entries = []
    if "space/pose" in npz.files:
        poses, exprs, gazes = npz["space/pose"], npz["space/expression"], npz["space/gaze"]
        for p, e, g in zip(poses, exprs, gazes):
            if mode == Mode.AUDIO_DRIVEN:
                entries.append(
                    FaceParams(p, e, g, audio=np.zeros(32, dtype=np.float32), mode=mode)
                )
            else:
                entries.append(FaceParams(p, e, g))
    state = TrainState(
        config=cfg,
        generator=generator,
        latent_table=table,
        opt_g=None,
        rng=torch.Generator(),
        param_space=ParamSpace(entries, label=label),
        stage=int(npz["stage"]),
        iteration=int(npz["iteration"]),
        loss_log=json.loads(npz["loss_log_json"].tobytes().decode()),
    )
    rng_state = torch.as_tensor(npz["rng_state"].copy())
    state.rng.set_state(rng_state.to(torch.uint8))
    if any(k.startswith("audio/") for k in npz.files):
        state.audio_encoder = AudioEncoder()
        _load_module("audio", state.audio_encoder, npz)
    if any(k.startswith("phi/") for k in npz.files):
        state.phi = ToyParamEstimator()
        _load_module("phi", state.phi, npz)
        state.phi.freeze()
    if any(k.startswith("fx/") for k in npz.files):
        fx_cls = PooledFeatureExtractor if cfg.perceptual == "pooled" else RandomConvFeatureExtractor
        state.feature_extractor = fx_cls()
        _load_module("fx", state.feature_extractor, npz)
    lr = cfg.stage1.lr if state.stage == 1 else cfg.stage2.lr_g
    state.opt_g = torch.optim.Adam(_gen_params(state), lr=lr, betas=(0.9, 0.999))
    state.opt_g.load_state_dict(_unblob(npz["opt_g_blob"]))
    if any(k.startswith("disc/") for k in npz.files):
        state.discriminator = DiscriminatorModel(cfg.discriminator)
        _load_module("disc", state.discriminator, npz)
        state.opt_d = torch.optim.Adam(
            state.discriminator.parameters(), lr=cfg.stage2.lr_d, betas=(0.9, 0.999)
        )
        state.opt_d.load_state_dict(_unblob(npz["opt_d_blob"]))
    return state
