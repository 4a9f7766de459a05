import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from portraitgen.core import LatentTable, Mode, Role, VideoDataset
from portraitgen.toyworld import ToyIdentity, ToyParamEstimator, make_toy_video
from portraitgen.training import (
    CHECKPOINT_VERSION,
    TrainConfig,
    infer,
    init_stage1_state,
    init_stage2_state,
    load_checkpoint,
    run_stage1,
    run_stage2,
    sample_auxiliary,
    save_checkpoint,
    select_mode,
)


def tiny_config(**kw):
    kw.setdefault("grid_size", 8)
    kw.setdefault("batch", 4)
    return TrainConfig.desk_scale(**kw)


def frozen_phi():
    # unfit but deterministic estimator: stage-II mechanics don't need accuracy
    with torch.random.fork_rng():
        torch.manual_seed(99)
        phi = ToyParamEstimator()
    phi.freeze()
    return phi


@pytest.fixture(scope="module")
def perf32():
    return make_toy_video(ToyIdentity(0), 16, param_trajectory_seed=0, size=32, name="perf")


@pytest.fixture(scope="module")
def aux_pool():
    ident = ToyIdentity(0)
    return [
        make_toy_video(
            ident, 8, param_trajectory_seed=10 + i, size=32, role=Role.AUXILIARY,
            with_images=False, name=f"aux{i}",
        )
        for i in range(4)
    ]


def module_bits(module):
    return {k: v.numpy().copy() for k, v in module.state_dict().items()}


def assert_bits_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


class TestConfig:
    def test_mode_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="hybrid")

    def test_aux_count_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(aux_video_count=-1)

    def test_paper_scale_defaults(self):
        cfg = TrainConfig()
        assert cfg.stage1.lr == 5e-4 and cfg.stage1.batch == 16
        assert cfg.stage2.lr_g == 1e-4 and cfg.stage2.lr_d == 4e-4 and cfg.stage2.batch == 8
        assert cfg.generator.output_size == 256

    def test_desk_scale_keeps_loss_presets(self):
        cfg = tiny_config()
        assert cfg.weights_stage1 == TrainConfig().weights_stage1
        assert cfg.weights_stage2 == TrainConfig().weights_stage2
        assert cfg.generator.output_size == 32


class TestModeSelection:
    def test_online_excludes_driven(self, perf32, aux_pool):
        plan = select_mode(tiny_config(mode="online"), perf32, aux_pool)
        assert plan.mode == "online" and not plan.includes_driven
        assert plan.auxiliary == aux_pool

    def test_offline_appends_params_only_driven(self, perf32, aux_pool):
        plan = select_mode(tiny_config(mode="offline"), perf32, aux_pool)
        assert plan.includes_driven and len(plan.auxiliary) == len(aux_pool) + 1
        extra = plan.auxiliary[-1]
        assert extra.role == Role.AUXILIARY
        assert not extra.has_images()
        assert extra.param_space().contains_all(perf32.param_space())
        # original driven video untouched
        assert perf32.has_images() and perf32.role == Role.PERFORMING

    def test_sample_deterministic(self, aux_pool):
        a = sample_auxiliary(aux_pool, 2, seed=3)
        b = sample_auxiliary(aux_pool, 2, seed=3)
        assert [d.name for d in a] == [d.name for d in b]

    def test_sample_too_many(self, aux_pool):
        with pytest.raises(ValueError):
            sample_auxiliary(aux_pool, len(aux_pool) + 1, seed=0)

    @given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_sample_prefix_property(self, k1, k2, seed):
        pool = list(range(5))
        lo, hi = sorted([k1, k2])
        assert sample_auxiliary(pool, lo, seed) == sample_auxiliary(pool, hi, seed)[:lo]


class TestStage1:
    def test_requires_images(self, aux_pool):
        with pytest.raises(ValueError):
            init_stage1_state(aux_pool[0], tiny_config())

    def test_latents_allocated_per_frame(self, perf32):
        state = init_stage1_state(perf32, tiny_config())
        assert len(state.latent_table.parameters()) == len(perf32)
        for f in perf32.frames:
            assert f.latent_id == LatentTable.key("perf", f.index)
            assert f.latent_id in state.latent_table

    def test_loss_decreases(self, perf32):
        state = init_stage1_state(perf32, tiny_config())
        state = run_stage1(state, perf32, 150)
        recs = [e["rec"] for e in state.loss_log]
        assert np.mean(recs[-10:]) < 0.5 * np.mean(recs[:10])
        assert state.iteration == 150
        assert all(e["stage"] == 1 for e in state.loss_log)

    def test_deterministic_given_seed(self, perf32):
        runs = []
        for _ in range(2):
            state = run_stage1(init_stage1_state(perf32, tiny_config(seed=5)), perf32, 10)
            runs.append(module_bits(state.generator))
        assert_bits_equal(runs[0], runs[1])

    def test_latents_move(self, perf32):
        state = run_stage1(init_stage1_state(perf32, tiny_config()), perf32, 20)
        norms = [float(p.detach().norm()) for p in state.latent_table.parameters()]
        assert max(norms) > 0


class TestAudioMode:
    def test_stage1_trains_audio_encoder(self):
        video = make_toy_video(
            ToyIdentity(0), 12, param_trajectory_seed=0, size=32,
            mode=Mode.AUDIO_DRIVEN, name="aperf",
        )
        cfg = tiny_config(drive_mode=Mode.AUDIO_DRIVEN)
        state = init_stage1_state(video, cfg)
        assert state.audio_encoder is not None
        before = module_bits(state.audio_encoder)
        state = run_stage1(state, video, 5)
        after = module_bits(state.audio_encoder)
        moved = any(not np.array_equal(before[k], after[k]) for k in before)
        assert moved, "audio encoder received no gradient"


class TestInfer:
    def test_policies(self, perf32):
        state = run_stage1(init_stage1_state(perf32, tiny_config()), perf32, 5)
        p = perf32.frames[0].params
        img, coarse = infer(state, p, "zero")
        assert img.shape == (32, 32, 3) and coarse.shape == (8, 8, 3)
        assert img.min() >= -1 and img.max() <= 1
        img_mean, _ = infer(state, p, "mean")
        img_look, _ = infer(state, p, "lookup", latent_key=LatentTable.key("perf", 0))
        assert not np.array_equal(img, img_look)
        assert state.generator.training  # restored after eval

    def test_lookup_miss(self, perf32):
        state = init_stage1_state(perf32, tiny_config())
        with pytest.raises(KeyError):
            infer(state, perf32.frames[0].params, "lookup", latent_key="nope/000000")

    def test_unknown_policy(self, perf32):
        state = init_stage1_state(perf32, tiny_config())
        with pytest.raises(ValueError):
            infer(state, perf32.frames[0].params, "random")


class TestStage2:
    def _stage2_state(self, perf32, aux_pool, iters1=5, **cfg_kw):
        cfg = tiny_config(aux_video_count=len(aux_pool), **cfg_kw)
        state = run_stage1(init_stage1_state(perf32, cfg), perf32, iters1)
        return init_stage2_state(state, perf32, aux_pool, frozen_phi())

    def test_rejects_double_init(self, perf32, aux_pool):
        state = self._stage2_state(perf32, aux_pool)
        with pytest.raises(ValueError):
            init_stage2_state(state, perf32, aux_pool, frozen_phi())

    def test_rejects_empty_pool_when_required(self, perf32):
        cfg = tiny_config(aux_video_count=2)
        state = run_stage1(init_stage1_state(perf32, cfg), perf32, 2)
        with pytest.raises(ValueError):
            init_stage2_state(state, perf32, [], frozen_phi())

    def test_widens_param_space(self, perf32, aux_pool):
        state = self._stage2_state(perf32, aux_pool)
        assert state.param_space.label == "S_prime"
        assert len(state.param_space) == len(perf32) + sum(len(d) for d in aux_pool)
        assert state.param_space.contains_all(perf32.param_space())
        n_latents = len(perf32) + sum(len(d) for d in aux_pool)
        assert len(state.latent_table.parameters()) == n_latents

    def test_run_logs_all_terms_and_freezes_phi(self, perf32, aux_pool):
        state = self._stage2_state(perf32, aux_pool)
        phi_before = module_bits(state.phi)
        state = run_stage2(state, perf32, aux_pool, 8)
        assert_bits_equal(phi_before, module_bits(state.phi))
        entry = state.loss_log[-1]
        for key in ("rec", "per", "con", "vel", "adv_g", "adv_d", "loss_g", "loss_d"):
            assert key in entry and np.isfinite(entry[key])
        assert entry["stage"] == 2

    def test_discriminator_moves_generator_frozen_until_step(self, perf32, aux_pool):
        state = self._stage2_state(perf32, aux_pool)
        d_before = module_bits(state.discriminator)
        state = run_stage2(state, perf32, aux_pool, 3)
        d_after = module_bits(state.discriminator)
        assert any(not np.array_equal(d_before[k], d_after[k]) for k in d_before)


class TestCheckpoint:
    def test_stage1_roundtrip_bitwise(self, perf32, tmp_path):
        state = run_stage1(init_stage1_state(perf32, tiny_config()), perf32, 10)
        path = tmp_path / "ck.npz"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.stage == 1 and loaded.iteration == 10
        assert_bits_equal(module_bits(state.generator), module_bits(loaded.generator))
        assert_bits_equal(state.latent_table.state_arrays(), loaded.latent_table.state_arrays())
        np.testing.assert_array_equal(
            state.rng.get_state().numpy(), loaded.rng.get_state().numpy()
        )
        assert loaded.loss_log == state.loss_log
        assert loaded.config.generator == state.config.generator

    def test_stage1_resume_matches_uninterrupted(self, perf32, tmp_path):
        cfg = tiny_config(seed=2)
        full = run_stage1(init_stage1_state(perf32, cfg), perf32, 30)

        part = run_stage1(init_stage1_state(perf32, cfg), perf32, 18)
        save_checkpoint(part, tmp_path / "mid.npz")
        resumed = load_checkpoint(tmp_path / "mid.npz")
        resumed = run_stage1(resumed, perf32, 12)

        assert resumed.iteration == full.iteration
        assert_bits_equal(module_bits(full.generator), module_bits(resumed.generator))
        assert_bits_equal(
            full.latent_table.state_arrays(), resumed.latent_table.state_arrays()
        )

    def test_stage2_roundtrip_and_resume(self, perf32, aux_pool, tmp_path):
        def build():
            cfg = tiny_config(seed=3, aux_video_count=len(aux_pool))
            s = run_stage1(init_stage1_state(perf32, cfg), perf32, 4)
            return init_stage2_state(s, perf32, aux_pool, frozen_phi())

        full = run_stage2(build(), perf32, aux_pool, 10)

        part = run_stage2(build(), perf32, aux_pool, 6)
        save_checkpoint(part, tmp_path / "mid.npz")
        resumed = load_checkpoint(tmp_path / "mid.npz")
        assert resumed.stage == 2
        assert resumed.discriminator is not None and resumed.phi is not None
        resumed = run_stage2(resumed, perf32, aux_pool, 4)

        assert_bits_equal(module_bits(full.generator), module_bits(resumed.generator))
        assert_bits_equal(
            module_bits(full.discriminator), module_bits(resumed.discriminator)
        )

    def test_version_mismatch_rejected(self, perf32, tmp_path):
        state = init_stage1_state(perf32, tiny_config())
        path = tmp_path / "ck.npz"
        save_checkpoint(state, path)
        data = dict(np.load(path))
        data["version"] = np.array(CHECKPOINT_VERSION + 1)
        np.savez(path, **data)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_audio_checkpoint_restores_encoder(self, tmp_path):
        video = make_toy_video(
            ToyIdentity(0), 10, param_trajectory_seed=1, size=32,
            mode=Mode.AUDIO_DRIVEN, name="aperf",
        )
        cfg = tiny_config(drive_mode=Mode.AUDIO_DRIVEN)
        state = run_stage1(init_stage1_state(video, cfg), video, 3)
        save_checkpoint(state, tmp_path / "a.npz")
        loaded = load_checkpoint(tmp_path / "a.npz")
        assert loaded.audio_encoder is not None
        assert_bits_equal(module_bits(state.audio_encoder), module_bits(loaded.audio_encoder))
