import json
import math

import numpy as np
import pytest

from dsnerf.errors import ConfigError, InvalidInputError, TrainingAborted
from dsnerf.fields import FieldParams, checkpoint_bytes, init_params, load_checkpoint
from dsnerf.render import RenderConfig, render_image
from dsnerf.synth import SceneSpec, make_dataset
from dsnerf.train import (
    AdamState,
    Dataset,
    TrainConfig,
    adam_step,
    batch_loss,
    clip_global_norm,
    fit,
    lr_schedule,
    loss_mse,
    novel_pose_context,
    novel_pose_set,
    novel_view_set,
    sample_ray_batch,
    total_steps,
)

TOY = dict(rays_per_batch=64, samples=8, width=16, pe_freqs=4, pose_dim=8, lr=2e-3)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    spec = SceneSpec(image_size=20, focal=32, train_frames=2, heldout_frames=1)
    return Dataset(make_dataset(tmp_path_factory.mktemp("toy") / "ds", spec, seed=3))


class TestBatch:
    def test_face_share(self, dataset):
        cfg = TrainConfig(rays_per_batch=100)
        for s in range(5):
            b = sample_ray_batch(dataset, cfg, np.random.default_rng(s))
            assert b.face_rays == 5 and len(b.rays) == 100
            assert dataset.face_mask(b.frame, b.camera)[b.pixels[:5, 1], b.pixels[:5, 0]].all()

    def test_empty_face_mask_falls_back(self, dataset, monkeypatch):
        monkeypatch.setattr(Dataset, "face_mask", lambda self, f, c: np.zeros_like(self.mask(f, c)))
        b = sample_ray_batch(dataset, TrainConfig(rays_per_batch=100), np.random.default_rng(0))
        assert b.face_rays == 0 and len(b.rays) == 100

    def test_rays_stay_inside_box(self, dataset):
        cfg = TrainConfig(rays_per_batch=500)
        rng = np.random.default_rng(1)
        for _ in range(20):
            b = sample_ray_batch(dataset, cfg, rng)
            box = dataset.bbox_mask(b.frame, b.camera)
            assert box[b.pixels[:, 1], b.pixels[:, 0]].all()
            assert np.array_equal(b.targets, dataset.image(b.frame, b.camera)[b.pixels[:, 1], b.pixels[:, 0]])


class TestLoss:
    def test_examples(self):
        assert loss_mse(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0
        assert loss_mse(np.zeros((1, 3)), np.ones((1, 3))) == 3.0
        assert loss_mse(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 0]])) == 0.5

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            loss_mse(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(InvalidInputError):
            loss_mse(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_batch_gradient_matches_finite_differences(self, toy):
        cfg = TrainConfig(**TOY, jitter=False)
        params = init_params(cfg.field_config(toy.mesh.joints.count), 2, seed=0)
        batch = sample_ray_batch(toy, cfg, np.random.default_rng(0))
        _, grads = batch_loss(params, toy, batch, cfg, None)
        rng = np.random.default_rng(1)
        for name in ("body.0.W", "body_sigma.0.W", "body_tex.0.b", "light.4.W", "pose.0.W", "latent"):
            idx = tuple(rng.integers(s) for s in params.arrays[name].shape)
            if name == "latent":
                idx = (toy.train_frames.index(batch.frame), idx[1])
            vals = []
            for eps in (1e-6, -1e-6):
                p = params.copy()
                p.arrays[name][idx] += eps
                vals.append(batch_loss(p, toy, batch, cfg, None)[0])
            num = (vals[0] - vals[1]) / 2e-6
            assert abs(num - grads[name][idx]) < 1e-5 + 1e-4 * abs(num), name


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.5, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
        assert np.array_equal(p["w"], [1.5, -2.0])

    def test_first_step_size_is_lr(self):
        p = {"w": np.array([1.0, 1.0])}
        adam_step(p, {"w": np.array([3.0, -0.01])}, AdamState(), 0.01)
        assert np.allclose(p["w"], [0.99, 1.01], atol=1e-6)

    def test_quadratic_converges(self):
        p, st = {"w": np.array([1.0])}, AdamState()
        for t in range(500):
            adam_step(p, {"w": 2 * p["w"]}, st, lr_schedule(t, 500, 0.1, 0.01))
        assert abs(p["w"][0]) < 1e-3

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingAborted):
            adam_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, AdamState(), 0.1)

    def test_state_round_trip(self):
        p, st = {"w": np.ones(3)}, AdamState()
        adam_step(p, {"w": np.arange(3.0)}, st, 0.1)
        back = AdamState.from_blocks(st.blocks())
        assert back.step == 1 and np.array_equal(back.m["w"], st.m["w"]) and np.array_equal(back.v["w"], st.v["w"])

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_global_norm(g, 1.0) == 5.0
        assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
        g = {"a": np.array([0.3])}
        clip_global_norm(g, 1.0)
        assert g["a"][0] == 0.3


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(0, 100, 1e-3) == 1e-3
        assert lr_schedule(50, 100, 1e-3) == pytest.approx(1e-3 * 10**-0.5, rel=1e-12)
        assert lr_schedule(100, 100, 1e-3) == pytest.approx(1e-4, rel=1e-12)

    def test_monotone(self):
        lrs = [lr_schedule(s, 40, 1.0) for s in range(41)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            lr_schedule(101, 100, 1e-3)
        with pytest.raises(InvalidInputError):
            lr_schedule(-1, 100, 1e-3)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(variant="nope")
        with pytest.raises(ConfigError):
            TrainConfig(rays_per_batch=0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"speed": 3})

    def test_epoch_count(self, dataset):
        cfg = TrainConfig(epochs=2, rays_per_batch=5000)
        # 10 frames x 4 cameras x 64 x 64 pixels
        assert total_steps(dataset, cfg) == 2 * math.ceil(163840 / 5000)


class TestFit:
    def test_zero_lr_keeps_params(self, toy):
        cfg = TrainConfig(**{**TOY, "lr": 0.0}, iters=3)
        init = init_params(cfg.field_config(toy.mesh.joints.count), 2, cfg.seed)
        res = fit(toy, cfg)
        for k, v in init.arrays.items():
            assert np.array_equal(v, res.params.arrays[k]), k

    def test_loss_decreases(self, toy):
        res = fit(toy, TrainConfig(**TOY, iters=200))
        losses = [r["loss"] for r in res.log]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_checkpoints_are_reproducible(self, toy, tmp_path):
        cfg = TrainConfig(**TOY, iters=6, checkpoint_every=2)
        fit(toy, cfg, tmp_path / "a")
        fit(toy, cfg, tmp_path / "b")
        assert (tmp_path / "a" / "final.bin").read_bytes() == (tmp_path / "b" / "final.bin").read_bytes()
        names = sorted(p.name for p in (tmp_path / "a").glob("ckpt_*.bin"))
        assert names == ["ckpt_0000002.bin", "ckpt_0000004.bin", "ckpt_0000006.bin"]
        log = [json.loads(line) for line in (tmp_path / "a" / "train_log.ndjson").read_text().splitlines()]
        assert [r["iter"] for r in log] == list(range(6))
        assert set(log[0]) == {"iter", "epoch", "loss", "lr", "wall_ms"}

    def test_keeps_last_three(self, toy, tmp_path):
        fit(toy, TrainConfig(**TOY, iters=5, checkpoint_every=1), tmp_path)
        assert len(list(tmp_path.glob("ckpt_*.bin"))) == 3
        assert (tmp_path / "best.bin").exists()

    def test_resume_matches_uninterrupted(self, toy, tmp_path):
        full = fit(toy, TrainConfig(**TOY, iters=6), tmp_path / "full")
        fit(toy, TrainConfig(**TOY, iters=6, checkpoint_every=3), tmp_path / "cut")
        resumed = fit(toy, TrainConfig(**TOY, iters=6), tmp_path / "resumed", resume=tmp_path / "cut" / "ckpt_0000003.bin")
        for k, v in full.params.arrays.items():
            assert np.array_equal(v, resumed.params.arrays[k]), k
        assert checkpoint_bytes(full.params, full.state.blocks(), {}) == checkpoint_bytes(resumed.params, resumed.state.blocks(), {})

    def test_resume_rejects_other_architecture(self, toy, tmp_path):
        fit(toy, TrainConfig(**TOY, iters=1), tmp_path)
        with pytest.raises(ConfigError):
            fit(toy, TrainConfig(**{**TOY, "width": 8}, iters=2), resume=tmp_path / "final.bin")

    def test_no_lighting_checkpoint(self, toy, tmp_path):
        fit(toy, TrainConfig(**TOY, iters=1, variant="no-lighting"), tmp_path)
        params, _, _ = load_checkpoint(tmp_path / "final.bin")
        assert not any(k.startswith("light") for k in params.arrays)


class _NoLatent(dict):
    def __getitem__(self, key):
        if key == "latent":
            raise AssertionError("latent table was read")
        return super().__getitem__(key)


class TestNovelPose:
    def test_zero_latent_and_shift(self, toy):
        pose = toy.poses[toy.train_frames[1]]
        ctx = novel_pose_context(None, pose, toy)
        assert ctx.frame is None and np.array_equal(ctx.latent_override, np.zeros(8))
        assert np.allclose(pose.root_translation + ctx.light_shift, toy.mean_translation)

    def test_heldout_at_mean_needs_no_shift(self, toy):
        ctx = novel_pose_context(None, toy.poses[toy.heldout_frames[0]], toy)
        assert np.allclose(ctx.light_shift, 0.0)

    def test_never_reads_latent(self, toy):
        cfg = TrainConfig(**TOY)
        p = init_params(cfg.field_config(toy.mesh.joints.count), 2, 0)
        guarded = FieldParams(p.config, _NoLatent(p.arrays), p.frame_count)
        ctx = novel_pose_context(guarded, toy.poses[toy.heldout_frames[0]], toy)
        img, _ = render_image(toy.cameras[0], ctx, guarded, RenderConfig(samples=8, background=toy.background))
        assert np.isfinite(img).all()

    def test_latent_table_is_irrelevant(self, toy):
        cfg = TrainConfig(**TOY)
        p = init_params(cfg.field_config(toy.mesh.joints.count), 2, 0)
        q = p.copy()
        q.arrays["latent"][:] = 5.0
        ctx = novel_pose_context(p, toy.poses[toy.heldout_frames[0]], toy)
        rc = RenderConfig(samples=8, background=toy.background, jitter=False)
        assert np.array_equal(render_image(toy.cameras[1], ctx, p, rc)[0], render_image(toy.cameras[1], ctx, q, rc)[0])

    def test_view_sets(self, dataset):
        assert len(novel_view_set(dataset)) == 10 and all(v.camera == 4 and not v.novel_pose for v in novel_view_set(dataset))
        assert len(novel_pose_set(dataset)) == 15 and all(v.novel_pose for v in novel_pose_set(dataset))
