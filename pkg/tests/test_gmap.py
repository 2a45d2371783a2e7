from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_scene
from gisplat.errors import InvalidArgument
from gisplat.frame import Frame
from gisplat.geometry import Intrinsics, Pose, rotation_to_quat, so3_exp
from gisplat.gmap import (
    CHECKPOINT_MAGIC,
    Gaussian3D,
    GaussianMap,
    MappingConfig,
    SeedConfig,
    covariance_world,
    densify_and_prune,
    load_checkpoint,
    logit,
    map_loss,
    optimize_map,
    save_checkpoint,
    seed_from_frame,
    sigmoid,
)

from gisplat.keyframing import Keyframe
from gisplat.splat_render import render

K = Intrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)
IDQ = np.array([0.0, 0.0, 0.0, 1.0])


def gaussian(log_scale=(0, 0, 0), rot=IDQ, mu=(0, 0, 0)):
    return Gaussian3D(np.array(mu, dtype=float), np.array(log_scale, dtype=float), np.asarray(rot, dtype=float),
                      np.ones(3), 0.0)


class TestCovariance:
    def test_unit(self):
        assert np.allclose(covariance_world(gaussian()), np.eye(3), atol=0)

    def test_diagonal(self):
        cov = covariance_world(gaussian(np.log([2.0, 3.0, 4.0])))
        assert np.allclose(cov, np.diag([4.0, 9.0, 16.0]), atol=1e-12)

    def test_rotated(self):
        q = rotation_to_quat(so3_exp([0, 0, np.pi / 2]))
        cov = covariance_world(gaussian(np.log([2.0, 1.0, 1.0]), q))
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 2), min_size=3, max_size=3),
           st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
    def test_symmetric_psd(self, ls, q):
        cov = covariance_world(gaussian(ls, q))
        assert np.allclose(cov, cov.T, atol=1e-12, rtol=0)
        assert np.linalg.eigvalsh(cov).min() >= -1e-12 * max(1.0, np.abs(cov).max())


class TestGaussianMap:
    def test_ids_unique_and_stable(self, rng):
        gm = random_scene(rng, 5)
        gm.keep(np.array([True, False, True, True, False]))
        new = gm.add(np.zeros((2, 3)), 0.0, IDQ, 0.5, 0.0)
        assert list(gm.ids) == [0, 2, 3, 5, 6]
        assert list(new) == [5, 6]
        gm.check_invariants()

    def test_optimizer_state_follows(self, rng):
        gm = random_scene(rng, 4)
        gm.opt.m["mu"][:] = np.arange(4)[:, None]
        gm.keep(np.array([False, True, True, False]))
        assert gm.opt.m["mu"][:, 0].tolist() == [1.0, 2.0]
        gm.check_invariants()

    def test_opacity_in_open_interval(self, rng):
        gm = random_scene(rng, 50)
        assert ((gm.opacity > 0) & (gm.opacity < 1)).all()


def _frame(rgb, depth=None):
    return Frame(0.0, rgb, depth, [], 0)


class TestSeeding:
    def test_principal_point_backprojection(self):
        k = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
        rgb = np.full((101, 101, 3), 0.5)
        depth = np.full((101, 101), 2.0)
        mask = np.zeros((101, 101), dtype=bool)
        mask[50, 50] = True
        mask[50, 100] = True
        gs = seed_from_frame(_frame(rgb, depth), Pose.identity(), k, stride=1, mask=mask)
        pos = sorted(tuple(np.round(g.mu_w, 12)) for g in gs)
        assert pos == [(0.0, 0.0, 2.0), (1.0, 0.0, 2.0)]

    def test_opacity_half_and_color(self, rng):
        rgb = rng.uniform(0, 1, (32, 32, 3))
        gs = seed_from_frame(_frame(rgb, np.full((32, 32), 3.0)), Pose.identity(), K, stride=4)
        assert len(gs) == 64
        assert all(sigmoid(g.opacity_logit) == 0.5 for g in gs)
        assert np.allclose(gs[0].color, rgb[0, 0])
        ls = gs[5].log_scale
        assert ls[0] == ls[1] == ls[2]

    def test_scale_is_neighbour_spacing(self):
        # depth 3 at 30 px focal length: adjacent pixels with stride 4 are 0.4 m apart
        gs = seed_from_frame(_frame(np.zeros((32, 32, 3)), np.full((32, 32), 3.0)), Pose.identity(), K, stride=4)
        assert np.exp(gs[10].log_scale[0]) == pytest.approx(0.4)

    def test_monocular_random_depth(self):
        cfg = SeedConfig(d_min=1.0, d_max=2.0)
        gs = seed_from_frame(_frame(np.zeros((32, 32, 3)), np.zeros((32, 32))), Pose.identity(), K, stride=2,
                             cfg=cfg, rng=np.random.default_rng(0))
        z = np.array([g.mu_w[2] for g in gs])
        # z equals depth along the optical axis direction
        assert (z >= 1.0 - 1e-12).all() and (z <= 2.0 + 1e-12).all()

    def test_depth_holes_skipped(self):
        depth = np.full((32, 32), 3.0)
        depth[:16] = 0.0
        gs = seed_from_frame(_frame(np.zeros((32, 32, 3)), depth), Pose.identity(), K, stride=4)
        assert len(gs) == 32 and all(g.mu_w[2] == 3.0 for g in gs)

    def test_rendered_depth_used_where_opaque(self, rng):
        gm = GaussianMap()
        gm.add(np.array([[0.0, 0.0, 2.5]]), np.log(np.full((1, 3), 5.0)), IDQ, 0.5, logit(0.99))
        out = render(gm, Pose.identity(), K)
        gs = seed_from_frame(_frame(np.zeros((32, 32, 3))), Pose.identity(), K, stride=8, render_out=out)
        z = np.array([g.mu_w[2] for g in gs])
        assert np.allclose(z, 2.5)

    def test_requires_rgb(self):
        with pytest.raises(InvalidArgument):
            seed_from_frame(_frame(None), Pose.identity(), K)

    def test_world_frame(self):
        pose = Pose(so3_exp([0, 0.3, 0]), [1.0, 2.0, 3.0])
        mask = np.zeros((32, 32), dtype=bool)
        mask[16, 16] = True
        g = seed_from_frame(_frame(np.zeros((32, 32, 3)), np.full((32, 32), 2.0)), pose, K, stride=1, mask=mask)[0]
        assert np.allclose(g.mu_w, pose.apply(np.array([0.5 * 2.0 / 30.0, 0.5 * 2.0 / 30.0, 2.0])))


def _window_from_scene(scene, poses, raw_depth=True):
    out = []
    for i, p in enumerate(poses):
        r = render(scene, p, K)
        depth = r.depth if raw_depth else np.zeros_like(r.depth)
        out.append(Keyframe(i, float(i), p, frozenset(), Frame(float(i), r.color, depth, [], i)))
    return out


class TestOptimizeMap:
    def test_fixed_point(self, rng):
        scene = random_scene(rng, 20)
        window = _window_from_scene(scene, [Pose.identity(), Pose(None, [0.1, 0, 0])])
        losses = optimize_map(scene.copy(), window, K, 5, 0.9)
        assert max(abs(a - b) for a, b in zip(losses, losses[1:])) < 1e-6

    def test_reduces_loss_on_single_keyframe(self, rng):
        scene = random_scene(rng, 25)
        window = _window_from_scene(scene, [Pose.identity()])
        gm = GaussianMap()
        gm.add_gaussians(seed_from_frame(window[0].frame, Pose.identity(), K, stride=4))
        losses = optimize_map(gm, window, K, 200, 0.9)
        assert losses[-1] < 0.5 * losses[0]

    def test_rgb_only_when_depth_invalid(self, rng):
        scene = random_scene(rng, 10)
        window = _window_from_scene(scene, [Pose.identity()], raw_depth=False)
        gm = random_scene(np.random.default_rng(99), 10)
        out = render(gm, Pose.identity(), K)
        expect = np.abs(out.color - window[0].frame.rgb).mean()
        assert map_loss(gm, window, K, 0.0) == pytest.approx(expect, rel=1e-12)
        assert optimize_map(gm, window, K, 1, 0.0)[0] == pytest.approx(expect, rel=1e-12)

    def test_small_steps_do_not_increase_loss(self, rng):
        scene = random_scene(rng, 15)
        window = _window_from_scene(scene, [Pose.identity()])
        gm = random_scene(np.random.default_rng(5), 15)
        losses = optimize_map(gm, window, K, 10, 0.9, lr_factor=1e-3)
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_quaternions_stay_unit(self, rng):
        scene = random_scene(rng, 10)
        window = _window_from_scene(scene, [Pose.identity()])
        gm = random_scene(np.random.default_rng(3), 10)
        optimize_map(gm, window, K, 5, 0.9)
        assert np.allclose(np.linalg.norm(gm.quat, axis=1), 1.0, atol=1e-6)

    def test_accumulates_gradient_stats(self, rng):
        scene = random_scene(rng, 10)
        gm = random_scene(np.random.default_rng(4), 10)
        optimize_map(gm, _window_from_scene(scene, [Pose.identity()]), K, 3, 0.9)
        assert gm.grad_count.max() == 3 and gm.grad_accum.max() > 0

    @pytest.mark.parametrize("iters", [0, -1])
    def test_bad_iters(self, iters, rng):
        with pytest.raises(InvalidArgument):
            optimize_map(random_scene(rng, 2), _window_from_scene(random_scene(rng, 2), [Pose.identity()]), K, iters,
                         0.0)

    def test_empty_window(self, rng):
        with pytest.raises(InvalidArgument):
            optimize_map(random_scene(rng, 2), [], K, 1, 0.0)


class TestDensify:
    def test_nothing_to_do(self, rng):
        gm = random_scene(rng, 6, opacity=(0.9, 0.9))
        s = densify_and_prune(gm)
        assert (s.cloned, s.pruned, s.total_after) == (0, 0, 6)

    def test_prunes_transparent(self, rng):
        gm = random_scene(rng, 4, opacity=(0.9, 0.9))
        gm.opacity_logit[2] = logit(0.01)
        s = densify_and_prune(gm, opacity_min=0.05)
        assert s.pruned == 1 and 2 not in gm.ids

    def test_prunes_tiny(self, rng):
        gm = random_scene(rng, 3, opacity=(0.9, 0.9))
        gm.log_scale[1] = np.log(1e-5)
        assert densify_and_prune(gm, extent_min=1e-4).pruned == 1

    def test_clones_high_gradient(self, rng):
        gm = random_scene(rng, 8, opacity=(0.9, 0.9))
        gm.opacity_logit[7] = logit(0.01)
        gm.grad_accum[[0, 3, 5]] = 1.0
        gm.grad_count[[0, 3, 5]] = 2
        before = len(gm)
        parents = gm.mu[[0, 3, 5]].copy()
        s = densify_and_prune(gm, grad_threshold=2e-4)
        assert s.cloned == 3
        assert s.total_after == before + 3 - s.pruned == len(gm)
        assert gm.grad_accum.sum() == 0 and gm.grad_count.sum() == 0
        clones = gm.mu[-3:]
        assert not np.allclose(clones, parents)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_accounting_identity(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        gm = random_scene(rng, n, opacity=(0.01, 0.99))
        gm.grad_accum[:] = rng.uniform(0, 1e-3, n)
        gm.grad_count[:] = rng.integers(0, 3, n)
        s = densify_and_prune(gm)
        assert s.total_after == n + s.cloned - s.pruned == len(gm)
        gm.check_invariants()

    @pytest.mark.parametrize("kw", [{"grad_threshold": 0}, {"opacity_min": -1}, {"extent_min": 0}])
    def test_thresholds_positive(self, kw, rng):
        with pytest.raises(InvalidArgument):
            densify_and_prune(random_scene(rng, 2), **kw)


class TestCheckpoint:
    def test_layout(self, tmp_path, rng):
        gm = random_scene(rng, 3)
        save_checkpoint(gm, tmp_path / "m.gimap")
        data = (tmp_path / "m.gimap").read_bytes()
        assert data[:6] == CHECKPOINT_MAGIC == b"GIMAP1"
        assert int.from_bytes(data[6:14], "little") == 3
        assert len(data) == 14 + 3 * 14 * 4
        first = np.frombuffer(data[14:14 + 56], dtype="<f4")
        assert np.array_equal(first[:3], gm.mu[0].astype(np.float32))
        assert np.array_equal(first[6:10], gm.quat[0].astype(np.float32))

    def test_bit_exact_roundtrip(self, tmp_path, rng):
        gm = random_scene(rng, 40)
        save_checkpoint(gm, tmp_path / "a.gimap")
        back = load_checkpoint(tmp_path / "a.gimap")
        save_checkpoint(back, tmp_path / "b.gimap")
        assert (tmp_path / "a.gimap").read_bytes() == (tmp_path / "b.gimap").read_bytes()
        assert np.array_equal(back.mu, gm.mu.astype(np.float32).astype(np.float64))

    def test_rejects_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTMAP" + bytes(8))
        with pytest.raises(InvalidArgument):
            load_checkpoint(tmp_path / "x")

    def test_rejects_truncated(self, tmp_path, rng):
        save_checkpoint(random_scene(rng, 2), tmp_path / "a")
        (tmp_path / "b").write_bytes((tmp_path / "a").read_bytes()[:-4])
        with pytest.raises(InvalidArgument):
            load_checkpoint(tmp_path / "b")
