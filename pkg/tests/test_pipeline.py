from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from gisplat.config import SlamConfig, config_dict, dump_config, load_config, parse_config
from gisplat.errors import InitFailed, InvalidArgument
from gisplat.evaluation import psnr
from gisplat.frame import Frame
from gisplat.geometry import Pose
from gisplat.keyframing import ADDED, REJECTED_MOTION, KfConfig
from gisplat.pipeline import initialize, run, step
from gisplat.sim import SensorNoise, TrajectorySpec, default_intrinsics, make_room_scene, synthesize_sequence
from gisplat.splat_render import render

K = default_intrinsics(48, 36)


@pytest.fixture(scope="module")
def scene():
    return make_room_scene(0, 500)


def sequence(scene, kind, duration, **kw):
    return synthesize_sequence(scene, TrajectorySpec(kind, duration=duration, **kw), K, SensorNoise(gravity_on=True))


class TestConfig:
    def test_dump_parse_roundtrip(self):
        cfg = SlamConfig(mode="mono", imu_mode="accel_only", kf=KfConfig.ungated())
        assert parse_config(dump_config(cfg)) == cfg

    def test_defaults_listed(self):
        text = dump_config()
        for key in ("tracking.lambda_imu_t = 0.5", "kf.tau_kf = 0.7", "kf.tau_overlap = 0.8", "kf.capacity = 8",
                    "tracking.lambda_depth = 0.9", "gravity = 0.0, 0.0, -9.81"):
            assert key in text

    def test_comments_and_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# hello\nmode = mono   # trailing\n\ntracking.iters = 7\nkf.v_max = inf\ngravity = none\n")
        cfg = load_config(p)
        assert cfg.mode == "mono" and cfg.tracking.iters == 7 and math.isinf(cfg.kf.v_max) and cfg.gravity is None

    @pytest.mark.parametrize("text", ["nonsense", "bogus = 1", "kf.nope = 1", "tracking.iters = many", "mode = stereo",
                                      "tracking = 3"])
    def test_rejects(self, text):
        with pytest.raises(InvalidArgument):
            parse_config(text)

    def test_line_number_in_message(self):
        with pytest.raises(InvalidArgument, match=":2:"):
            parse_config("mode = rgbd\nwhat = 1\n")

    def test_mono_tracking(self):
        t = SlamConfig(mode="mono").effective_tracking()
        assert t.lambda_depth == 0.0 and t.masked_rgb and t.iters == 100

    def test_config_dict_json_safe(self):
        d = config_dict(SlamConfig(kf=KfConfig.ungated()))
        assert d["kf.v_max"] == "inf" and d["mode"] == "rgbd"


class TestInitialize:
    def test_fits_first_frame(self, scene):
        k = default_intrinsics()
        seq = synthesize_sequence(scene, TrajectorySpec("static", duration=0.0), k)
        state = initialize(seq.frames[0], SlamConfig(), k)
        assert np.array_equal(state.trajectory[0][1].as_matrix(), np.eye(4))
        out = render(state.gmap, Pose.identity(), k)
        assert psnr(out.color, seq.frames[0].rgb) > 25.0
        assert state.keyframe_ids == [0]

    def test_given_start_pose(self, scene):
        seq = sequence(scene, "static", 0.0, start=(0.1, 0.0, 0.0))
        state = initialize(seq.frames[0], SlamConfig(), K, seq.gt_poses[0])
        assert np.array_equal(state.pose.as_matrix(), seq.gt_poses[0].as_matrix())

    def test_monocular_without_depth(self, scene):
        f = sequence(scene, "static", 0.0).frames[0]
        state = initialize(dataclasses.replace(f, depth=None), SlamConfig(mode="mono"), K)
        assert len(state.gmap) > 0

    def test_no_rgb(self):
        with pytest.raises(InitFailed):
            initialize(Frame(0.0, None), SlamConfig(), K)

    def test_wrong_size(self):
        with pytest.raises(InitFailed):
            initialize(Frame(0.0, np.zeros((4, 4, 3))), SlamConfig(), K)

    def test_no_frames(self):
        with pytest.raises(InitFailed):
            run([], SlamConfig(), K)


class TestRun:
    def test_static_adds_no_keyframe(self, scene):
        seq = sequence(scene, "static", 0.5)
        out = run(seq.frames, SlamConfig(), K)
        assert out.keyframe_ids == [0]
        assert len(out.trajectory) == len(out.diagnostics) == len(seq.frames)
        drift = max(np.linalg.norm(p.translation) for _, p in out.trajectory)
        assert drift < 0.03  # coarse 48x36 frames

    def test_deterministic(self, scene):
        seq = sequence(scene, "circle", 0.3)
        cfg = SlamConfig(tracking=dataclasses.replace(SlamConfig().tracking, iters=5))
        a = run(seq.frames, cfg, K, seq.gt_poses[0])
        b = run(seq.frames, cfg, K, seq.gt_poses[0])
        for (ta, pa), (tb, pb) in zip(a.trajectory, b.trajectory):
            assert ta == tb and np.array_equal(pa.as_matrix(), pb.as_matrix())
        assert a.keyframe_ids == b.keyframe_ids

    def test_fast_motion_rejected(self, scene):
        seq = sequence(scene, "jerky-segments", 1.2, frame_rate=20)
        state = initialize(seq.frames[0], SlamConfig(), K, seq.gt_poses[0])
        kinds = [step(state, f).decision for f in seq.frames[1:13]]
        # frames 10..12 fall inside the first burst, which exceeds the speed limits
        assert REJECTED_MOTION in kinds[9:]

    def test_held_out_views_scored(self, scene):
        seq = sequence(scene, "circle", 0.5)
        out = run(seq.frames, SlamConfig(eval_every=5), K, seq.gt_poses[0])
        scored = [d.index for d in out.diagnostics if d.held_out_psnr is not None]
        assert scored and all(i % 5 == 0 and i not in out.keyframe_ids for i in scored)
        assert all(d.held_out_ssim is not None for d in out.diagnostics if d.held_out_psnr is not None)

    def test_keyframe_trajectory_subset(self, scene):
        seq = sequence(scene, "line", 0.5, speed=0.4)
        out = run(seq.frames, SlamConfig(), K, seq.gt_poses[0])
        assert [t for t, _ in out.keyframe_trajectory] == [seq.frames[i].t for i in out.keyframe_ids]
        assert out.diagnostics[0].decision == ADDED
