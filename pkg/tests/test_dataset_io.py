from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gisplat.errors import DatasetParseError, UnreadableDataset
from gisplat.frame import Frame
from gisplat.geometry import Pose, se3_exp
from gisplat.dataset_io import (
    INTRINSICS_PRESETS,
    associate,
    export_tum,
    load_tum,
    read_depth,
    read_imu,
    read_trajectory,
    write_trajectory,
)
from gisplat.sim import SensorNoise, TrajectorySpec, default_intrinsics, make_room_scene, synthesize_sequence

K = default_intrinsics(16, 12)


def write_tum(root, rgb_times, depth_times=None, accel=None, size=(16, 12)):
    (root / "rgb").mkdir(parents=True)
    lines = ["# timestamp filename"]
    for i, t in enumerate(rgb_times):
        Image.fromarray(np.full((size[1], size[0], 3), 10 * i, np.uint8)).save(root / "rgb" / f"{i}.png")
        lines.append(f"{t} rgb/{i}.png")
    (root / "rgb.txt").write_text("\n".join(lines) + "\n")
    if depth_times is not None:
        (root / "depth").mkdir()
        lines = []
        for i, t in enumerate(depth_times):
            Image.fromarray(np.full((size[1], size[0]), 5000 + i, np.uint16)).save(root / "depth" / f"{i}.png")
            lines.append(f"{t} depth/{i}.png")
        (root / "depth.txt").write_text("\n".join(lines) + "\n")
    if accel is not None:
        (root / "accelerometer.txt").write_text("\n".join(f"{t} 0 0 9.81" for t in accel) + "\n")
    return root


class TestAssociate:
    def test_identical(self):
        t = [0.0, 0.1, 0.2]
        assert associate(t, t) == [(0, 0), (1, 1), (2, 2)]

    def test_empty(self):
        assert associate([0.0, 1.0], []) == []

    def test_outside_window(self):
        assert associate([0.0], [0.05], 0.02) == []

    def test_interleaved_offsets(self):
        a = np.arange(20) * 0.033
        b = a + 0.005
        pairs = associate(a, b)
        assert pairs == [(i, i) for i in range(20)]

    @staticmethod
    def _brute_force_cost(a, b, max_dt):
        """Largest matching, then smallest total |dt|, by exhaustive search."""
        best = (0, 0.0)
        n = len(a)
        for perm in itertools.permutations(range(len(b)), min(n, len(b))):
            used = [(i, j) for i, j in zip(range(n), perm) if abs(a[i] - b[j]) <= max_dt]
            key = (len(used), -sum(abs(a[i] - b[j]) for i, j in used))
            if key > (best[0], -best[1]):
                best = (len(used), -key[1])
        return best

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force_on_regular_streams(self, seed):
        rng = np.random.default_rng(seed)
        a = np.sort(np.arange(5) * 0.05 + rng.uniform(-0.003, 0.003, 5))
        b = np.sort(np.arange(5) * 0.05 + rng.uniform(-0.015, 0.015, 5))
        pairs = associate(a, b)
        assert len({j for _, j in pairs}) == len(pairs)
        assert all(abs(a[i] - b[j]) <= 0.02 for i, j in pairs)
        n, cost = self._brute_force_cost(a, b, 0.02)
        assert len(pairs) == n
        assert sum(abs(a[i] - b[j]) for i, j in pairs) == pytest.approx(cost, abs=1e-12)


class TestLoad:
    def test_exact_depth_match(self, tmp_path):
        root = write_tum(tmp_path / "s", [0.0, 0.1, 0.2], [0.0, 0.1, 0.2])
        seq = load_tum(root, intrinsics=K)
        assert seq.stats.dropped == 0 and len(seq.frames) == 3
        assert seq.frames[1].depth[0, 0] == pytest.approx(5001 / 5000)

    def test_depth_scale(self, tmp_path):
        p = tmp_path / "d.png"
        Image.fromarray(np.array([[5000, 0]], np.uint16)).save(p)
        assert read_depth(p).tolist() == [[1.0, 0.0]]

    def test_far_depth_dropped(self, tmp_path):
        root = write_tum(tmp_path / "s", [0.0, 0.1], [0.05, 0.1])
        seq = load_tum(root, intrinsics=K)
        assert seq.stats.dropped == 1 and [f.t for f in seq.frames] == [0.1]
        assert seq.stats.rgb_parsed == seq.stats.frames + seq.stats.dropped

    def test_missing_rgb_txt(self, tmp_path):
        with pytest.raises(UnreadableDataset):
            load_tum(tmp_path)

    def test_parse_error_line_number(self, tmp_path):
        root = write_tum(tmp_path / "s", [0.0])
        (root / "groundtruth.txt").write_text("# header\n0.0 0 0 0 0 0 0 1\n0.1 0 0 zero 0 0 0 1\n")
        with pytest.raises(DatasetParseError) as e:
            load_tum(root, intrinsics=K)
        assert e.value.lineno == 3

    def test_short_line(self, tmp_path):
        (tmp_path / "a.txt").write_text("0.0 1 2\n")
        with pytest.raises(DatasetParseError) as e:
            read_imu(tmp_path / "a.txt")
        assert e.value.lineno == 1

    def test_accelerometer_attached_per_interval(self, tmp_path):
        root = write_tum(tmp_path / "s", [0.0, 0.1, 0.2], accel=[-0.05, 0.0, 0.03, 0.1, 0.15, 0.25])
        seq = load_tum(root, intrinsics=K)
        assert [[s.t for s in f.imu] for f in seq.frames] == [[-0.05, 0.0], [0.03, 0.1], [0.15]]
        assert all(s.gyro is None for s in seq.imu)
        assert seq.stats.imu_parsed == 6 and seq.stats.imu_attached == 5

    def test_preset_intrinsics_scaled(self, tmp_path):
        root = write_tum(tmp_path / "rgbd_dataset_freiburg2_desk", [0.0], size=(320, 240))
        k = load_tum(root).intrinsics
        assert k.fx == pytest.approx(INTRINSICS_PRESETS["fr2"].fx / 2)
        assert (k.width, k.height) == (320, 240)


class TestTrajectoryFiles:
    def test_roundtrip(self, tmp_path, rng):
        traj = [(0.1 * i, se3_exp(rng.normal(size=6))) for i in range(5)]
        write_trajectory(tmp_path / "t.txt", traj)
        back = read_trajectory(tmp_path / "t.txt")
        assert [t for t, _ in back] == [t for t, _ in traj]
        for (_, a), (_, b) in zip(traj, back):
            assert np.allclose(a.as_matrix(), b.as_matrix(), atol=1e-8)

    def test_zero_quaternion(self, tmp_path):
        (tmp_path / "t.txt").write_text("0 0 0 0 0 0 0 0\n")
        with pytest.raises(DatasetParseError):
            read_trajectory(tmp_path / "t.txt")


class TestExportRoundTrip:
    def test_synthetic_sequence(self, tmp_path):
        spec = TrajectorySpec("circle", duration=0.3)
        seq = synthesize_sequence(make_room_scene(2, 150), spec, K, SensorNoise(gravity_on=True))
        root = export_tum(tmp_path / "out", seq.frames, K, list(zip(seq.times, seq.gt_poses)), seq.imu)
        back = load_tum(root)
        assert back.stats.dropped == 0
        assert [f.t for f in back.frames] == [f.t for f in seq.frames]
        assert back.intrinsics == K
        for a, b in zip(seq.frames, back.frames):
            assert np.abs(a.depth - b.depth).max() <= 0.5 / 5000 + 1e-12
            assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-12
            assert [s.t for s in a.imu] == [s.t for s in b.imu]
            assert all(np.array_equal(x.accel, y.accel) and np.array_equal(x.gyro, y.gyro)
                       for x, y in zip(a.imu, b.imu))
        assert [t for t, _ in back.gt] == list(seq.times)

    def test_rgb_only(self, tmp_path):
        f = Frame(0.5, np.zeros((12, 16, 3)))
        back = load_tum(export_tum(tmp_path, [f], K))
        assert back.frames[0].depth is None and back.frames[0].t == 0.5
