"""Synthetic ground truth: random Gaussian scenes, analytic trajectories, rendered RGB-D and IMU.

Trajectories are closed-form, so positions, velocities, accelerations and
body angular rates are exact at any time. The camera orientation is
``Ry(yaw(t)) @ Rx(pitch(t))`` (camera +z forward, +y down).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .frame import Frame
from .geometry import Intrinsics, Pose
from .gmap.model import GaussianMap, logit
from .imu import DEFAULT_GRAVITY, ImuSample
from .splat_render import render

TRAJECTORY_KINDS = ("static", "line", "circle", "jerky-segments")
SENSOR_MIN_ALPHA = 0.5


@dataclass
class TrajectorySpec:
    kind: str = "circle"
    duration: float = 10.0
    frame_rate: float = 20.0
    imu_rate: float = 200.0
    radius: float = 0.3  # circle radius, m
    omega: float = 0.5  # circle angular rate, rad/s
    speed: float = 0.2  # line / jerky base speed, m/s
    yaw_amplitude: float = 0.1  # smooth heading oscillation, rad
    jerk_amplitude: float = 0.25  # translational burst displacement, m
    jerk_rot_amplitude: float = 0.35  # rotational burst angle, rad
    burst_period: float = 1.0  # s between burst onsets
    burst_duration: float = 0.25  # s
    seed: int = 0
    start: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise InvalidArgument(f"unknown trajectory kind {self.kind!r}")
        if self.frame_rate <= 0 or self.imu_rate <= 0:
            raise InvalidArgument("rates must be positive")
        if self.imu_rate < self.frame_rate:
            raise InvalidArgument("imu_rate must be >= frame_rate")
        if self.duration < 0:
            raise InvalidArgument("duration must be non-negative")


def _smoothstep(s):
    """Position, first and second derivative of a raised-cosine ramp from 0 to 1 on [0, 1]."""
    s = np.asarray(s, dtype=np.float64)
    inside = (s > 0) & (s < 1)
    b = np.where(s >= 1, 1.0, np.where(inside, s - np.sin(2 * np.pi * s) / (2 * np.pi), 0.0))
    db = np.where(inside, 1.0 - np.cos(2 * np.pi * s), 0.0)
    ddb = np.where(inside, 2 * np.pi * np.sin(2 * np.pi * s), 0.0)
    return b, db, ddb


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


@dataclass
class KinematicState:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    omega_body: np.ndarray


class Trajectory:
    """Closed-form camera motion for a ``TrajectorySpec``."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        n_bursts = int(np.floor(spec.duration / spec.burst_period)) if spec.kind == "jerky-segments" else 0
        self.burst_t = spec.burst_period * (np.arange(n_bursts) + 0.5)
        # alternate signs keep the camera near its start; random axes per burst
        signs = np.where(np.arange(n_bursts) % 2 == 0, 1.0, -1.0)
        dirs = rng.normal(size=(n_bursts, 3)) * np.array([1.0, 0.6, 0.3])
        dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
        self.burst_dp = spec.jerk_amplitude * signs[:, None] * dirs
        self.burst_yaw = spec.jerk_rot_amplitude * signs * rng.choice([1.0, -1.0], n_bursts)
        self.burst_pitch = 0.5 * spec.jerk_rot_amplitude * rng.uniform(-1, 1, n_bursts)

    def _angles(self, t):
        s = self.spec
        if s.kind in ("circle", "jerky-segments"):
            w = s.omega
            yaw = s.yaw_amplitude * np.sin(w * t)
            dyaw = s.yaw_amplitude * w * np.cos(w * t)
            pitch = 0.5 * s.yaw_amplitude * np.sin(2 * w * t)
            dpitch = s.yaw_amplitude * w * np.cos(2 * w * t)
        else:
            yaw = dyaw = pitch = dpitch = 0.0
        T = s.burst_duration
        for tk, ay, ap in zip(self.burst_t, self.burst_yaw, self.burst_pitch):
            b, db, _ = _smoothstep((t - tk) / T)
            yaw += ay * b
            dyaw += ay * db / T
            pitch += ap * b
            dpitch += ap * db / T
        return float(yaw), float(dyaw), float(pitch), float(dpitch)

    def state(self, t: float) -> KinematicState:
        s = self.spec
        p0 = np.asarray(s.start, dtype=np.float64)
        if s.kind == "static":
            p, v, a = p0.copy(), np.zeros(3), np.zeros(3)
        elif s.kind == "line":
            d = np.array([1.0, 0.0, 0.0])
            p, v, a = p0 + s.speed * t * d, s.speed * d, np.zeros(3)
        elif s.kind == "circle":
            r, w = s.radius, s.omega
            c, sn = np.cos(w * t), np.sin(w * t)
            # starts at p0, circle in the image-parallel x-y plane
            p = p0 + r * np.array([c - 1.0, sn, 0.0])
            v = r * w * np.array([-sn, c, 0.0])
            a = -r * w * w * np.array([c, sn, 0.0])
        else:
            r, w = s.radius, s.omega
            c, sn = np.cos(w * t), np.sin(w * t)
            p = p0 + r * np.array([c - 1.0, sn, 0.0])
            v = r * w * np.array([-sn, c, 0.0])
            a = -r * w * w * np.array([c, sn, 0.0])
            T = s.burst_duration
            for tk, dp in zip(self.burst_t, self.burst_dp):
                b, db, ddb = _smoothstep((t - tk) / T)
                p = p + dp * b
                v = v + dp * db / T
                a = a + dp * ddb / T**2
        yaw, dyaw, pitch, dpitch = self._angles(t)
        Ry, Rx = _rot_y(yaw), _rot_x(pitch)
        # R = Ry Rx  =>  R^T dR = Rx^T (dyaw e_y) Rx + dpitch e_x
        omega = Rx.T @ np.array([0.0, dyaw, 0.0]) + np.array([dpitch, 0.0, 0.0])
        return KinematicState(Ry @ Rx, p, v, a, omega)

    def pose(self, t: float) -> Pose:
        st = self.state(t)
        return Pose(st.R, st.p)


@dataclass
class TrajectorySamples:
    times: np.ndarray
    poses: list
    velocities: np.ndarray
    accelerations: np.ndarray
    angular_velocities: np.ndarray
    trajectory: Trajectory


def frame_times(spec: TrajectorySpec) -> np.ndarray:
    n = int(np.floor(spec.duration * spec.frame_rate + 1e-9)) + 1
    return np.arange(n) / spec.frame_rate


def imu_times(spec: TrajectorySpec) -> np.ndarray:
    n = int(np.floor(spec.duration * spec.imu_rate + 1e-9)) + 1
    return np.arange(n) / spec.imu_rate


def make_trajectory(spec: TrajectorySpec) -> TrajectorySamples:
    traj = Trajectory(spec)
    times = frame_times(spec)
    states = [traj.state(t) for t in times]
    return TrajectorySamples(times, [Pose(s.R, s.p) for s in states], np.array([s.v for s in states]),
                             np.array([s.a for s in states]), np.array([s.omega_body for s in states]), traj)


def make_scene(seed: int, n: int, extent: float, center=(0.0, 0.0, 0.0), scale_range=(0.01, 0.1),
               opacity_range=(0.6, 0.95)) -> GaussianMap:
    """Reproducible random Gaussians in an axis-aligned cube of side ``extent``."""
    if n < 1:
        raise InvalidArgument("scene needs at least one gaussian")
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    mu = center + rng.uniform(-0.5, 0.5, (n, 3)) * np.broadcast_to(extent, (3,))
    log_scale = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    color = rng.uniform(0, 1, (n, 3))
    opacity = rng.uniform(*opacity_range, n)
    gmap = GaussianMap(seed)
    gmap.add(mu, log_scale, q, color, logit(opacity))
    return gmap


def make_room_scene(seed: int, n: int = 1000, width: float = 6.0, height: float = 4.5, depth: float = 0.2,
                    distance: float = 3.0) -> GaussianMap:
    """Slab of Gaussians in front of the origin camera: a textured 'wall' with relief."""
    return make_scene(seed, n, np.array([width, height, depth]), center=(0.0, 0.0, distance + depth / 2),
                      scale_range=(0.08, 0.25))


@dataclass
class SensorNoise:
    imu_accel_sigma: float = 0.0
    imu_gyro_sigma: float = 0.0
    gravity_on: bool = False
    seed: int = 0
    gravity: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())


@dataclass
class SyntheticSequence:
    frames: list
    gt_poses: list
    gt_velocities: np.ndarray
    scene: GaussianMap
    intrinsics: Intrinsics
    imu: list
    spec: TrajectorySpec
    gravity: np.ndarray | None

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])


def sensor_depth(out, min_alpha: float = SENSOR_MIN_ALPHA) -> np.ndarray:
    """Surface depth a range sensor would report: alpha-normalised render depth, 0 where coverage is thin."""
    valid = out.alpha > min_alpha
    return np.where(valid, out.depth / np.where(valid, out.alpha, 1.0), 0.0)


def synthesize_imu(traj: Trajectory, spec: TrajectorySpec, noise: SensorNoise) -> list[ImuSample]:
    rng = np.random.default_rng(noise.seed)
    g = np.asarray(noise.gravity, dtype=np.float64) if noise.gravity_on else np.zeros(3)
    out = []
    for t in imu_times(spec):
        st = traj.state(t)
        accel = st.R.T @ (st.a - g)
        gyro = st.omega_body.copy()
        if noise.imu_accel_sigma > 0:
            accel = accel + rng.normal(0.0, noise.imu_accel_sigma, 3)
        if noise.imu_gyro_sigma > 0:
            gyro = gyro + rng.normal(0.0, noise.imu_gyro_sigma, 3)
        out.append(ImuSample(float(t), accel, gyro))
    return out


def synthesize_sequence(scene: GaussianMap, traj: TrajectorySamples | TrajectorySpec, k: Intrinsics,
                        noise: SensorNoise | None = None) -> SyntheticSequence:
    """Render RGB-D at every ground-truth pose and synthesise the IMU stream."""
    if isinstance(traj, TrajectorySpec):
        traj = make_trajectory(traj)
    spec = traj.trajectory.spec
    noise = noise or SensorNoise()
    imu = synthesize_imu(traj.trajectory, spec, noise)
    imu_t = np.array([s.t for s in imu])
    frames = []
    prev_t = -np.inf
    for i, (t, pose) in enumerate(zip(traj.times, traj.poses)):
        out = render(scene, pose, k)
        sel = np.nonzero((imu_t > prev_t + 1e-9) & (imu_t <= t + 1e-9))[0]
        frames.append(Frame(float(t), out.color, sensor_depth(out), [imu[j] for j in sel], i))
        prev_t = t
    gravity = np.asarray(noise.gravity, dtype=np.float64) if noise.gravity_on else None
    return SyntheticSequence(frames, list(traj.poses), traj.velocities, scene, k, imu, spec, gravity)


def default_intrinsics(width: int = 96, height: int = 72) -> Intrinsics:
    f = 80.0 * width / 96.0
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
