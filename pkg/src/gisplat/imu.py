"""Inertial motion prediction and the inertial loss term used during tracking.

The IMU body frame is taken to coincide with the camera frame. Accelerometer
readings follow the specific-force convention: a sensor at rest measures
``-gravity`` rotated into the body frame, so the world-frame acceleration is
``R @ accel + gravity``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NoImuData
from .geometry import Pose, log_rotation, so3_exp

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray | None = None


@dataclass
class VelocityState:
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    valid: bool = False

    @classmethod
    def invalid(cls) -> "VelocityState":
        return cls(np.zeros(3), False)


@dataclass
class ImuPrediction:
    dp: np.ndarray
    dtheta: np.ndarray
    has_rotation: bool
    v_end: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_end: np.ndarray = field(default_factory=lambda: np.eye(3))


def estimate_velocity(stamped_poses: Sequence[tuple[float, Pose]]) -> VelocityState:
    """World-frame velocity at the latest pose by backward finite difference.

    With three poses the quadratic (second-order) backward difference is
    used, which is exact under constant acceleration.
    """
    if len(stamped_poses) < 2:
        return VelocityState.invalid()
    (t1, p1), (t2, p2) = stamped_poses[-2], stamped_poses[-1]
    dt = t2 - t1
    if dt <= 0:
        return VelocityState.invalid()
    v = (p2.translation - p1.translation) / dt
    if len(stamped_poses) >= 3:
        t0, p0 = stamped_poses[-3]
        dt0 = t1 - t0
        if dt0 > 0:
            v_prev = (p1.translation - p0.translation) / dt0
            # derivative of the interpolating parabola at t2
            v = v + (v - v_prev) * dt / (dt + dt0)
    return VelocityState(v, True)


def velocity_from_imu(p_prev: Pose, p_cur: Pose, dt: float, accel_only: ImuPrediction) -> VelocityState:
    """Velocity at the end of an interval from its endpoint poses and the IMU.

    ``accel_only`` is the prediction over the same interval started from zero
    velocity, so ``dp = v0*dt + accel_only.dp`` and ``v1 = v0 + accel_only.v_end``.
    """
    if dt <= 0:
        return VelocityState.invalid()
    v0 = (p_cur.translation - p_prev.translation - accel_only.dp) / dt
    return VelocityState(v0 + accel_only.v_end, True)


def _hold_sample(samples: Sequence[ImuSample], times: np.ndarray, t: float) -> ImuSample:
    i = int(np.searchsorted(times, t, side="right")) - 1
    return samples[max(i, 0)]


def integrate_between(samples: Sequence[ImuSample], t0: float, t1: float, vel: VelocityState,
                      rot_prev: np.ndarray, gravity=DEFAULT_GRAVITY, single_sample: bool = False,
                      ) -> ImuPrediction:
    """Predict the displacement and rotation between two frame times.

    Each sub-interval between consecutive sample times inside ``[t0, t1]``
    uses the latest sample at or before its start (the earliest sample when
    none precedes ``t0``). Orientation is propagated with the gyro when one is
    present. ``single_sample`` applies the sample nearest ``t1`` over the whole
    interval: ``dp = v*dt + 0.5*a*dt^2`` and ``dtheta = w*dt``.
    """
    if not samples:
        raise NoImuData("no IMU samples in interval")
    if t1 <= t0:
        raise InvalidArgument("t1 must be after t0")
    gravity = np.zeros(3) if gravity is None else np.asarray(gravity, dtype=np.float64)
    has_rotation = all(s.gyro is not None for s in samples)
    times = np.array([s.t for s in samples])
    v = np.asarray(vel.v, dtype=np.float64).copy() if vel.valid else np.zeros(3)
    R = np.asarray(rot_prev, dtype=np.float64)

    if single_sample:
        s = samples[int(np.argmin(np.abs(times - t1)))]
        dt = t1 - t0
        a_w = R @ s.accel + gravity
        dp = v * dt + 0.5 * a_w * dt * dt
        dtheta = np.asarray(s.gyro) * dt if has_rotation else np.zeros(3)
        return ImuPrediction(dp, dtheta, has_rotation, v + a_w * dt, R @ so3_exp(dtheta))

    inner = times[(times > t0) & (times < t1)]
    grid = np.concatenate([[t0], inner, [t1]])
    dp = np.zeros(3)
    dR = np.eye(3)
    for tau0, tau1 in zip(grid[:-1], grid[1:]):
        s = _hold_sample(samples, times, tau0)
        dt = tau1 - tau0
        a_w = R @ dR @ s.accel + gravity
        dp += v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        if has_rotation:
            dR = dR @ so3_exp(np.asarray(s.gyro) * dt)
    dtheta = log_rotation(dR) if has_rotation else np.zeros(3)
    return ImuPrediction(dp, dtheta, has_rotation, v, R @ dR)


def imu_loss(dp_opt, dtheta_opt, pred: ImuPrediction, lambda_t: float, lambda_r: float):
    """Weighted squared translational and rotational residuals.

    Returns ``(loss, grad_dp, grad_dtheta)``; the rotational term and its
    gradient vanish when the prediction carries no rotation.
    """
    r_t = np.asarray(dp_opt, dtype=np.float64) - pred.dp
    loss = lambda_t * float(r_t @ r_t)
    g_t = 2.0 * lambda_t * r_t
    if pred.has_rotation:
        r_r = np.asarray(dtheta_opt, dtype=np.float64) - pred.dtheta
        loss += lambda_r * float(r_r @ r_r)
        g_r = 2.0 * lambda_r * r_r
    else:
        g_r = np.zeros(3)
    return loss, g_t, g_r


def samples_to_array(samples: Sequence[ImuSample]) -> np.ndarray:
    """Rows of ``t ax ay az [gx gy gz]``."""
    rows = []
    for s in samples:
        row = [s.t, *s.accel]
        if s.gyro is not None:
            row += list(s.gyro)
        rows.append(row)
    return np.array(rows)
