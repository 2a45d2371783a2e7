"""Rigid-body algebra, pinhole intrinsics and projection.

Conventions:
    - A ``Pose`` maps camera-frame points into the world frame
      (``p_w = R @ p_c + t``); its translation is the camera centre.
    - Tangent vectors are ordered ``(rho, theta)``: translation first.
    - Increments are applied on the right: ``P_new = P @ exp(xi)``.
    - Quaternions at I/O boundaries are Hamilton ``(qx, qy, qz, qw)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import BehindCamera, InvalidArgument

NEAR_PLANE = 0.01
_SMALL_ANGLE = 1e-4


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    angle = float(np.linalg.norm(theta))
    K = hat(theta)
    if angle < _SMALL_ANGLE:
        a = 1.0 - angle**2 / 6.0
        b = 0.5 - angle**2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (qx, qy, qz, qw) with qw >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    diag = (tr, m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (qx, qy, qz, qw) quaternion; the input is normalised."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidArgument("quaternion must be finite and non-zero")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgument("expected a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or np.linalg.det(R) < 0:
        raise InvalidArgument("matrix is not a proper rotation")
    q = rotation_to_quat(R)
    v = q[:3]
    sin_half = float(np.linalg.norm(v))
    if sin_half < 1e-12:
        # second-order accurate near identity
        return 2.0 * v / q[3]
    angle = 2.0 * np.arctan2(sin_half, q[3])
    return v * (angle / sin_half)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: d log(exp(phi) exp(d)) / dd at d = 0."""
    angle = float(np.linalg.norm(phi))
    K = hat(phi)
    if angle < _SMALL_ANGLE:
        c = 1.0 / 12.0 + angle**2 / 720.0
    else:
        c = 1.0 / angle**2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def _left_jacobian(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    K = hat(theta)
    if angle < _SMALL_ANGLE:
        b = 0.5 - angle**2 / 24.0
        c = 1.0 / 6.0 - angle**2 / 120.0
    else:
        b = (1.0 - np.cos(angle)) / angle**2
        c = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + b * K + c * (K @ K)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass(frozen=True)
class PoseIncrement:
    rho: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_vector(cls, xi) -> "PoseIncrement":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3].copy(), xi[3:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.rho, float), np.asarray(self.theta, float)])


class Pose:
    """Element of SE(3), camera-to-world."""

    __slots__ = ("_R", "_t")

    def __init__(self, rotation=None, translation=None):
        R = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        self._R = R
        self._t = t

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    @property
    def translation(self) -> np.ndarray:
        return self._t

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat(cls, translation, quat_xyzw) -> "Pose":
        return cls(quat_to_rotation(quat_xyzw), translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self._t
        return T

    def quat(self) -> np.ndarray:
        return rotation_to_quat(self._R)

    def inverse(self) -> "Pose":
        Rt = self._R.T
        return Pose(Rt, -Rt @ self._t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return np.asarray(points) @ self._R.T + self._t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self._t, precision=4)}, q={np.array2string(self.quat(), precision=4)})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def se3_exp(xi) -> Pose:
    if isinstance(xi, PoseIncrement):
        vec = xi.as_vector()
    else:
        vec = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(vec)):
        raise InvalidArgument("pose increment must be finite")
    rho, theta = vec[:3], vec[3:]
    return Pose(so3_exp(theta), _left_jacobian(theta) @ rho)


def se3_log(p: Pose) -> np.ndarray:
    """Inverse of se3_exp; returns the 6-vector (rho, theta)."""
    theta = log_rotation(p.rotation)
    rho = np.linalg.solve(_left_jacobian(theta), p.translation)
    return np.concatenate([rho, theta])


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation distance (m) and rotation angle (rad) between two poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.linalg.norm(log_rotation(a.rotation.T @ b.rotation)))
    return dt, dr


def project(k: Intrinsics, p_cam, near: float = NEAR_PLANE) -> np.ndarray:
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    if not z > near:
        raise BehindCamera(f"point depth {z} is not beyond the near plane {near}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def backproject(k: Intrinsics, u, v, depth) -> np.ndarray:
    """Camera-frame points for pixel coordinates (u, v) at the given depths."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    return np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], axis=-1)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera pose at ``eye`` with +z looking at ``target`` (image y down along ``-up``)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def poses_to_arrays(poses: Iterable[Pose]) -> tuple[np.ndarray, np.ndarray]:
    poses = list(poses)
    return (np.stack([p.rotation for p in poses]) if poses else np.zeros((0, 3, 3)),
            np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3)))
