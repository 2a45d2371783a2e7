"""Gaussian scene representation and its on-disk checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidArgument
from ..geometry import quat_to_rotation

PARAM_NAMES = ("mu", "log_scale", "quat", "color", "opacity_logit")
PARAM_WIDTHS = {"mu": 3, "log_scale": 3, "quat": 4, "color": 3, "opacity_logit": 1}
CHECKPOINT_MAGIC = b"GIMAP1"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian3D:
    mu_w: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray  # (qx, qy, qz, qw)
    color: np.ndarray
    opacity_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))


def covariance_world(g: Gaussian3D) -> np.ndarray:
    """R S S^T R^T with S = diag(exp(log_scale))."""
    M = quat_to_rotation(g.rot) * g.scale[None, :]
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


def covariances(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Batched world covariances, (N, 3, 3)."""
    R = quats_to_rotations(quat)
    M = R * np.exp(log_scale)[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def quats_to_rotations(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class GaussianMap:
    """Growable structure-of-arrays collection of Gaussians with stable ids.

    Besides the parameters, each Gaussian carries Adam moments and the
    image-space positional-gradient accumulator used by densification.
    """

    def __init__(self, seed: int = 0):
        self.ids = np.zeros(0, dtype=np.int64)
        self.mu = np.zeros((0, 3))
        self.log_scale = np.zeros((0, 3))
        self.quat = np.zeros((0, 4))
        self.color = np.zeros((0, 3))
        self.opacity_logit = np.zeros(0)
        self.opt = AdamState({n: np.zeros((0, PARAM_WIDTHS[n])) for n in PARAM_NAMES},
                             {n: np.zeros((0, PARAM_WIDTHS[n])) for n in PARAM_NAMES})
        self.grad_accum = np.zeros(0)
        self.grad_count = np.zeros(0, dtype=np.int64)
        self.next_id = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def params(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a[:, None] if name == "opacity_logit" else a

    def add(self, mu, log_scale, quat, color, opacity_logit) -> np.ndarray:
        """Append Gaussians given as arrays; returns their new ids."""
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        n = mu.shape[0]
        log_scale = np.broadcast_to(np.asarray(log_scale, dtype=np.float64), (n, 3))
        quat = np.broadcast_to(np.asarray(quat, dtype=np.float64), (n, 4))
        color = np.broadcast_to(np.asarray(color, dtype=np.float64), (n, 3))
        opacity_logit = np.broadcast_to(np.asarray(opacity_logit, dtype=np.float64).reshape(-1), (n,))
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.mu = np.concatenate([self.mu, mu])
        self.log_scale = np.concatenate([self.log_scale, log_scale])
        self.quat = np.concatenate([self.quat, quat])
        self.color = np.concatenate([self.color, color])
        self.opacity_logit = np.concatenate([self.opacity_logit, opacity_logit])
        for name in PARAM_NAMES:
            z = np.zeros((n, PARAM_WIDTHS[name]))
            self.opt.m[name] = np.concatenate([self.opt.m[name], z])
            self.opt.v[name] = np.concatenate([self.opt.v[name], z])
        self.opt.step = np.concatenate([self.opt.step, np.zeros(n, dtype=np.int64)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n, dtype=np.int64)])
        return new_ids

    def add_gaussians(self, gaussians) -> np.ndarray:
        gaussians = list(gaussians)
        if not gaussians:
            return np.zeros(0, dtype=np.int64)
        return self.add(np.stack([g.mu_w for g in gaussians]),
                        np.stack([g.log_scale for g in gaussians]),
                        np.stack([g.rot for g in gaussians]),
                        np.stack([g.color for g in gaussians]),
                        np.array([g.opacity_logit for g in gaussians]))

    def keep(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        for name in ("ids", *PARAM_NAMES, "grad_accum", "grad_count"):
            setattr(self, name, getattr(self, name)[mask])
        for name in PARAM_NAMES:
            self.opt.m[name] = self.opt.m[name][mask]
            self.opt.v[name] = self.opt.v[name][mask]
        self.opt.step = self.opt.step[mask]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mu[i].copy(), self.log_scale[i].copy(), self.quat[i].copy(),
                          self.color[i].copy(), float(self.opacity_logit[i]))

    def copy(self) -> "GaussianMap":
        out = GaussianMap.__new__(GaussianMap)
        for name in ("ids", *PARAM_NAMES, "grad_accum", "grad_count"):
            setattr(out, name, getattr(self, name).copy())
        out.opt = AdamState({k: v.copy() for k, v in self.opt.m.items()},
                            {k: v.copy() for k, v in self.opt.v.items()},
                            self.opt.step.copy())
        out.next_id = self.next_id
        out.rng = np.random.default_rng()
        out.rng.bit_generator.state = self.rng.bit_generator.state
        return out

    def permuted(self, perm) -> "GaussianMap":
        """Copy with storage order permuted (ids travel with their Gaussians)."""
        out = self.copy()
        perm = np.asarray(perm)
        for name in ("ids", *PARAM_NAMES, "grad_accum", "grad_count"):
            setattr(out, name, getattr(out, name)[perm])
        for name in PARAM_NAMES:
            out.opt.m[name] = out.opt.m[name][perm]
            out.opt.v[name] = out.opt.v[name][perm]
        out.opt.step = out.opt.step[perm]
        return out

    def normalize_quats(self) -> None:
        self.quat = self.quat / np.linalg.norm(self.quat, axis=1, keepdims=True)

    def check_invariants(self) -> None:
        n = len(self)
        if len(np.unique(self.ids)) != n:
            raise InvalidArgument("duplicate gaussian ids")
        for name in PARAM_NAMES:
            if self.opt.m[name].shape[0] != n or self.opt.v[name].shape[0] != n:
                raise InvalidArgument(f"optimizer state for {name} out of sync")


def save_checkpoint(gmap: GaussianMap, path) -> None:
    """Little-endian: magic, uint64 count, 14 float32 per Gaussian."""
    n = len(gmap)
    rec = np.concatenate([gmap.mu, gmap.log_scale, gmap.quat, gmap.color, gmap.opacity_logit[:, None]],
                         axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", n))
        f.write(rec.tobytes())


def load_checkpoint(path, seed: int = 0) -> GaussianMap:
    data = Path(path).read_bytes()
    if data[:6] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path}: not a GIMAP1 checkpoint")
    (n,) = struct.unpack("<Q", data[6:14])
    rec = np.frombuffer(data[14:], dtype="<f4")
    if rec.size != 14 * n:
        raise InvalidArgument(f"{path}: truncated checkpoint ({rec.size} floats for {n} gaussians)")
    rec = rec.reshape(n, 14).astype(np.float64)
    gmap = GaussianMap(seed)
    gmap.add(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10:13], rec[:, 13])
    return gmap
