"""Map seeding, photometric/geometric map optimisation and density control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidArgument
from ..geometry import Intrinsics, Pose, backproject
from .. import splat_render
from .model import PARAM_NAMES, Gaussian3D, GaussianMap, quats_to_rotations, sigmoid

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass
class SeedConfig:
    d_min: float = 0.5
    d_max: float = 5.0
    scale_factor: float = 1.0
    min_scale: float = 1e-3


@dataclass
class MappingConfig:
    iters_per_kf: int = 30
    lambda_depth: float = 0.9
    densify_interval: int = 100
    grad_threshold: float = 2e-4
    opacity_min: float = 0.05
    extent_min: float = 1e-4
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    isotropic_reg: float = 0.0
    seed_stride: int = 2

    def learning_rates(self, factor: float = 1.0) -> dict:
        return {"mu": self.lr_position * factor, "color": self.lr_color * factor,
                "opacity_logit": self.lr_opacity * factor, "log_scale": self.lr_scale * factor,
                "quat": self.lr_rotation * factor}


@dataclass
class DensifyStats:
    cloned: int
    pruned: int
    total_after: int


def seed_from_frame(frame, pose: Pose, k: Intrinsics, stride: int = 4, render_out=None,
                    cfg: SeedConfig | None = None, rng: np.random.Generator | None = None,
                    mask: np.ndarray | None = None) -> list[Gaussian3D]:
    """One Gaussian per sampled pixel, back-projected into the world.

    Depth comes from the observation when valid, else from the rendered map
    where it is opaque (alpha > 0.5). Remaining pixels are drawn uniformly
    from ``[d_min, d_max]`` when the frame carries no valid depth at all
    (monocular); in a frame with partial depth they are sensor holes and are
    skipped. ``mask`` restricts which pixels may be seeded.
    """
    if frame.rgb is None:
        raise InvalidArgument("cannot seed from a frame without RGB")
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    cfg = cfg or SeedConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    vs, us = np.mgrid[0:k.height:stride, 0:k.width:stride]
    us, vs = us.ravel(), vs.ravel()
    if mask is not None:
        keep = np.asarray(mask)[vs, us]
        us, vs = us[keep], vs[keep]
    if us.size == 0:
        return []
    depth = np.zeros(us.size)
    have = np.zeros(us.size, dtype=bool)
    if frame.depth is not None:
        obs = frame.depth[vs, us]
        have = obs > 0
        depth[have] = obs[have]
    if render_out is not None:
        a = render_out.alpha[vs, us]
        use = ~have & (a > 0.5)
        depth[use] = render_out.depth[vs, us][use] / a[use]
        have |= use
    if frame.depth is not None and (frame.depth > 0).any():
        us, vs, depth = us[have], vs[have], depth[have]
        if us.size == 0:
            return []
    else:
        n_rand = int((~have).sum())
        if n_rand:
            depth[~have] = rng.uniform(cfg.d_min, cfg.d_max, n_rand)
    p_cam = backproject(k, us, vs, depth)
    p_w = pose.apply(p_cam)
    if us.size > 1:
        dist, _ = cKDTree(p_w).query(p_w, k=2)
        spacing = dist[:, 1]
    else:
        spacing = depth * stride / k.fx
    scale = np.maximum(spacing * cfg.scale_factor, cfg.min_scale)
    colors = frame.rgb[vs, us]
    return [Gaussian3D(p_w[i], np.full(3, np.log(scale[i])), IDENTITY_QUAT.copy(), colors[i].astype(np.float64), 0.0)
            for i in range(us.size)]


def _keyframe_loss(out, frame, lambda_depth: float):
    diff = out.color - frame.rgb
    n = diff.size
    loss = float(np.abs(diff).sum() / n)
    g_color = np.sign(diff) / n
    g_depth = np.zeros(out.depth.shape)
    if lambda_depth > 0 and frame.depth is not None:
        valid = frame.depth > 0
        count = int(valid.sum())
        if count:
            dd = out.depth - frame.depth
            loss += lambda_depth * float(np.abs(dd[valid]).sum() / count)
            g_depth = lambda_depth * np.sign(dd) * valid / count
    return loss, g_color, g_depth


def map_loss(gmap: GaussianMap, window, k: Intrinsics, lambda_depth: float) -> float:
    total = 0.0
    for kf in window:
        total += _keyframe_loss(splat_render.render(gmap, kf.pose, k), kf.frame, lambda_depth)[0]
    return total


def adam_step(gmap: GaussianMap, grads: dict, lrs: dict, b1=0.9, b2=0.999, eps=1e-15) -> None:
    """Per-Gaussian Adam update; only Gaussians with a non-zero gradient advance their step."""
    touched = np.zeros(len(gmap), dtype=bool)
    for name in PARAM_NAMES:
        g = grads[name].reshape(len(gmap), -1)
        touched |= np.any(g != 0, axis=1)
    gmap.opt.step[touched] += 1
    t = np.maximum(gmap.opt.step, 1)[:, None]
    for name in PARAM_NAMES:
        g = grads[name].reshape(len(gmap), -1)
        m = gmap.opt.m[name]
        v = gmap.opt.v[name]
        m[touched] = b1 * m[touched] + (1 - b1) * g[touched]
        v[touched] = b2 * v[touched] + (1 - b2) * g[touched] ** 2
        upd = lrs[name] * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        upd[~touched] = 0.0
        p = gmap.params(name)
        p -= upd
    gmap.normalize_quats()


def optimize_map(gmap: GaussianMap, window, k: Intrinsics, iters: int, lambda_depth: float,
                 cfg: MappingConfig | None = None, lr_factor: float = 1.0) -> list[float]:
    """Joint descent on all Gaussian parameters over the keyframes in ``window``.

    Returns the window loss before each update. Image-space positional
    gradient norms are accumulated for ``densify_and_prune``.
    """
    window = list(window)
    if not window:
        raise InvalidArgument("keyframe window is empty")
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    cfg = cfg or MappingConfig()
    lrs = cfg.learning_rates(lr_factor)
    losses = []
    n = len(gmap)
    for _ in range(iters):
        grads = {name: np.zeros_like(gmap.params(name)) for name in PARAM_NAMES}
        total = 0.0
        for kf in window:
            out = splat_render.render(gmap, kf.pose, k)
            loss, gc, gd = _keyframe_loss(out, kf.frame, lambda_depth)
            total += loss
            g = splat_render.render_backward(gmap, kf.pose, k, gc, gd, forward=out)
            for name, arr in g.as_dict().items():
                grads[name] += arr.reshape(grads[name].shape)
            seen = out._proj.order
            gmap.grad_accum[seen] += np.linalg.norm(g.mu2d[seen], axis=1)
            gmap.grad_count[seen] += 1
        if cfg.isotropic_reg > 0 and n:
            dev = gmap.log_scale - gmap.log_scale.mean(axis=1, keepdims=True)
            total += cfg.isotropic_reg * float((dev**2).sum() / n)
            grads["log_scale"] += cfg.isotropic_reg * 2.0 * dev / n
        losses.append(total)
        adam_step(gmap, grads, lrs)
    return losses


def densify_and_prune(gmap: GaussianMap, grad_threshold: float = 2e-4, opacity_min: float = 0.05,
                      extent_min: float = 1e-4) -> DensifyStats:
    """Clone high-gradient Gaussians, prune transparent or vanishing ones, reset accumulators."""
    if min(grad_threshold, opacity_min, extent_min) <= 0:
        raise InvalidArgument("thresholds must be positive")
    mean_grad = gmap.grad_accum / np.maximum(gmap.grad_count, 1)
    src = np.nonzero(mean_grad > grad_threshold)[0]
    if src.size:
        L = quats_to_rotations(gmap.quat[src]) * np.exp(gmap.log_scale[src])[:, None, :]
        z = gmap.rng.standard_normal((src.size, 3))
        offset = np.einsum("nij,nj->ni", L, z)
        gmap.add(gmap.mu[src] + offset, gmap.log_scale[src], gmap.quat[src], gmap.color[src],
                 gmap.opacity_logit[src])
    opacity = sigmoid(gmap.opacity_logit)
    extent = np.exp(gmap.log_scale).max(axis=1)
    drop = (opacity < opacity_min) | (extent < extent_min)
    gmap.keep(~drop)
    gmap.grad_accum[:] = 0.0
    gmap.grad_count[:] = 0
    return DensifyStats(int(src.size), int(drop.sum()), len(gmap))
