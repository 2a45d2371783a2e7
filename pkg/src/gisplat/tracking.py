"""Frame-to-map tracking by first-order descent on the pose increment.

The objective is ``L_rgb + lambda_depth * L_depth + L_imu``. Photometric and
depth gradients come from the rasterizer's pose adjoint; the inertial term is
differentiated through the displacement and relative rotation implied by the
candidate pose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, NoImuData, TrackingUnavailable
from .frame import Frame
from .geometry import Intrinsics, Pose, log_rotation, se3_exp, se3_log, so3_exp, so3_right_jacobian_inv
from .imu import (
    DEFAULT_GRAVITY,
    ImuPrediction,
    ImuSample,
    VelocityState,
    estimate_velocity,
    imu_loss,
    integrate_between,
    velocity_from_imu,
)
from .splat_render import RenderOutput, render, render_backward

log = logging.getLogger(__name__)

ALPHA_MASK = 0.5
REJECT_LR_FACTOR = 0.5


@dataclass
class TrackingConfig:
    iters: int = 30
    lambda_depth: float = 0.9
    lambda_imu_t: float = 0.5
    lambda_imu_r: float = 0.5
    lr_rho: float = 2e-3
    lr_theta: float = 2e-3
    convergence_eps: float = 1e-5
    line_search: bool = False  # halve a failing step up to 5 times; retained steps never increase the loss
    masked_rgb: bool = False  # monocular: restrict the RGB term to alpha > 0.5
    velocity_gain: float = 0.2  # weight of the pose-difference velocity against IMU propagation

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidArgument("iters must be >= 1")
        if min(self.lambda_depth, self.lambda_imu_t, self.lambda_imu_r) < 0:
            raise InvalidArgument("loss weights must be non-negative")
        if not 0.0 <= self.velocity_gain <= 1.0:
            raise InvalidArgument("velocity_gain must be in [0, 1]")


@dataclass
class MotionPrior:
    """Everything the tracker knows about the motion before the new frame."""

    poses: Sequence[tuple[float, Pose]]
    velocity: VelocityState = field(default_factory=VelocityState.invalid)
    imu_samples: Sequence[ImuSample] = ()
    imu_mode: str = "off"  # off | accel_only | full
    gravity: np.ndarray | None = field(default_factory=lambda: DEFAULT_GRAVITY.copy())
    single_sample: bool = False


@dataclass
class TrackingResult:
    pose: Pose
    final_loss: float
    iterations_used: int
    converged: bool
    velocity: VelocityState
    initial_pose: Pose | None = None
    prediction: ImuPrediction | None = None
    losses: list = field(default_factory=list)


class LossTerm(NamedTuple):
    value: float
    grad: np.ndarray
    empty: bool = False
    grad_alpha: np.ndarray | None = None


def rgb_loss(rendered: RenderOutput, frame: Frame, masked: bool = False) -> LossTerm:
    """Mean absolute error over channels; ``masked`` keeps pixels with alpha > 0.5."""
    if rendered.color.shape != frame.rgb.shape:
        raise InvalidArgument(f"rendered {rendered.color.shape} vs observed {frame.rgb.shape}")
    diff = rendered.color - frame.rgb
    if masked:
        mask = rendered.alpha > ALPHA_MASK
        count = int(mask.sum()) * 3
        if count == 0:
            return LossTerm(0.0, np.zeros_like(diff), True)
        m3 = mask[..., None]
        return LossTerm(float(np.abs(diff * m3).sum() / count), np.sign(diff) * m3 / count)
    count = diff.size
    return LossTerm(float(np.abs(diff).sum() / count), np.sign(diff) / count)


def depth_loss(rendered: RenderOutput, frame: Frame) -> LossTerm | None:
    """Mean absolute depth error where observed depth > 0 and alpha > 0.5; None when not applicable.

    The rendered depth is compared after division by the accumulated alpha, so
    a slightly translucent map does not read as uniformly too shallow.
    """
    if frame.depth is None:
        return None
    if rendered.depth.shape != frame.depth.shape:
        raise InvalidArgument(f"rendered {rendered.depth.shape} vs observed {frame.depth.shape}")
    if not (frame.depth > 0).any():
        return None
    mask = (frame.depth > 0) & (rendered.alpha > ALPHA_MASK)
    count = int(mask.sum())
    if count == 0:
        return LossTerm(0.0, np.zeros_like(frame.depth), True, np.zeros_like(frame.depth))
    alpha = np.where(mask, rendered.alpha, 1.0)
    norm_depth = rendered.depth / alpha
    diff = norm_depth - frame.depth
    g = np.sign(diff) * mask / count
    return LossTerm(float(np.abs(diff[mask]).sum() / count), g / alpha, False, -g * norm_depth / alpha)


class _Objective:
    def __init__(self, gmap, frame: Frame, k: Intrinsics, cfg: TrackingConfig, prev: Pose,
                 pred: ImuPrediction | None):
        self.gmap, self.frame, self.k, self.cfg = gmap, frame, k, cfg
        self.prev = prev
        self.pred = pred

    def imu_terms(self, pose: Pose):
        if self.pred is None or (self.cfg.lambda_imu_t == 0 and self.cfg.lambda_imu_r == 0):
            return 0.0, np.zeros(6)
        dp = pose.translation - self.prev.translation
        rel = self.prev.rotation.T @ pose.rotation
        dth = log_rotation(rel)
        loss, g_t, g_r = imu_loss(dp, dth, self.pred, self.cfg.lambda_imu_t, self.cfg.lambda_imu_r)
        # local right increment: t -> t + R rho, rel -> rel exp(theta)
        g_rho = pose.rotation.T @ g_t
        g_theta = so3_right_jacobian_inv(dth).T @ g_r
        return loss, np.concatenate([g_rho, g_theta])

    def evaluate(self, pose: Pose):
        out = render(self.gmap, pose, self.k)
        lr = rgb_loss(out, self.frame, self.cfg.masked_rgb)
        ld = depth_loss(out, self.frame) if self.cfg.lambda_depth > 0 else None
        li, gi = self.imu_terms(pose)
        total = lr.value + li + (self.cfg.lambda_depth * ld.value if ld is not None else 0.0)
        return total, (out, lr, ld, gi)

    def gradient(self, pose: Pose, state) -> np.ndarray:
        out, lr, ld, gi = state
        if ld is not None:
            gdepth, galpha = self.cfg.lambda_depth * ld.grad, self.cfg.lambda_depth * ld.grad_alpha
        else:
            gdepth, galpha = np.zeros(out.depth.shape), None
        g = render_backward(self.gmap, pose, self.k, lr.grad, gdepth, forward=out, grad_alpha=galpha)
        return g.pose + gi


def predict_pose(prior: MotionPrior, t: float) -> tuple[Pose, ImuPrediction | None]:
    """Initial guess for the new pose: IMU prediction when possible, else constant velocity."""
    t_prev, p_prev = prior.poses[-1]
    dt = t - t_prev
    rot = p_prev.rotation
    # constant-velocity rotation from the last two poses
    if len(prior.poses) >= 2:
        t_pp, p_pp = prior.poses[-2]
        if t_prev > t_pp:
            w = log_rotation(p_pp.rotation.T @ p_prev.rotation) * (dt / (t_prev - t_pp))
            rot = p_prev.rotation @ so3_exp(w)
    vel = prior.velocity if prior.velocity.valid else estimate_velocity(prior.poses)
    trans = p_prev.translation + (vel.v * dt if vel.valid else 0.0)
    pred = None
    if prior.imu_mode != "off" and prior.imu_samples:
        try:
            pred = integrate_between(prior.imu_samples, t_prev, t, vel, p_prev.rotation, prior.gravity,
                                     prior.single_sample)
        except NoImuData:
            pred = None
    if pred is not None:
        if prior.imu_mode != "full":
            pred.has_rotation = False
            pred.dtheta = np.zeros(3)
        trans = p_prev.translation + pred.dp
        if pred.has_rotation:
            rot = p_prev.rotation @ so3_exp(pred.dtheta)
    return Pose(rot, trans), pred


def updated_velocity(prior: MotionPrior, t: float, pose: Pose, gain: float = 1.0) -> VelocityState:
    """Velocity at ``t``.

    With IMU data the previous velocity is propagated by the integrated
    acceleration and pulled towards the pose-difference estimate by ``gain``;
    differencing tracked poses alone turns centimetre pose noise into large
    velocity errors that feed back into the next prediction.
    """
    t_prev, p_prev = prior.poses[-1]
    if prior.imu_mode != "off" and prior.imu_samples:
        try:
            acc = integrate_between(prior.imu_samples, t_prev, t, VelocityState.invalid(), p_prev.rotation,
                                    prior.gravity, prior.single_sample)
        except NoImuData:
            acc = None
        if acc is not None:
            observed = velocity_from_imu(p_prev, pose, t - t_prev, acc)
            if not (prior.velocity.valid and observed.valid):
                return observed
            propagated = prior.velocity.v + acc.v_end
            return VelocityState(propagated + gain * (observed.v - propagated), True)
    return estimate_velocity([*prior.poses[-2:], (t, pose)])


def track_frame(gmap, frame: Frame, prior: MotionPrior, k: Intrinsics, cfg: TrackingConfig,
                init_pose: Pose | None = None) -> TrackingResult:
    """Estimate the pose of ``frame`` against the map, starting from the motion prior."""
    if len(gmap) == 0:
        raise TrackingUnavailable("map is empty", frame.index)
    if not prior.poses:
        raise InvalidArgument("tracking needs a previous pose")
    _, p_prev = prior.poses[-1]
    guess, pred = predict_pose(prior, frame.t)
    pose = init_pose if init_pose is not None else guess
    obj = _Objective(gmap, frame, k, cfg, p_prev, pred)

    lr = np.array([cfg.lr_rho] * 3 + [cfg.lr_theta] * 3)
    m = np.zeros(6)
    v = np.zeros(6)
    b1, b2, eps = 0.9, 0.999, 1e-12
    loss, state = obj.evaluate(pose)
    losses = [loss]
    best_pose, best_loss = pose, loss
    converged = False
    it = 0
    step_t = 0
    while it < cfg.iters:
        it += 1
        g = obj.gradient(pose, state)
        step_t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = -lr * (m / (1 - b1**step_t)) / (np.sqrt(v / (1 - b2**step_t)) + eps)
        if np.linalg.norm(step) < cfg.convergence_eps:
            converged = True
            break
        accepted = False
        trial = step
        for _ in range(6 if cfg.line_search else 1):
            cand = pose @ se3_exp(trial)
            c_loss, c_state = obj.evaluate(cand)
            if not cfg.line_search or c_loss <= loss:
                accepted = True
                break
            trial = trial * 0.5
        if accepted:
            pose, loss, state = cand, c_loss, c_state
            losses.append(loss)
            if loss < best_loss:
                best_pose, best_loss = pose, loss
            if np.linalg.norm(trial) < cfg.convergence_eps:
                converged = True
                break
        else:
            # restart the moment estimates in a smaller trust region
            lr = lr * REJECT_LR_FACTOR
            m[:] = 0.0
            v[:] = 0.0
            step_t = 0
            if np.linalg.norm(trial) < cfg.convergence_eps:
                converged = True
                break
    # without line search the iterates are not monotone; report the best one seen
    pose, loss = best_pose, best_loss
    vel = updated_velocity(prior, frame.t, pose, cfg.velocity_gain)
    return TrackingResult(pose, float(loss), it, converged, vel, guess, pred, losses)


def increment(prev: Pose, pose: Pose) -> np.ndarray:
    """Tangent vector xi with ``pose = prev @ exp(xi)``."""
    return se3_log(prev.inverse() @ pose)
