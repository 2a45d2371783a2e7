"""Sequential SLAM loop: track, decide on a keyframe, update the map."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import SlamConfig
from .errors import InitFailed, InvalidArgument
from .evaluation import psnr, ssim
from .frame import Frame
from .geometry import Intrinsics, Pose, log_rotation
from .gmap import DensifyStats, GaussianMap, densify_and_prune, optimize_map, seed_from_frame
from .imu import VelocityState
from .keyframing import FrameStats, Keyframe, KeyframeWindow, median_depth, update_window, visible_set
from .splat_render import render
from .tracking import MotionPrior, track_frame

log = logging.getLogger(__name__)

INSERT_ALPHA = 0.5


@dataclass
class FrameDiagnostics:
    index: int
    t: float
    loss: float
    iterations: int
    converged: bool
    decision: str
    score: float = 0.0
    iou: float = 1.0
    baseline: float = 0.0
    gate: bool = False
    v: float = 0.0
    omega: float = 0.0
    n_gaussians: int = 0
    seeded: int = 0
    pruned_keyframes: list = field(default_factory=list)
    densify: DensifyStats | None = None
    held_out_psnr: float | None = None
    held_out_ssim: float | None = None


@dataclass
class SlamOutput:
    trajectory: list
    keyframe_ids: list
    gmap: GaussianMap
    diagnostics: list
    config: SlamConfig

    @property
    def keyframe_trajectory(self) -> list:
        ids = set(self.keyframe_ids)
        return [tp for d, tp in zip(self.diagnostics, self.trajectory) if d.index in ids]

    def held_out_psnr(self) -> list[float]:
        return [d.held_out_psnr for d in self.diagnostics if d.held_out_psnr is not None]

    def held_out_ssim(self) -> list[float]:
        return [d.held_out_ssim for d in self.diagnostics if d.held_out_ssim is not None]


class SlamState:
    """Mutable state of one run. ``gmap`` and ``window`` are owned exclusively by it."""

    def __init__(self, cfg: SlamConfig, k: Intrinsics):
        self.cfg = cfg
        self.k = k
        self.tracking = cfg.effective_tracking()
        self.gmap = GaussianMap(cfg.seed)
        self.window = KeyframeWindow(cfg.kf.capacity)
        self.rng = np.random.default_rng(cfg.seed)
        self.trajectory: list[tuple[float, Pose]] = []
        self.velocity = VelocityState.invalid()
        self.last_imu = None
        self.keyframe_ids: list[int] = []
        self.diagnostics: list[FrameDiagnostics] = []
        self.map_iters = 0

    @property
    def pose(self) -> Pose:
        return self.trajectory[-1][1]

    def sensor_frame(self, frame: Frame) -> Frame:
        """The frame as the configured sensor sees it: no depth in monocular mode."""
        if self.cfg.mode == "mono" and frame.depth is not None:
            return dataclasses.replace(frame, depth=None)
        return frame

    def output(self) -> SlamOutput:
        return SlamOutput(list(self.trajectory), list(self.keyframe_ids), self.gmap, list(self.diagnostics), self.cfg)


def _seed(state: SlamState, frame: Frame, pose: Pose, mask=None, render_out=None) -> int:
    cfg = state.cfg
    gs = seed_from_frame(frame, pose, state.k, cfg.mapping.seed_stride, render_out, cfg.seeding, state.rng, mask)
    if gs:
        state.gmap.add_gaussians(gs)
    return len(gs)


def _map_update(state: SlamState) -> DensifyStats | None:
    mc = state.cfg.mapping
    optimize_map(state.gmap, state.window, state.k, mc.iters_per_kf, mc.lambda_depth if state.cfg.mode == "rgbd"
                 else 0.0, mc)
    state.map_iters += mc.iters_per_kf
    stats = None
    if state.map_iters >= mc.densify_interval:
        stats = densify_and_prune(state.gmap, mc.grad_threshold, mc.opacity_min, mc.extent_min)
        state.map_iters = 0
        log.info("densify: cloned=%d pruned=%d total=%d", stats.cloned, stats.pruned, stats.total_after)
    for kf in state.window:
        kf.visible = visible_set(render(state.gmap, kf.pose, state.k))
    return stats


def initialize(frame: Frame, cfg: SlamConfig, k: Intrinsics, init_pose: Pose | None = None) -> SlamState:
    """Seed and fit the map to the first frame, which becomes keyframe 0."""
    if frame.rgb is None:
        raise InitFailed("first frame has no RGB image")
    try:
        frame.validate(k)
    except InvalidArgument as e:
        raise InitFailed(str(e)) from None
    state = SlamState(cfg, k)
    pose = init_pose if init_pose is not None else Pose.identity()
    sf = state.sensor_frame(frame)
    seeded = _seed(state, sf, pose)
    if seeded == 0:
        raise InitFailed("no seeds could be placed in the first frame")
    state.trajectory.append((frame.t, pose))
    state.window.push(Keyframe(frame.index, frame.t, pose, frozenset(), sf))
    state.keyframe_ids.append(frame.index)
    _map_update(state)
    state.last_imu = frame.imu[-1] if frame.imu else None
    state.diagnostics.append(FrameDiagnostics(frame.index, frame.t, 0.0, 0, True, "added",
                                              n_gaussians=len(state.gmap), seeded=seeded))
    return state


def _motion(state: SlamState, frame: Frame, pose: Pose) -> tuple[float, float]:
    """Linear and angular speed for the motion gate: IMU-based when available, else pose differences."""
    t_prev, p_prev = state.trajectory[-1]
    dt = frame.t - t_prev
    v = float(np.linalg.norm(state.velocity.v)) if state.velocity.valid else 0.0
    if frame.has_gyro and state.cfg.imu_mode == "full":
        omega = float(np.mean([np.linalg.norm(s.gyro) for s in frame.imu]))
    elif dt > 0:
        omega = float(np.linalg.norm(log_rotation(p_prev.rotation.T @ pose.rotation))) / dt
    else:
        omega = 0.0
    if not state.velocity.valid and dt > 0:
        v = float(np.linalg.norm(pose.translation - p_prev.translation)) / dt
    return v, omega


def step(state: SlamState, frame: Frame) -> FrameDiagnostics:
    cfg = state.cfg
    sf = state.sensor_frame(frame)
    imu = ([state.last_imu] if state.last_imu is not None else []) + list(frame.imu)
    prior = MotionPrior(state.trajectory[-3:], state.velocity, imu, cfg.imu_mode,
                        None if cfg.gravity is None else np.asarray(cfg.gravity, dtype=np.float64),
                        cfg.single_sample_imu)
    res = track_frame(state.gmap, sf, prior, state.k, state.tracking)
    pose = res.pose
    state.velocity = res.velocity
    v, omega = _motion(state, frame, pose)
    state.trajectory.append((frame.t, pose))
    state.last_imu = frame.imu[-1] if frame.imu else state.last_imu

    out = render(state.gmap, pose, state.k, cfg.background)
    d_med = median_depth(out)
    if not d_med > 0:
        valid = sf.depth[sf.depth > 0] if sf.depth is not None else np.zeros(0)
        d_med = float(np.median(valid)) if valid.size else cfg.seeding.d_min
    latest = state.window.latest
    stats = FrameStats(visible_set(out), v, omega, float(np.linalg.norm(pose.translation - latest.pose.translation)),
                       d_med, frame.t)
    dec = update_window(state.window, stats, cfg.kf, frame.index, pose, sf)
    diag = FrameDiagnostics(frame.index, frame.t, res.final_loss, res.iterations_used, res.converged, dec.kind,
                            dec.score, dec.iou, dec.baseline, dec.gate, v, omega,
                            pruned_keyframes=dec.pruned + dec.evicted)
    if dec.added:
        state.keyframe_ids.append(frame.index)
        diag.seeded = _seed(state, sf, pose, mask=out.alpha < INSERT_ALPHA, render_out=out)
        diag.densify = _map_update(state)
    elif frame.index % cfg.eval_every == 0:
        diag.held_out_psnr = psnr(out.color, frame.rgb)
        if min(frame.rgb.shape[:2]) >= 11:
            diag.held_out_ssim = ssim(out.color, frame.rgb)
    diag.n_gaussians = len(state.gmap)
    state.diagnostics.append(diag)
    log.debug("frame %d t=%.3f loss=%.5f iters=%d %s", frame.index, frame.t, res.final_loss,
              res.iterations_used, dec.kind)
    return diag


def run(frames: Iterable[Frame], cfg: SlamConfig, k: Intrinsics, init_pose: Pose | None = None,
        callback=None) -> SlamOutput:
    """Process ``frames`` in order. ``callback(state, diag)`` is invoked after every frame."""
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise InitFailed("no frames") from None
    state = initialize(first, cfg, k, init_pose)
    if callback:
        callback(state, state.diagnostics[-1])
    for frame in it:
        diag = step(state, frame)
        if callback:
            callback(state, diag)
    return state.output()
