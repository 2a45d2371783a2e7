"""Keyframe selection by Gaussian covisibility, baseline and motion gating.

A candidate frame scores ``w_covis*(1 - IoU) + w_base*|t|/d_med - w_mot*gate``
against the latest keyframe, where IoU is taken between the sets of Gaussians
visible in each frame. Fast motion (a proxy for blur) is a hard rejection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .errors import InvalidArgument
from .geometry import Pose

log = logging.getLogger(__name__)

VISIBLE_WEIGHT = 0.01

ADDED = "added"
REJECTED_SCORE = "rejected-score"
REJECTED_MOTION = "rejected-motion"


@dataclass
class KfConfig:
    w_covis: float = 1.0
    w_base: float = 8.0
    w_mot: float = 1.0
    tau_kf: float = 0.7
    tau_overlap: float = 0.8
    v_max: float = 1.0  # m/s
    omega_max: float = 1.5  # rad/s
    capacity: int = 8

    def __post_init__(self):
        if min(self.w_covis, self.w_base, self.w_mot) < 0:
            raise InvalidArgument("keyframe weights must be non-negative")
        if self.capacity < 1:
            raise InvalidArgument("window capacity must be >= 1")
        if self.v_max < 0 or self.omega_max < 0:
            raise InvalidArgument("motion thresholds must be non-negative")

    @classmethod
    def ungated(cls, **kw) -> "KfConfig":
        """Motion constraint switched off: zero penalty and unreachable thresholds."""
        return cls(**{**kw, "w_mot": 0.0, "v_max": math.inf, "omega_max": math.inf})


@dataclass
class FrameStats:
    visible: frozenset
    v: float
    omega: float
    t_ij_norm: float
    d_med: float
    t: float = 0.0

    def __post_init__(self):
        self.visible = frozenset(self.visible)
        if self.v < 0 or self.omega < 0:
            raise InvalidArgument("speeds must be non-negative")


@dataclass
class Keyframe:
    frame_id: int
    t: float
    pose: Pose
    visible: frozenset
    frame: Any = None


@dataclass
class KeyframeDecision:
    kind: str
    score: float
    iou: float
    baseline: float
    gate: bool
    pruned: list = field(default_factory=list)
    evicted: list = field(default_factory=list)

    @property
    def added(self) -> bool:
        return self.kind == ADDED

    def log_line(self, t: float, frame_id: int) -> str:
        return (f"kf t={t:.6f} frame={frame_id} iou={self.iou:.4f} baseline={self.baseline:.4f} "
                f"gate={int(self.gate)} score={self.score:.4f} decision={self.kind} "
                f"pruned={','.join(map(str, self.pruned)) or '-'} evicted={','.join(map(str, self.evicted)) or '-'}")


class KeyframeWindow:
    """Bounded, time-ordered keyframe set. The last entry is the latest keyframe."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise InvalidArgument("window capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[Keyframe] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def latest(self) -> Keyframe | None:
        return self.entries[-1] if self.entries else None

    def ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]

    def push(self, kf: Keyframe) -> list[int]:
        """Append ``kf``; evict oldest non-latest entries while over capacity. Returns evicted ids."""
        if self.entries and kf.t < self.entries[-1].t:
            raise InvalidArgument("keyframes must arrive in time order")
        self.entries.append(kf)
        evicted = []
        while len(self.entries) > self.capacity:
            evicted.append(self.entries.pop(0).frame_id)
        return evicted

    def refresh_visible(self, frame_id: int, visible: Iterable[int]) -> None:
        for e in self.entries:
            if e.frame_id == frame_id:
                e.visible = frozenset(visible)


def visible_set(render) -> frozenset:
    """Ids of Gaussians with blend weight > 0.01 somewhere they sit in front of half opacity."""
    vs = render.vis_stats
    sel = (vs.max_blend_weight > VISIBLE_WEIGHT) & vs.contributes_pre_half
    return frozenset(int(i) for i in np.asarray(render.ids)[sel])


def covisibility_iou(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def motion_gate(v: float, omega: float, cfg: KfConfig) -> bool:
    if v < 0 or omega < 0:
        raise InvalidArgument("speeds must be non-negative")
    return bool(v > cfg.v_max or omega > cfg.omega_max)


def median_depth(render) -> float:
    """Median alpha-normalised rendered depth over pixels with alpha > 0.5; 0 when none."""
    mask = render.alpha > 0.5
    if not mask.any():
        return 0.0
    return float(np.median(render.depth[mask] / render.alpha[mask]))


def score_terms(stats: FrameStats, latest_visible: Iterable[int], cfg: KfConfig) -> tuple[float, float, bool]:
    if not stats.d_med > 0:
        raise InvalidArgument(f"d_med must be positive, got {stats.d_med}")
    return covisibility_iou(stats.visible, latest_visible), stats.t_ij_norm / stats.d_med, \
        motion_gate(stats.v, stats.omega, cfg)


def keyframe_score(stats: FrameStats, latest_visible: Iterable[int], cfg: KfConfig) -> float:
    iou, base, gate = score_terms(stats, latest_visible, cfg)
    return cfg.w_covis * (1.0 - iou) + cfg.w_base * base - cfg.w_mot * float(gate)


def update_window(window: KeyframeWindow, stats: FrameStats, cfg: KfConfig, frame_id: int,
                  pose: Pose | None = None, frame=None) -> KeyframeDecision:
    """Decide on a candidate and apply the decision to ``window``.

    An empty window accepts any candidate that passes the motion gate. After an
    insertion every older keyframe whose IoU with the new one exceeds
    ``tau_overlap`` is pruned; capacity is then enforced by evicting the oldest.
    """
    gate = motion_gate(stats.v, stats.omega, cfg)
    latest = window.latest
    if latest is None:
        iou, base, score = 0.0, 0.0, math.inf
    else:
        iou, base, gate = score_terms(stats, latest.visible, cfg)
        score = cfg.w_covis * (1.0 - iou) + cfg.w_base * base - cfg.w_mot * float(gate)
    if gate:
        dec = KeyframeDecision(REJECTED_MOTION, score, iou, base, gate)
    elif not score > cfg.tau_kf:
        dec = KeyframeDecision(REJECTED_SCORE, score, iou, base, gate)
    else:
        pruned = [e.frame_id for e in window.entries if covisibility_iou(e.visible, stats.visible) > cfg.tau_overlap]
        window.entries = [e for e in window.entries if e.frame_id not in pruned]
        evicted = window.push(Keyframe(frame_id, stats.t, pose, stats.visible, frame))
        dec = KeyframeDecision(ADDED, score, iou, base, gate, pruned, evicted)
    log.info(dec.log_line(stats.t, frame_id))
    return dec
