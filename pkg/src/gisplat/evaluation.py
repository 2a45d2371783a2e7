"""Trajectory and image-quality metrics: Umeyama alignment, ATE RMSE, PSNR, SSIM."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset_io import DEFAULT_MAX_DT, associate
from .errors import AlignmentFailed, InvalidArgument, MetricUnavailable
from .geometry import Pose

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ALIGN_MODES = ("rigid", "similarity", "sim3")


@dataclass
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def align_umeyama(est, gt, with_scale: bool = False, allow_degenerate: bool = False) -> Alignment:
    """Least-squares ``gt ~ s R est + t``.

    Collinear or coincident ``est`` points leave the rotation underdetermined
    and raise ``AlignmentFailed`` unless ``allow_degenerate``, in which case
    one of the equally optimal solutions is returned.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise InvalidArgument(f"point sets must be matching (N, 3) arrays, got {est.shape} and {gt.shape}")
    n = est.shape[0]
    if n < 3:
        raise AlignmentFailed(f"need at least 3 points, got {n}")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    de, dg = est - mu_e, gt - mu_g
    sv = np.linalg.svd(de, compute_uv=False)
    scale_ref = max(sv[0], np.abs(est).max(), 1.0)
    degenerate = sv[1] <= 1e-9 * scale_ref
    if degenerate and not allow_degenerate:
        raise AlignmentFailed("estimated points are collinear or coincident")
    var_e = float((de**2).sum() / n)
    if with_scale and var_e <= 1e-300:
        raise AlignmentFailed("zero spread in estimated points")
    cov = dg.T @ de / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_e) if with_scale else 1.0
    if with_scale and not s > 0:
        raise AlignmentFailed("non-positive scale")
    return Alignment(R, mu_g - s * R @ mu_e, s)


def _positions(traj) -> tuple[np.ndarray, np.ndarray]:
    ts, ps = [], []
    for t, p in traj:
        ts.append(float(t))
        ps.append(p.translation if isinstance(p, Pose) else np.asarray(p, dtype=np.float64))
    return np.array(ts), np.array(ps).reshape(-1, 3)


def associated_positions(est, gt, max_dt: float = DEFAULT_MAX_DT) -> tuple[np.ndarray, np.ndarray]:
    te, pe = _positions(est)
    tg, pg = _positions(gt)
    pairs = associate(te, tg, max_dt)
    if not pairs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    i, j = np.array(pairs).T
    return pe[i], pg[j]


def ate_rmse(est: Sequence, gt: Sequence, mode: str = "rigid", max_dt: float = DEFAULT_MAX_DT) -> float:
    """Translational RMSE in centimetres after aligning ``est`` onto ``gt``.

    ``est`` and ``gt`` are sequences of ``(t, Pose)`` or ``(t, xyz)``.
    """
    if mode not in ALIGN_MODES:
        raise InvalidArgument(f"unknown alignment mode {mode!r}")
    pe, pg = associated_positions(est, gt, max_dt)
    if len(pe) < 3:
        raise MetricUnavailable(f"need at least 3 associated poses, got {len(pe)}")
    al = align_umeyama(pe, pg, with_scale=mode != "rigid", allow_degenerate=True)
    res = pg - al.apply(pe)
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))) * 100.0)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, w.shape, axis=(0, 1))
    return np.einsum("ij...kl,kl->ij...", win, w)


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window over every fully contained position.

    Images are (H, W) or (H, W, C) with dynamic range 1; the map is averaged
    over positions and channels.
    """
    a, b = _check_pair(a, b)
    if a.ndim not in (2, 3) or a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgument(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    w = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def write_metrics(path, metrics: dict) -> None:
    """Metrics report as JSON; LPIPS is always reported as unavailable."""
    doc = {"lpips": "not-available", **metrics}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")
