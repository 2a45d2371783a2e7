"""Differentiable Gaussian rasterizer (CPU, per-pixel exact).

``render`` projects every Gaussian to a 2D screen-space Gaussian, sorts by
camera depth (ties broken by id), and alpha-composites front to back.
``render_backward`` returns analytic gradients of
``sum(grad_color * color) + sum(grad_depth * depth)`` with respect to all
Gaussian parameters and to a right-multiplied camera pose increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _raster
from .geometry import NEAR_PLANE, Intrinsics, Pose
from .gmap.model import Gaussian3D, GaussianMap, quats_to_rotations, sigmoid

BLUR_FLOOR = 0.3
CULL_MARGIN = 1.3
BOX_SIGMAS = 3.0


@dataclass
class Gaussian2D:
    mu_i: np.ndarray
    sigma_i: np.ndarray
    depth: float
    gaussian_id: int


@dataclass
class _Projection:
    """Per-Gaussian intermediate quantities, indexed like the map."""

    valid: np.ndarray
    R: np.ndarray
    scale: np.ndarray
    M: np.ndarray
    cov_w: np.ndarray
    p_cam: np.ndarray
    cov_c: np.ndarray
    J: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mu2d: np.ndarray
    rect: np.ndarray
    opacity: np.ndarray
    R_cw: np.ndarray
    order: np.ndarray  # map indices of drawn Gaussians in blending order


@dataclass
class VisStats:
    max_blend_weight: np.ndarray
    contributes_pre_half: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    vis_stats: VisStats
    ids: np.ndarray
    n_contrib: np.ndarray = field(repr=False, default=None)
    n_clamped: np.ndarray = field(repr=False, default=None)
    _proj: _Projection = field(repr=False, default=None)
    _raster: tuple = field(repr=False, default=None)

    def signature(self) -> tuple:
        """Discrete state of the render (draw order, boxes, per-pixel layer counts).

        Two renders with equal signatures lie on the same smooth piece of the
        rendering function, which is what finite-difference checks need.
        """
        p = self._proj
        return (p.order.tobytes(), p.rect[p.order].tobytes(), self.n_contrib.tobytes(), self.n_clamped.tobytes())


@dataclass
class RenderGradients:
    mu: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    pose: np.ndarray
    mu2d: np.ndarray  # image-space positional gradient, used for densification

    def as_dict(self) -> dict:
        return {"mu": self.mu, "log_scale": self.log_scale, "quat": self.quat, "color": self.color,
                "opacity_logit": self.opacity_logit}


def _project_all(gmap, pose: Pose, k: Intrinsics) -> _Projection:
    n = len(gmap.ids)
    R_cw = pose.rotation.T
    t_cw = -R_cw @ pose.translation
    R = quats_to_rotations(gmap.quat) if n else np.zeros((0, 3, 3))
    scale = np.exp(gmap.log_scale)
    M = R * scale[:, None, :]
    cov_w = M @ np.swapaxes(M, 1, 2)
    p_cam = gmap.mu @ R_cw.T + t_cw
    cov_c = R_cw @ cov_w @ R_cw.T
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * x / zs**2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * y / zs**2
    cov2d = J @ cov_c @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mu2d = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=1)
    valid &= np.abs(mu2d[:, 0] - k.width / 2) <= CULL_MARGIN * k.width / 2
    valid &= np.abs(mu2d[:, 1] - k.height / 2) <= CULL_MARGIN * k.height / 2
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(BOX_SIGMAS * np.sqrt(lam))
    rect = np.zeros((n, 4), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        rect[:, 0] = np.maximum(np.ceil(mu2d[:, 0] - radius), 0)
        rect[:, 1] = np.minimum(np.floor(mu2d[:, 0] + radius), k.width - 1)
        rect[:, 2] = np.maximum(np.ceil(mu2d[:, 1] - radius), 0)
        rect[:, 3] = np.minimum(np.floor(mu2d[:, 1] + radius), k.height - 1)
    valid &= (rect[:, 0] <= rect[:, 1]) & (rect[:, 2] <= rect[:, 3])
    idx = np.nonzero(valid)[0]
    order = idx[np.lexsort((gmap.ids[idx], z[idx]))]
    return _Projection(valid, R, scale, M, cov_w, p_cam, cov_c, J, cov2d, conic, mu2d, rect,
                       sigmoid(gmap.opacity_logit), R_cw, order)


def project_gaussian(g: Gaussian3D, pose: Pose, k: Intrinsics, gaussian_id: int = 0) -> Gaussian2D | None:
    """Screen-space Gaussian, or None when culled."""
    single = GaussianMap()
    single.add(g.mu_w, g.log_scale, g.rot, g.color, g.opacity_logit)
    single.ids[:] = gaussian_id
    p = _project_all(single, pose, k)
    if not p.valid[0]:
        return None
    return Gaussian2D(p.mu2d[0].copy(), p.cov2d[0].copy(), float(p.p_cam[0, 2]), gaussian_id)


def render(gmap, pose: Pose, k: Intrinsics, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Front-to-back composite of the map seen from ``pose`` (camera-to-world)."""
    proj = _project_all(gmap, pose, k)
    o = proj.order
    mu = np.ascontiguousarray(proj.mu2d[o])
    conic = np.ascontiguousarray(proj.conic[o])
    opac = np.ascontiguousarray(proj.opacity[o])
    color = np.ascontiguousarray(gmap.color[o], dtype=np.float64)
    depth = np.ascontiguousarray(proj.p_cam[o, 2])
    rect = np.ascontiguousarray(proj.rect[o])
    bg = np.asarray(background, dtype=np.float64)
    start, lst = _raster.bin_tiles(rect, k.width, k.height)
    c, d, a, n_iter, n_contrib, n_clamped, max_w, pre_half = _raster.forward(
        k.width, k.height, mu, conic, opac, color, depth, rect, start, lst, bg)
    n = len(gmap.ids)
    vis_max = np.zeros(n)
    vis_pre = np.zeros(n, dtype=bool)
    vis_max[o] = max_w
    vis_pre[o] = pre_half
    return RenderOutput(c, d, a, VisStats(vis_max, vis_pre), np.asarray(gmap.ids).copy(), n_contrib, n_clamped,
                        proj, (mu, conic, opac, color, depth, rect, start, lst, bg, n_iter))


def pixel_blend_weights(out: RenderOutput, k: Intrinsics, px: int, py: int):
    """Map indices and blending weights of all layers at one pixel."""
    mu, conic, opac, _, _, rect, start, lst, _, _ = out._raster
    local, w, acc = _raster.blend_weights(k.width, k.height, px, py, mu, conic, opac, rect, start, lst)
    return out._proj.order[local], w, acc


def _dR_dq(qn: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion (x, y, z, w) given dL/dR."""
    x, y, z, w = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = gR
    gx = (2 * y * (g[:, 0, 1] + g[:, 1, 0]) + 2 * z * (g[:, 0, 2] + g[:, 2, 0])
          + 2 * w * (g[:, 2, 1] - g[:, 1, 2]) - 4 * x * (g[:, 1, 1] + g[:, 2, 2]))
    gy = (2 * x * (g[:, 0, 1] + g[:, 1, 0]) + 2 * w * (g[:, 0, 2] - g[:, 2, 0])
          + 2 * z * (g[:, 1, 2] + g[:, 2, 1]) - 4 * y * (g[:, 0, 0] + g[:, 2, 2]))
    gz = (2 * w * (g[:, 1, 0] - g[:, 0, 1]) + 2 * x * (g[:, 0, 2] + g[:, 2, 0])
          + 2 * y * (g[:, 1, 2] + g[:, 2, 1]) - 4 * z * (g[:, 0, 0] + g[:, 1, 1]))
    gw = (2 * z * (g[:, 1, 0] - g[:, 0, 1]) + 2 * y * (g[:, 0, 2] - g[:, 2, 0])
          + 2 * x * (g[:, 2, 1] - g[:, 1, 2]))
    return np.stack([gx, gy, gz, gw], axis=1)


def render_backward(gmap, pose: Pose, k: Intrinsics, grad_color: np.ndarray, grad_depth: np.ndarray,
                    background=(0.0, 0.0, 0.0), forward: RenderOutput | None = None,
                    grad_alpha: np.ndarray | None = None) -> RenderGradients:
    """Gradients of <grad_color, color> + <grad_depth, depth> + <grad_alpha, alpha>.

    Pass ``forward`` to reuse a render of the same inputs.
    """
    out = forward if forward is not None else render(gmap, pose, k, background)
    proj = out._proj
    mu2, conic, opac, color, depth, rect, start, lst, bg, n_iter = out._raster
    gc = np.ascontiguousarray(grad_color, dtype=np.float64)
    gdep = np.ascontiguousarray(grad_depth, dtype=np.float64)
    galpha = np.zeros_like(gdep) if grad_alpha is None else np.ascontiguousarray(grad_alpha, dtype=np.float64)
    g_mu2, g_conic, g_opac, g_color_s, g_depth_s = _raster.backward(
        k.width, k.height, mu2, conic, opac, color, depth, rect, start, lst, bg, n_iter, gc, gdep, galpha)

    n = len(gmap.ids)
    o = proj.order
    res = RenderGradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                          np.zeros(n), np.zeros(6), np.zeros((n, 2)))
    if o.size == 0:
        return res
    res.color[o] = g_color_s
    res.mu2d[o] = g_mu2
    op = proj.opacity[o]
    res.opacity_logit[o] = g_opac * op * (1.0 - op)

    # conic -> 2D covariance
    Ci = np.empty((o.size, 2, 2))
    Ci[:, 0, 0] = conic[:, 0]
    Ci[:, 0, 1] = Ci[:, 1, 0] = conic[:, 1]
    Ci[:, 1, 1] = conic[:, 2]
    Gc = np.empty_like(Ci)
    Gc[:, 0, 0] = g_conic[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gc[:, 1, 1] = g_conic[:, 2]
    G2 = -Ci @ Gc @ Ci

    J = proj.J[o]
    cov_c = proj.cov_c[o]
    G_covc = np.swapaxes(J, 1, 2) @ G2 @ J
    GJ = 2.0 * G2 @ J @ cov_c

    p = proj.p_cam[o]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    gp = np.zeros((o.size, 3))
    gp[:, 0] = g_mu2[:, 0] * k.fx / z
    gp[:, 1] = g_mu2[:, 1] * k.fy / z
    gp[:, 2] = -g_mu2[:, 0] * k.fx * x / z**2 - g_mu2[:, 1] * k.fy * y / z**2 + g_depth_s
    gp[:, 0] += -GJ[:, 0, 2] * k.fx / z**2
    gp[:, 1] += -GJ[:, 1, 2] * k.fy / z**2
    gp[:, 2] += (-GJ[:, 0, 0] * k.fx / z**2 + GJ[:, 0, 2] * 2 * k.fx * x / z**3
                 - GJ[:, 1, 1] * k.fy / z**2 + GJ[:, 1, 2] * 2 * k.fy * y / z**3)

    W = proj.R_cw
    res.mu[o] = gp @ W

    G_covw = W.T @ G_covc @ W
    M = proj.M[o]
    GM = 2.0 * G_covw @ M
    R = proj.R[o]
    s = proj.scale[o]
    res.log_scale[o] = np.einsum("nij,nij->nj", GM, R) * s
    GR = GM * s[:, None, :]
    q = gmap.quat[o]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qnorm
    gqn = _dR_dq(qn, GR)
    res.quat[o] = (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / qnorm

    # pose increment: T_cw -> exp(-xi) T_cw, so p_c -> p_c - rho - theta x p_c and W -> (I - [theta]x) W
    g_rho = -gp.sum(axis=0)
    g_theta = np.cross(gp, p).sum(axis=0)
    GW = 2.0 * G_covc @ (W @ proj.cov_w[o])  # dL/dW per Gaussian
    A = W @ GW.sum(axis=0).T
    g_theta -= np.array([A[1, 2] - A[2, 1], A[2, 0] - A[0, 2], A[0, 1] - A[1, 0]])
    res.pose = np.concatenate([g_rho, g_theta])
    return res


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm16(path, depth_m: np.ndarray) -> None:
    """16-bit binary PGM in millimetres (big-endian as the format requires)."""
    mm = np.clip(np.rint(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(mm.tobytes())


def read_pnm(path) -> np.ndarray:
    """Reader for the files written above (no comment lines)."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    body = data[pos + 1:]
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(body, dtype=dtype).reshape(h, w)
