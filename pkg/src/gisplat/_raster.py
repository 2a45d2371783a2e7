"""Numba kernels for per-pixel front-to-back blending and its adjoint.

All per-Gaussian inputs are given in blending order (ascending depth, ties by
id). ``rect`` holds inclusive pixel bounds ``(x0, x1, y0, y1)`` of each
Gaussian's 3-sigma box; pixels outside the box receive no contribution.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TILE = 4
ALPHA_MAX = 0.99
ACCUM_STOP = 0.999
PRE_HALF = 0.5
VIS_WEIGHT = 0.01


@njit(cache=True)
def bin_tiles(rect, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    m = rect.shape[0]
    for g in range(m):
        tx0 = rect[g, 0] // TILE
        tx1 = rect[g, 1] // TILE
        ty0 = rect[g, 2] // TILE
        ty1 = rect[g, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    lst = np.empty(start[-1], dtype=np.int64)
    for g in range(m):
        tx0 = rect[g, 0] // TILE
        tx1 = rect[g, 1] // TILE
        ty0 = rect[g, 2] // TILE
        ty1 = rect[g, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                lst[fill[t]] = g
                fill[t] += 1
    return start, lst


@njit(cache=True)
def forward(width, height, mu, conic, opac, color, depth, rect, start, lst, bg):
    m = mu.shape[0]
    out_c = np.zeros((height, width, 3))
    out_d = np.zeros((height, width))
    out_a = np.zeros((height, width))
    n_iter = np.zeros((height, width), dtype=np.int64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    n_clamped = np.zeros((height, width), dtype=np.int64)
    max_w = np.zeros(m)
    pre_half = np.zeros(m, dtype=np.bool_)
    tiles_x = (width + TILE - 1) // TILE
    for py in range(height):
        for px in range(width):
            t = (py // TILE) * tiles_x + (px // TILE)
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            dd = 0.0
            acc = 0.0
            k = start[t]
            end = start[t + 1]
            while k < end:
                g = lst[k]
                k += 1
                if px < rect[g, 0] or px > rect[g, 1] or py < rect[g, 2] or py > rect[g, 3]:
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                a = opac[g] * np.exp(power)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                    n_clamped[py, px] += 1
                w = a * T
                cr += color[g, 0] * w
                cg += color[g, 1] * w
                cb += color[g, 2] * w
                dd += depth[g] * w
                acc += w
                if w > max_w[g]:
                    max_w[g] = w
                if 1.0 - T <= PRE_HALF and w > VIS_WEIGHT:
                    pre_half[g] = True
                n_contrib[py, px] += 1
                T = T * (1.0 - a)
                if 1.0 - T > ACCUM_STOP:
                    break
            n_iter[py, px] = k - start[t]
            out_c[py, px, 0] = cr + T * bg[0]
            out_c[py, px, 1] = cg + T * bg[1]
            out_c[py, px, 2] = cb + T * bg[2]
            out_d[py, px] = dd
            # the sum of the weights, equal to 1 - T up to rounding
            out_a[py, px] = acc
    return out_c, out_d, out_a, n_iter, n_contrib, n_clamped, max_w, pre_half


@njit(cache=True)
def blend_weights(width, height, px, py, mu, conic, opac, rect, start, lst):
    """Blending weights at one pixel, in blending order (debug helper)."""
    tiles_x = (width + TILE - 1) // TILE
    t = (py // TILE) * tiles_x + (px // TILE)
    ids = []
    ws = []
    T = 1.0
    acc = 0.0
    for k in range(start[t], start[t + 1]):
        g = lst[k]
        if px < rect[g, 0] or px > rect[g, 1] or py < rect[g, 2] or py > rect[g, 3]:
            continue
        dx = px - mu[g, 0]
        dy = py - mu[g, 1]
        power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
        a = min(opac[g] * np.exp(power), ALPHA_MAX)
        ids.append(g)
        ws.append(a * T)
        acc += a * T
        T = T * (1.0 - a)
        if 1.0 - T > ACCUM_STOP:
            break
    return np.array(ids, dtype=np.int64), np.array(ws), acc


@njit(cache=True)
def backward(width, height, mu, conic, opac, color, depth, rect, start, lst, bg, n_iter,
             grad_c, grad_d, grad_a):
    m = mu.shape[0]
    g_mu = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    g_color = np.zeros((m, 3))
    g_depth = np.zeros(m)
    tiles_x = (width + TILE - 1) // TILE
    max_len = 0
    for t in range(start.shape[0] - 1):
        if start[t + 1] - start[t] > max_len:
            max_len = start[t + 1] - start[t]
    a_buf = np.zeros(max_len)
    T_buf = np.zeros(max_len)
    g_buf = np.zeros(max_len, dtype=np.int64)
    c_buf = np.zeros(max_len, dtype=np.bool_)
    for py in range(height):
        for px in range(width):
            gr = grad_c[py, px, 0]
            gg = grad_c[py, px, 1]
            gb = grad_c[py, px, 2]
            gd = grad_d[py, px]
            ga = grad_a[py, px]
            if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                continue
            t = (py // TILE) * tiles_x + (px // TILE)
            # replay the forward pass to recover per-layer alpha and transmittance
            n = 0
            T = 1.0
            for k in range(start[t], start[t] + n_iter[py, px]):
                g = lst[k]
                if px < rect[g, 0] or px > rect[g, 1] or py < rect[g, 2] or py > rect[g, 3]:
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                a = opac[g] * np.exp(power)
                clamped = False
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                    clamped = True
                a_buf[n] = a
                T_buf[n] = T
                g_buf[n] = g
                c_buf[n] = clamped
                n += 1
                T = T * (1.0 - a)
            # suffix sums of what lies behind the current layer
            sr = bg[0] * T
            sg = bg[1] * T
            sb = bg[2] * T
            sd = 0.0
            sa = 0.0  # alpha is the sum of weights: a unit "colour" over a zero background
            for i in range(n - 1, -1, -1):
                g = g_buf[i]
                a = a_buf[i]
                Ti = T_buf[i]
                w = a * Ti
                g_color[g, 0] += w * gr
                g_color[g, 1] += w * gg
                g_color[g, 2] += w * gb
                g_depth[g] += w * gd
                inv = 1.0 / (1.0 - a)
                da = (gr * (Ti * color[g, 0] - sr * inv) + gg * (Ti * color[g, 1] - sg * inv)
                      + gb * (Ti * color[g, 2] - sb * inv) + gd * (Ti * depth[g] - sd * inv)
                      + ga * (Ti - sa * inv))
                sr += color[g, 0] * w
                sg += color[g, 1] * w
                sb += color[g, 2] * w
                sd += depth[g] * w
                sa += w
                if c_buf[i]:
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                gauss = a / opac[g]
                g_opac[g] += da * gauss
                dpow = da * a
                g_mu[g, 0] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mu[g, 1] += dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += dpow * (-0.5 * dx * dx)
                g_conic[g, 1] += dpow * (-dx * dy)
                g_conic[g, 2] += dpow * (-0.5 * dy * dy)
    return g_mu, g_conic, g_opac, g_color, g_depth
