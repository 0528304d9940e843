"""Front-to-back alpha compositing kernels (numba).

Inputs are already projected and globally depth-sorted: ``order`` lists the
visible Gaussians front to back. Every kernel composites a generic feature
matrix ``feat`` (n, K); the caller packs color and view depth into it.

The tiled kernel and the naive kernel share ``_falloff`` and visit the
same Gaussians in the same order, so their outputs agree bit for bit.
"""
from __future__ import annotations

import numba as nb
import numpy as np

T_CUTOFF = 1e-4
MAHALANOBIS_CUTOFF = 9.0  # 3 sigma, squared
TILE = 8

# the system TBB is too old for numba; prefer OpenMP
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_jit = dict(cache=True, fastmath=False, error_model="numpy")


@nb.njit(**_jit)
def _falloff(px, py, mx, my, ca, cb, cc):
    """exp(-d2 / 2) of the pixel offset, or -1 outside the 3-sigma ellipse."""
    dx = px - mx
    dy = py - my
    d2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if d2 > MAHALANOBIS_CUTOFF:
        return -1.0, dx, dy
    return np.exp(-0.5 * d2), dx, dy


@nb.njit(**_jit)
def build_tile_lists(order, mean2d, extent, width, height, tile):
    """CSR lists of Gaussians per tile, preserving the global depth order."""
    tw = (width + tile - 1) // tile
    th = (height + tile - 1) // tile
    n_tiles = tw * th
    counts = np.zeros(n_tiles, dtype=np.int64)
    rect = np.empty((len(order), 4), dtype=np.int64)
    for k in range(len(order)):
        g = order[k]
        # pixel centers sit at u + 0.5; pad by one pixel against rounding
        u0 = int(np.floor(mean2d[g, 0] - extent[g, 0] - 0.5)) - 1
        u1 = int(np.ceil(mean2d[g, 0] + extent[g, 0] - 0.5)) + 1
        v0 = int(np.floor(mean2d[g, 1] - extent[g, 1] - 0.5)) - 1
        v1 = int(np.ceil(mean2d[g, 1] + extent[g, 1] - 0.5)) + 1
        u0 = max(u0, 0)
        v0 = max(v0, 0)
        u1 = min(u1, width - 1)
        v1 = min(v1, height - 1)
        if u0 > u1 or v0 > v1:
            rect[k, 0] = 1
            rect[k, 1] = 0
            rect[k, 2] = 1
            rect[k, 3] = 0
            continue
        rect[k, 0] = u0 // tile
        rect[k, 1] = u1 // tile
        rect[k, 2] = v0 // tile
        rect[k, 3] = v1 // tile
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                counts[ty * tw + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n_tiles):
        offsets[i + 1] = offsets[i] + counts[i]
    lists = np.empty(offsets[n_tiles], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(len(order)):
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                t = ty * tw + tx
                lists[fill[t]] = order[k]
                fill[t] += 1
    return offsets, lists


@nb.njit(**_jit)
def _composite_pixel(px, py, ids, mean2d, conic, opacity, feat, out, best):
    """Composite one pixel over ``ids``; returns final transmittance."""
    K = feat.shape[1]
    T = 1.0
    best_w = 0.0
    best[0] = -1
    for k in range(len(ids)):
        if T < T_CUTOFF:
            break
        g = ids[k]
        G, dx, dy = _falloff(px, py, mean2d[g, 0], mean2d[g, 1], conic[g, 0], conic[g, 1], conic[g, 2])
        if G < 0.0:
            continue
        alpha = opacity[g] * G
        w = alpha * T
        for c in range(K):
            out[c] += w * feat[g, c]
        if w > best_w:
            best_w = w
            best[0] = g
        T = T * (1.0 - alpha)
    return T


@nb.njit(parallel=True, **_jit)
def composite_tiled(offsets, lists, mean2d, conic, opacity, feat, width, height, tile):
    K = feat.shape[1]
    out = np.zeros((height, width, K))
    trans = np.ones((height, width))
    argmax = np.full((height, width), -1, dtype=np.int64)
    tw = (width + tile - 1) // tile
    n_tiles = len(offsets) - 1
    for t in nb.prange(n_tiles):
        ids = lists[offsets[t]:offsets[t + 1]]
        tx = t % tw
        ty = t // tw
        best = np.empty(1, dtype=np.int64)
        acc = np.empty(K)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                acc[:] = 0.0
                T = _composite_pixel(u + 0.5, v + 0.5, ids, mean2d, conic, opacity, feat, acc, best)
                out[v, u, :] = acc
                trans[v, u] = T
                argmax[v, u] = best[0]
    return out, trans, argmax


@nb.njit(**_jit)
def composite_naive(order, mean2d, conic, opacity, feat, width, height):
    """Reference: every pixel walks the full sorted list."""
    K = feat.shape[1]
    out = np.zeros((height, width, K))
    trans = np.ones((height, width))
    argmax = np.full((height, width), -1, dtype=np.int64)
    best = np.empty(1, dtype=np.int64)
    acc = np.empty(K)
    for v in range(height):
        for u in range(width):
            acc[:] = 0.0
            T = _composite_pixel(u + 0.5, v + 0.5, order, mean2d, conic, opacity, feat, acc, best)
            out[v, u, :] = acc
            trans[v, u] = T
            argmax[v, u] = best[0]
    return out, trans, argmax


@nb.njit(**_jit)
def composite_backward(offsets, lists, mean2d, conic, opacity, feat, width, height, tile,
                       g_out, g_alpha):
    """Gradients of sum(g_out * out) + sum(g_alpha * (1 - T_final)).

    Returns per-Gaussian gradients for mean2d (n, 2), conic (n, 3),
    opacity (n,) and feat (n, K). Tiles and pixels are visited in a fixed
    order so the reduction is deterministic.
    """
    n, K = feat.shape
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_feat = np.zeros((n, K))
    tw = (width + tile - 1) // tile
    n_tiles = len(offsets) - 1
    max_len = 0
    for t in range(n_tiles):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    s_id = np.empty(max_len, dtype=np.int64)
    s_alpha = np.empty(max_len)
    s_T = np.empty(max_len)
    s_G = np.empty(max_len)
    s_dx = np.empty(max_len)
    s_dy = np.empty(max_len)
    C = np.empty(K)
    for t in range(n_tiles):
        ids = lists[offsets[t]:offsets[t + 1]]
        tx = t % tw
        ty = t // tw
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                py = v + 0.5
                # replay the forward pass, remembering contributors
                T = 1.0
                m = 0
                for k in range(len(ids)):
                    if T < T_CUTOFF:
                        break
                    g = ids[k]
                    G, dx, dy = _falloff(px, py, mean2d[g, 0], mean2d[g, 1],
                                         conic[g, 0], conic[g, 1], conic[g, 2])
                    if G < 0.0:
                        continue
                    alpha = opacity[g] * G
                    s_G[m] = G
                    s_id[m] = g
                    s_alpha[m] = alpha
                    s_T[m] = T
                    s_dx[m] = dx
                    s_dy[m] = dy
                    m += 1
                    T = T * (1.0 - alpha)
                if m == 0:
                    continue
                # C: composite of everything behind the current Gaussian,
                # normalized by the transmittance just behind it
                C[:] = 0.0
                CA = 0.0
                ga = g_alpha[v, u]
                for j in range(m - 1, -1, -1):
                    g = s_id[j]
                    a = s_alpha[j]
                    Tj = s_T[j]
                    w = a * Tj
                    d_alpha = ga * (1.0 - CA)
                    for c in range(K):
                        go = g_out[v, u, c]
                        d_alpha += go * (feat[g, c] - C[c])
                        g_feat[g, c] += go * w
                        C[c] = a * feat[g, c] + (1.0 - a) * C[c]
                    CA = a + (1.0 - a) * CA
                    d_alpha *= Tj
                    g_op[g] += d_alpha * s_G[j]
                    d_d2 = -0.5 * d_alpha * a
                    dx = s_dx[j]
                    dy = s_dy[j]
                    g_conic[g, 0] += d_d2 * dx * dx
                    g_conic[g, 1] += d_d2 * 2.0 * dx * dy
                    g_conic[g, 2] += d_d2 * dy * dy
                    g_mean[g, 0] -= d_d2 * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
                    g_mean[g, 1] -= d_d2 * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
    return g_mean, g_conic, g_op, g_feat
