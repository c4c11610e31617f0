"""Pure numpy tile rasterizer with the same interface as the compiled core.

Each tile is processed as a (pixels x splats) block; gradients are merged in
tile order so results are deterministic.
"""
from __future__ import annotations

import numpy as np

from ..kernels import ellipse_rect_min_m

T_MIN = 1e-4
ALPHA_MAX = 0.999
NGRAD = 10


def _kernel(kind, m, nu):
    if kind == 0:
        return np.exp(-0.5 * m)
    return np.exp(-0.5 * (nu + 2.0) * np.log1p(m / nu))


def bin_splats(centers, conics, m_cut, radii, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    lists = [[] for _ in range(tiles_x * tiles_y)]
    for l in range(centers.shape[0]):
        lim = m_cut[l] * (1.0 + 1e-9) + 1e-12
        tx0 = max(int(np.floor((centers[l, 0] - radii[l, 0] - 0.5) / tile)), 0)
        tx1 = min(int(np.floor((centers[l, 0] + radii[l, 0] + 0.5) / tile)), tiles_x - 1)
        ty0 = max(int(np.floor((centers[l, 1] - radii[l, 1] - 0.5) / tile)), 0)
        ty1 = min(int(np.floor((centers[l, 1] + radii[l, 1] + 0.5) / tile)), tiles_y - 1)
        conic = np.array([[conics[l, 0], conics[l, 1]], [conics[l, 1], conics[l, 2]]])
        for ty in range(ty0, ty1 + 1):
            y0, y1 = ty * tile + 0.5, min((ty + 1) * tile, height) - 0.5
            for tx in range(tx0, tx1 + 1):
                x0, x1 = tx * tile + 0.5, min((tx + 1) * tile, width) - 0.5
                if ellipse_rect_min_m(centers[l], conic, x0, x1, y0, y1) <= lim:
                    lists[ty * tiles_x + tx].append(l)
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(x) for x in lists])
    items = np.array([l for x in lists for l in x], dtype=np.int64)
    return offsets, items


def _tile_pixels(t, tiles_x, tile, width, height):
    ty, tx = divmod(t, tiles_x)
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _composite_block(idx, px, py, centers, conics, opac, nus, kind, cutoff):
    dx = (px + 0.5)[:, None] - centers[idx, 0][None, :]
    dy = (py + 0.5)[:, None] - centers[idx, 1][None, :]
    m = conics[idx, 0] * dx * dx + 2.0 * conics[idx, 1] * dx * dy + conics[idx, 2] * dy * dy
    resp = _kernel(kind, m, nus[idx])
    raw = opac[idx] * resp
    alpha = np.where(raw >= cutoff, np.minimum(raw, ALPHA_MAX), 0.0)
    t_after = np.cumprod(1.0 - alpha, axis=1)
    stop = t_after < T_MIN
    # entries after the first one that drives transmittance below T_MIN are dropped
    dropped = (np.cumsum(stop, axis=1) - stop) > 0
    alpha = np.where(dropped, 0.0, alpha)
    t_after = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1)), t_after[:, :-1]], axis=1)
    return dx, dy, m, resp, raw, alpha, t_before, t_after[:, -1]


def rasterize_forward(centers, conics, opac, colors, nus, kind, offsets, items,
                      width, height, tile, bg, cutoff, num_threads=1):
    tiles_x = (width + tile - 1) // tile
    ntiles = tiles_x * ((height + tile - 1) // tile)
    image = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    bg = np.asarray(bg)
    for t in range(ntiles):
        py, px = _tile_pixels(t, tiles_x, tile, width, height)
        idx = items[offsets[t]:offsets[t + 1]]
        if idx.size == 0:
            image[py, px] = bg
            continue
        _, _, _, _, _, alpha, t_before, t_final = _composite_block(
            idx, px, py, centers, conics, opac, nus, kind, cutoff)
        w = alpha * t_before
        image[py, px] = w @ colors[idx] + t_final[:, None] * bg
        final_t[py, px] = t_final
    return image, final_t


def rasterize_backward(centers, conics, opac, colors, nus, kind, offsets, items,
                       width, height, tile, bg, cutoff, upstream, num_threads=1):
    tiles_x = (width + tile - 1) // tile
    ntiles = tiles_x * ((height + tile - 1) // tile)
    out = np.zeros((centers.shape[0], NGRAD))
    bg = np.asarray(bg)
    for t in range(ntiles):
        idx = items[offsets[t]:offsets[t + 1]]
        if idx.size == 0:
            continue
        py, px = _tile_pixels(t, tiles_x, tile, width, height)
        up = upstream[py, px]
        dx, dy, m, resp, raw, alpha, t_before, t_final = _composite_block(
            idx, px, py, centers, conics, opac, nus, kind, cutoff)
        w = alpha * t_before
        gdot = up @ colors[idx].T                      # (P, k)
        contrib = gdot * w
        # S_i: upstream-weighted color of everything behind entry i, background included
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        behind += (t_final * (up @ bg))[:, None]
        active = alpha > 0
        one_minus = np.where(active, 1.0 - alpha, 1.0)
        dalpha = np.where(active, t_before * gdot - behind / one_minus, 0.0)
        grads = np.zeros((idx.size, NGRAD))
        grads[:, 0:3] = w.T @ up
        free = active & (raw <= ALPHA_MAX)
        g_raw = np.where(free, dalpha, 0.0)
        grads[:, 3] = np.sum(g_raw * resp, axis=0)
        g_resp = g_raw * opac[idx]
        if kind == 0:
            dk_dm = -0.5 * resp
        else:
            nu = nus[idx]
            rr = m / nu
            dk_dm = -0.5 * (nu + 2.0) / nu * resp / (1.0 + rr)
            dk_dnu = resp * (-0.5 * np.log1p(rr) + 0.5 * (nu + 2.0) * (rr / nu) / (1.0 + rr))
            grads[:, 9] = np.sum(g_resp * dk_dnu, axis=0)
        g_m = g_resp * dk_dm
        grads[:, 4] = np.sum(g_m * dx, axis=0)
        grads[:, 5] = np.sum(g_m * dy, axis=0)
        grads[:, 6] = np.sum(g_m * dx * dx, axis=0)
        grads[:, 7] = np.sum(g_m * dx * dy, axis=0)
        grads[:, 8] = np.sum(g_m * dy * dy, axis=0)
        np.add.at(out, idx, grads)
    return out
