# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: binning, forward compositing and backward pass.

Splats arrive already sorted front to back.  Each tile writes gradients into
its own slice of a scratch buffer; slices are merged in tile order, so the
result does not depend on the number of threads.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, log1p, sqrt, floor, ceil, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF NGRAD = 10
DEF T_MIN = 1e-4
DEF ALPHA_MAX = 0.999


cdef inline double _kernel(int kind, double m, double nu) noexcept nogil:
    if kind == 0:
        return exp(-0.5 * m)
    return exp(-0.5 * (nu + 2.0) * log1p(m / nu))


cdef inline double _rect_min_m(double cx, double cy, double a, double b, double c,
                               double x0, double x1, double y0, double y1) noexcept nogil:
    cdef double best = INFINITY, dx, dy, val, xe, ye
    cdef int k
    if cx >= x0 and cx <= x1 and cy >= y0 and cy <= y1:
        return 0.0
    for k in range(2):
        xe = x0 if k == 0 else x1
        dx = xe - cx
        dy = -b * dx / c
        if dy < y0 - cy:
            dy = y0 - cy
        elif dy > y1 - cy:
            dy = y1 - cy
        val = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if val < best:
            best = val
    for k in range(2):
        ye = y0 if k == 0 else y1
        dy = ye - cy
        dx = -b * dy / a
        if dx < x0 - cx:
            dx = x0 - cx
        elif dx > x1 - cx:
            dx = x1 - cx
        val = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if val < best:
            best = val
    return best


def bin_splats(double[:, ::1] centers, double[:, ::1] conics, double[::1] m_cut,
               double[:, ::1] radii, int width, int height, int tile):
    """CSR lists of splat indices per tile, preserving input (depth) order."""
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ntiles = tiles_x * tiles_y
    cdef Py_ssize_t L = centers.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(ntiles + 1, dtype=np.int64)
    cdef Py_ssize_t l
    cdef int tx, ty, tx0, tx1, ty0, ty1, pass_no
    cdef double lim, x0, x1, y0, y1
    cdef cnp.int64_t[::1] cnt = counts
    cdef cnp.ndarray[cnp.int64_t, ndim=1] offsets
    cdef cnp.ndarray[cnp.int64_t, ndim=1] items = np.zeros(0, dtype=np.int64)
    cdef cnp.int64_t[::1] fill
    cdef cnp.int64_t[::1] it
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cursor = np.zeros(ntiles, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = cursor
    for pass_no in range(2):
        if pass_no == 1:
            offsets = np.zeros(ntiles + 1, dtype=np.int64)
            offsets[1:] = np.cumsum(counts[:ntiles])
            items = np.zeros(offsets[ntiles], dtype=np.int64)
            it = items
            fill = offsets
        for l in range(L):
            lim = m_cut[l] * (1.0 + 1e-9) + 1e-12
            tx0 = <int>floor((centers[l, 0] - radii[l, 0] - 0.5) / tile)
            tx1 = <int>floor((centers[l, 0] + radii[l, 0] + 0.5) / tile)
            ty0 = <int>floor((centers[l, 1] - radii[l, 1] - 0.5) / tile)
            ty1 = <int>floor((centers[l, 1] + radii[l, 1] + 0.5) / tile)
            if tx0 < 0:
                tx0 = 0
            if ty0 < 0:
                ty0 = 0
            if tx1 > tiles_x - 1:
                tx1 = tiles_x - 1
            if ty1 > tiles_y - 1:
                ty1 = tiles_y - 1
            for ty in range(ty0, ty1 + 1):
                y0 = ty * tile + 0.5
                y1 = min((ty + 1) * tile, height) - 0.5
                for tx in range(tx0, tx1 + 1):
                    x0 = tx * tile + 0.5
                    x1 = min((tx + 1) * tile, width) - 0.5
                    if _rect_min_m(centers[l, 0], centers[l, 1], conics[l, 0], conics[l, 1],
                                   conics[l, 2], x0, x1, y0, y1) <= lim:
                        if pass_no == 0:
                            cnt[ty * tiles_x + tx] += 1
                        else:
                            it[fill[ty * tiles_x + tx] + cur[ty * tiles_x + tx]] = l
                            cur[ty * tiles_x + tx] += 1
    return offsets, items


cdef void _forward_tile(int t, int tiles_x, int tile, int width, int height, int kind,
                        const double[:, ::1] centers, const double[:, ::1] conics,
                        const double[::1] opac, const double[:, ::1] colors,
                        const double[::1] nus, const cnp.int64_t[::1] offsets,
                        const cnp.int64_t[::1] items, const double[::1] bg, double cutoff,
                        double[:, :, ::1] image, double[:, ::1] final_t) noexcept nogil:
    cdef int ty = t // tiles_x
    cdef int tx = t - ty * tiles_x
    cdef int px, py, x_end, y_end
    cdef cnp.int64_t k, l
    cdef double T, alpha, dx, dy, m, r, g, b
    x_end = min((tx + 1) * tile, width)
    y_end = min((ty + 1) * tile, height)
    for py in range(ty * tile, y_end):
        for px in range(tx * tile, x_end):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for k in range(offsets[t], offsets[t + 1]):
                l = items[k]
                dx = px + 0.5 - centers[l, 0]
                dy = py + 0.5 - centers[l, 1]
                m = conics[l, 0] * dx * dx + 2.0 * conics[l, 1] * dx * dy + conics[l, 2] * dy * dy
                alpha = opac[l] * _kernel(kind, m, nus[l])
                if alpha < cutoff:
                    continue
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                r = r + colors[l, 0] * alpha * T
                g = g + colors[l, 1] * alpha * T
                b = b + colors[l, 2] * alpha * T
                T = T * (1.0 - alpha)
                if T < T_MIN:
                    break
            image[py, px, 0] = r + T * bg[0]
            image[py, px, 1] = g + T * bg[1]
            image[py, px, 2] = b + T * bg[2]
            final_t[py, px] = T


def rasterize_forward(double[:, ::1] centers, double[:, ::1] conics, double[::1] opac,
                      double[:, ::1] colors, double[::1] nus, int kind,
                      cnp.int64_t[::1] offsets, cnp.int64_t[::1] items,
                      int width, int height, int tile, double[::1] bg, double cutoff,
                      int num_threads=1):
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ntiles = tiles_x * tiles_y
    cdef int t
    image_np = np.zeros((height, width, 3))
    final_np = np.ones((height, width))
    cdef double[:, :, ::1] image = image_np
    cdef double[:, ::1] final_t = final_np
    if num_threads <= 1:
        for t in range(ntiles):
            _forward_tile(t, tiles_x, tile, width, height, kind, centers, conics, opac, colors,
                          nus, offsets, items, bg, cutoff, image, final_t)
    else:
        for t in prange(ntiles, nogil=True, num_threads=num_threads, schedule="dynamic"):
            _forward_tile(t, tiles_x, tile, width, height, kind, centers, conics, opac, colors,
                          nus, offsets, items, bg, cutoff, image, final_t)
    return image_np, final_np


cdef int _backward_tile(int t, int tiles_x, int tile, int width, int height, int kind,
                        const double[:, ::1] centers, const double[:, ::1] conics,
                        const double[::1] opac, const double[:, ::1] colors,
                        const double[::1] nus, const cnp.int64_t[::1] offsets,
                        const cnp.int64_t[::1] items, const double[::1] bg, double cutoff,
                        const double[:, :, ::1] upstream, double[:, ::1] buf) noexcept nogil:
    cdef int ty = t // tiles_x
    cdef int tx = t - ty * tiles_x
    cdef cnp.int64_t start = offsets[t]
    cdef cnp.int64_t n = offsets[t + 1] - start
    cdef int px, py, x_end, y_end, cnt, q
    cdef cnp.int64_t k, l, slot
    cdef double T, alpha, raw, resp, dx, dy, m, nu, gr, gg, gb, gdot, S, dalpha
    cdef double g_resp, g_m, dk_dm, dk_dnu, rr, lg
    if n == 0:
        return 0
    cdef cnp.int64_t *cslot = <cnp.int64_t *> malloc(n * sizeof(cnp.int64_t))
    cdef double *calpha = <double *> malloc(n * sizeof(double))
    cdef double *craw = <double *> malloc(n * sizeof(double))
    cdef double *cresp = <double *> malloc(n * sizeof(double))
    cdef double *cT = <double *> malloc(n * sizeof(double))
    if cslot == NULL or calpha == NULL or craw == NULL or cresp == NULL or cT == NULL:
        free(cslot); free(calpha); free(craw); free(cresp); free(cT)
        return -1
    x_end = min((tx + 1) * tile, width)
    y_end = min((ty + 1) * tile, height)
    for py in range(ty * tile, y_end):
        for px in range(tx * tile, x_end):
            gr = upstream[py, px, 0]
            gg = upstream[py, px, 1]
            gb = upstream[py, px, 2]
            if gr == 0.0 and gg == 0.0 and gb == 0.0:
                continue
            # replay the forward pass, remembering contributors
            T = 1.0
            cnt = 0
            for k in range(n):
                l = items[start + k]
                dx = px + 0.5 - centers[l, 0]
                dy = py + 0.5 - centers[l, 1]
                m = conics[l, 0] * dx * dx + 2.0 * conics[l, 1] * dx * dy + conics[l, 2] * dy * dy
                resp = _kernel(kind, m, nus[l])
                raw = opac[l] * resp
                if raw < cutoff:
                    continue
                alpha = raw if raw <= ALPHA_MAX else ALPHA_MAX
                cslot[cnt] = k
                calpha[cnt] = alpha
                craw[cnt] = raw
                cresp[cnt] = resp
                cT[cnt] = T
                cnt = cnt + 1
                T = T * (1.0 - alpha)
                if T < T_MIN:
                    break
            S = T * (gr * bg[0] + gg * bg[1] + gb * bg[2])
            for q in range(cnt - 1, -1, -1):
                k = cslot[q]
                l = items[start + k]
                slot = start + k
                alpha = calpha[q]
                T = cT[q]
                gdot = gr * colors[l, 0] + gg * colors[l, 1] + gb * colors[l, 2]
                buf[slot, 0] += gr * alpha * T
                buf[slot, 1] += gg * alpha * T
                buf[slot, 2] += gb * alpha * T
                dalpha = T * gdot - S / (1.0 - alpha)
                S = S + gdot * alpha * T
                if craw[q] > ALPHA_MAX:
                    continue
                resp = cresp[q]
                buf[slot, 3] += dalpha * resp
                g_resp = dalpha * opac[l]
                dx = px + 0.5 - centers[l, 0]
                dy = py + 0.5 - centers[l, 1]
                nu = nus[l]
                if kind == 0:
                    dk_dm = -0.5 * resp
                else:
                    m = conics[l, 0] * dx * dx + 2.0 * conics[l, 1] * dx * dy + conics[l, 2] * dy * dy
                    rr = m / nu
                    lg = log1p(rr)
                    dk_dm = -0.5 * (nu + 2.0) / nu * resp / (1.0 + rr)
                    dk_dnu = resp * (-0.5 * lg + 0.5 * (nu + 2.0) * (rr / nu) / (1.0 + rr))
                    buf[slot, 9] += g_resp * dk_dnu
                g_m = g_resp * dk_dm
                buf[slot, 4] += g_m * dx
                buf[slot, 5] += g_m * dy
                buf[slot, 6] += g_m * dx * dx
                buf[slot, 7] += g_m * dx * dy
                buf[slot, 8] += g_m * dy * dy
    free(cslot); free(calpha); free(craw); free(cresp); free(cT)
    return 0


def rasterize_backward(double[:, ::1] centers, double[:, ::1] conics, double[::1] opac,
                       double[:, ::1] colors, double[::1] nus, int kind,
                       cnp.int64_t[::1] offsets, cnp.int64_t[::1] items,
                       int width, int height, int tile, double[::1] bg, double cutoff,
                       double[:, :, ::1] upstream, int num_threads=1):
    """Per-splat partials of sum(upstream * image).

    Columns of the returned (L, 10) array: d color (3), d opacity, sum g_m*dx,
    sum g_m*dy, sum g_m*dx^2, sum g_m*dx*dy, sum g_m*dy^2, d nu; g_m is dL/dm.
    """
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ntiles = tiles_x * tiles_y
    cdef Py_ssize_t L = centers.shape[0]
    cdef int t
    cdef cnp.int64_t k
    cdef int c
    buf_np = np.zeros((items.shape[0], NGRAD))
    cdef double[:, ::1] buf = buf_np
    status_np = np.zeros(ntiles, dtype=np.intc)
    cdef int[::1] status = status_np
    if num_threads <= 1:
        for t in range(ntiles):
            status[t] = _backward_tile(t, tiles_x, tile, width, height, kind, centers, conics,
                                       opac, colors, nus, offsets, items, bg, cutoff, upstream, buf)
    else:
        for t in prange(ntiles, nogil=True, num_threads=num_threads, schedule="dynamic"):
            status[t] = _backward_tile(t, tiles_x, tile, width, height, kind, centers, conics,
                                       opac, colors, nus, offsets, items, bg, cutoff, upstream, buf)
    if status_np.any():
        raise MemoryError("rasterize_backward: scratch allocation failed")
    out_np = np.zeros((L, NGRAD))
    cdef double[:, ::1] out = out_np
    for k in range(items.shape[0]):
        for c in range(NGRAD):
            out[items[k], c] += buf[k, c]
    return out_np
