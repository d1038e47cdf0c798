# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled compositing kernels.

Line-for-line transliteration of _kernels_py.composite_forward/backward;
both call libm exp on IEEE doubles in the same order, so outputs are
bit-identical to the fallback.  Tile membership arrives as CSR arrays
(starts, ids) built by the shared Python helper.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF CUTOFF_D2 = 9.0
DEF T_MIN = 1e-4


def composite_forward_csr(double[:, ::1] means, double[:, ::1] conics,
                          double[:, ::1] colors, double[::1] alphas,
                          double[::1] depths, double[:, ::1] normals,
                          long[::1] starts, long[::1] ids,
                          int height, int width, double[::1] background,
                          int tile, int n_tx, int n_ty):
    color_np = np.zeros((height, width, 3))
    depth_np = np.zeros((height, width))
    normal_np = np.zeros((height, width, 3))
    alpha_np = np.zeros((height, width))
    cdef double[:, :, ::1] color = color_np
    cdef double[:, ::1] depth_sum = depth_np
    cdef double[:, :, ::1] normal_sum = normal_np
    cdef double[:, ::1] alpha_acc = alpha_np

    cdef int ty, tx, py, px, y_end, x_end
    cdef long k, k0, k1, gid
    cdef double sx, sy, t_cur, cr, cg, cb, dsum, nx, ny, nz, asum
    cdef double dx, dy, a, b, c, d2, aeff, w

    for ty in range(n_ty):
        for tx in range(n_tx):
            k0 = starts[ty * n_tx + tx]
            k1 = starts[ty * n_tx + tx + 1]
            y_end = min((ty + 1) * tile, height)
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                sy = py + 0.5
                for px in range(tx * tile, x_end):
                    sx = px + 0.5
                    t_cur = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    dsum = 0.0
                    nx = 0.0
                    ny = 0.0
                    nz = 0.0
                    asum = 0.0
                    for k in range(k0, k1):
                        if t_cur < T_MIN:
                            break
                        gid = ids[k]
                        dx = sx - means[gid, 0]
                        dy = sy - means[gid, 1]
                        a = conics[gid, 0]
                        b = conics[gid, 1]
                        c = conics[gid, 2]
                        d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        if d2 > CUTOFF_D2:
                            continue
                        aeff = alphas[gid] * exp(-0.5 * d2)
                        w = t_cur * aeff
                        cr += w * colors[gid, 0]
                        cg += w * colors[gid, 1]
                        cb += w * colors[gid, 2]
                        dsum += w * depths[gid]
                        nx += w * normals[gid, 0]
                        ny += w * normals[gid, 1]
                        nz += w * normals[gid, 2]
                        asum += w
                        t_cur = t_cur * (1.0 - aeff)
                    color[py, px, 0] = cr + t_cur * background[0]
                    color[py, px, 1] = cg + t_cur * background[1]
                    color[py, px, 2] = cb + t_cur * background[2]
                    depth_sum[py, px] = dsum
                    normal_sum[py, px, 0] = nx
                    normal_sum[py, px, 1] = ny
                    normal_sum[py, px, 2] = nz
                    alpha_acc[py, px] = asum
    return color_np, depth_np, normal_np, alpha_np


def composite_backward_csr(double[:, ::1] means, double[:, ::1] conics,
                           double[:, ::1] colors, double[::1] alphas,
                           double[::1] depths,
                           long[::1] starts, long[::1] ids,
                           int height, int width, double[::1] background,
                           int tile, int n_tx, int n_ty,
                           double[:, :, ::1] d_color):
    d_means_np = np.zeros((means.shape[0], 2))
    d_conics_np = np.zeros((conics.shape[0], 3))
    d_colors_np = np.zeros((colors.shape[0], 3))
    d_alphas_np = np.zeros(alphas.shape[0])
    cdef double[:, ::1] d_means = d_means_np
    cdef double[:, ::1] d_conics = d_conics_np
    cdef double[:, ::1] d_colors = d_colors_np
    cdef double[::1] d_alphas = d_alphas_np

    cdef long max_len = 0, span
    cdef int t
    for t in range(n_tx * n_ty):
        span = starts[t + 1] - starts[t]
        if span > max_len:
            max_len = span
    if max_len == 0:
        return d_means_np, d_conics_np, d_colors_np, d_alphas_np

    hit_gid_np = np.empty(max_len, dtype=np.int64)
    hit_f_np = np.empty((max_len, 5))
    cdef long[::1] hit_gid = hit_gid_np
    cdef double[:, ::1] hit_f = hit_f_np

    cdef int ty, tx, py, px, y_end, x_end
    cdef long k, k0, k1, gid, n_hits, j
    cdef double sx, sy, gr, gg, gb, t_cur, dx, dy, a, b, c, d2, g, aeff
    cdef double suffix, dot_c, w, om, d_aeff, d_g, d_d2, ddx, ddy, t_before

    for ty in range(n_ty):
        for tx in range(n_tx):
            k0 = starts[ty * n_tx + tx]
            k1 = starts[ty * n_tx + tx + 1]
            if k0 == k1:
                continue
            y_end = min((ty + 1) * tile, height)
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                sy = py + 0.5
                for px in range(tx * tile, x_end):
                    sx = px + 0.5
                    gr = d_color[py, px, 0]
                    gg = d_color[py, px, 1]
                    gb = d_color[py, px, 2]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0:
                        continue
                    n_hits = 0
                    t_cur = 1.0
                    for k in range(k0, k1):
                        if t_cur < T_MIN:
                            break
                        gid = ids[k]
                        dx = sx - means[gid, 0]
                        dy = sy - means[gid, 1]
                        a = conics[gid, 0]
                        b = conics[gid, 1]
                        c = conics[gid, 2]
                        d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        if d2 > CUTOFF_D2:
                            continue
                        g = exp(-0.5 * d2)
                        aeff = alphas[gid] * g
                        hit_gid[n_hits] = gid
                        hit_f[n_hits, 0] = dx
                        hit_f[n_hits, 1] = dy
                        hit_f[n_hits, 2] = g
                        hit_f[n_hits, 3] = aeff
                        hit_f[n_hits, 4] = t_cur
                        n_hits += 1
                        t_cur = t_cur * (1.0 - aeff)
                    suffix = t_cur * (
                        gr * background[0] + gg * background[1] + gb * background[2]
                    )
                    for j in range(n_hits - 1, -1, -1):
                        gid = hit_gid[j]
                        dx = hit_f[j, 0]
                        dy = hit_f[j, 1]
                        g = hit_f[j, 2]
                        aeff = hit_f[j, 3]
                        t_before = hit_f[j, 4]
                        dot_c = (
                            gr * colors[gid, 0]
                            + gg * colors[gid, 1]
                            + gb * colors[gid, 2]
                        )
                        w = t_before * aeff
                        d_colors[gid, 0] += gr * w
                        d_colors[gid, 1] += gg * w
                        d_colors[gid, 2] += gb * w
                        om = 1.0 - aeff
                        if om > 0.0:
                            d_aeff = t_before * dot_c - suffix / om
                        else:
                            d_aeff = t_before * dot_c
                        d_alphas[gid] += g * d_aeff
                        d_g = alphas[gid] * d_aeff
                        d_d2 = -0.5 * g * d_g
                        a = conics[gid, 0]
                        b = conics[gid, 1]
                        c = conics[gid, 2]
                        d_conics[gid, 0] += d_d2 * dx * dx
                        d_conics[gid, 1] += d_d2 * 2.0 * dx * dy
                        d_conics[gid, 2] += d_d2 * dy * dy
                        ddx = d_d2 * (2.0 * a * dx + 2.0 * b * dy)
                        ddy = d_d2 * (2.0 * b * dx + 2.0 * c * dy)
                        d_means[gid, 0] += -ddx
                        d_means[gid, 1] += -ddy
                        suffix += dot_c * w
    return d_means_np, d_conics_np, d_colors_np, d_alphas_np
