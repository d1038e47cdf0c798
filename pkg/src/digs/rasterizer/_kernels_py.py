"""Pure-Python compositing kernels: the import-time fallback and the
brute-force per-pixel reference oracle.

The tile kernel here and the Cython twin in _kernels_cy.pyx must stay
transliterations of each other: same expressions, same association order,
same libm exp, so results agree bit for bit.  Pixel (r, c) samples at
(c + 0.5, r + 0.5).  Contributions outside the 3-sigma ellipse are exactly
zero; compositing stops once transmittance falls below 1e-4.
"""

import math

import numpy as np

CUTOFF_D2 = 9.0  # 3-sigma
T_MIN = 1e-4


def _tile_lists(means, radii, order, height, width, tile):
    """Front-to-back id lists per tile from conservative AABB overlap."""
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    lists = [[] for _ in range(n_tx * n_ty)]
    for gid in order:
        mx, my = means[gid, 0], means[gid, 1]
        rx, ry = radii[gid, 0], radii[gid, 1]
        tx0 = max(int((mx - rx) // tile), 0)
        tx1 = min(int((mx + rx) // tile), n_tx - 1)
        ty0 = max(int((my - ry) // tile), 0)
        ty1 = min(int((my + ry) // tile), n_ty - 1)
        if tx1 < 0 or ty1 < 0 or tx0 >= n_tx or ty0 >= n_ty:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                lists[ty * n_tx + tx].append(gid)
    return lists, n_tx, n_ty


def composite_forward(means, conics, colors, alphas, depths, normals, radii,
                      order, height, width, background, tile=16):
    """Tiled front-to-back compositing.

    Returns (color, depth_sum, normal_sum, alpha) raw accumulators; the
    caller turns sums into expectation images.
    """
    color = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    normal_sum = np.zeros((height, width, 3))
    alpha_acc = np.zeros((height, width))
    lists, n_tx, n_ty = _tile_lists(means, radii, order, height, width, tile)

    for ty in range(n_ty):
        for tx in range(n_tx):
            ids = lists[ty * n_tx + tx]
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
                    for gid in ids:
                        if t_cur < T_MIN:
                            break
                        dx = sx - means[gid, 0]
                        dy = sy - means[gid, 1]
                        a = conics[gid, 0]
                        b = conics[gid, 1]
                        c = conics[gid, 2]
                        d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        if d2 > CUTOFF_D2:
                            continue
                        aeff = alphas[gid] * math.exp(-0.5 * d2)
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
    return color, depth_sum, normal_sum, alpha_acc


def composite_backward(means, conics, colors, alphas, depths, radii, order,
                       height, width, background, d_color, tile=16):
    """Adjoints of the color image w.r.t. means, conics, colors, alphas.

    Replays the forward per pixel, then walks contributions back to front
    maintaining the suffix sum needed for the transmittance chain.  When a
    contribution saturates (alpha_eff == 1) every later transmittance is
    zero, so the suffix term vanishes instead of dividing by zero.
    """
    d_means = np.zeros_like(means)
    d_conics = np.zeros_like(conics)
    d_colors = np.zeros_like(colors)
    d_alphas = np.zeros_like(alphas)
    lists, n_tx, n_ty = _tile_lists(means, radii, order, height, width, tile)

    for ty in range(n_ty):
        for tx in range(n_tx):
            ids = lists[ty * n_tx + tx]
            if not ids:
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
                    # forward replay, recording per-contribution state
                    hits = []
                    t_cur = 1.0
                    for gid in ids:
                        if t_cur < T_MIN:
                            break
                        dx = sx - means[gid, 0]
                        dy = sy - means[gid, 1]
                        a = conics[gid, 0]
                        b = conics[gid, 1]
                        c = conics[gid, 2]
                        d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                        if d2 > CUTOFF_D2:
                            continue
                        g = math.exp(-0.5 * d2)
                        aeff = alphas[gid] * g
                        hits.append((gid, dx, dy, g, aeff, t_cur))
                        t_cur = t_cur * (1.0 - aeff)
                    # reverse walk: suffix = sum_{m>j} (dL/dC . c_m) w_m
                    #             + (dL/dC . bg) * T_final
                    suffix = t_cur * (
                        gr * background[0] + gg * background[1] + gb * background[2]
                    )
                    for gid, dx, dy, g, aeff, t_before in reversed(hits):
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
    return d_means, d_conics, d_colors, d_alphas


def reference_composite(means, conics, colors, alphas, depths, normals, radii,
                        order, height, width, background):
    """Brute-force oracle: every pixel scans and sorts all Gaussians itself.

    `order` is ignored beyond defining the candidate set; sorting is redone
    per pixel by (depth, id).  Must match composite_forward bit for bit.
    """
    candidates = sorted(order, key=lambda i: (depths[i], i))
    color = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    normal_sum = np.zeros((height, width, 3))
    alpha_acc = np.zeros((height, width))
    for py in range(height):
        sy = py + 0.5
        for px in range(width):
            sx = px + 0.5
            t_cur = 1.0
            cr = cg = cb = 0.0
            dsum = nx = ny = nz = asum = 0.0
            for gid in candidates:
                if t_cur < T_MIN:
                    break
                dx = sx - means[gid, 0]
                dy = sy - means[gid, 1]
                a = conics[gid, 0]
                b = conics[gid, 1]
                c = conics[gid, 2]
                d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if d2 > CUTOFF_D2:
                    continue
                aeff = alphas[gid] * math.exp(-0.5 * d2)
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
    return color, depth_sum, normal_sum, alpha_acc
