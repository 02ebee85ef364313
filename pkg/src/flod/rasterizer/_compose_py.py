"""Pure-Python compositing kernels (fallback backend).

These loops are the reference semantics for the compiled backend in
``_compose.pyx``: same expressions in the same order, libm exp on both
sides, so the two backends produce bit-identical images and gradients.
Keep edits synchronized between the two files.
"""

from __future__ import annotations

from math import exp


def backend_name() -> str:
    return "python"


def _bin_tiles(x0, y0, x1, y1, tile, tiles_x, tiles_y):
    bins = [[] for _ in range(tiles_x * tiles_y)]
    for m in range(len(x0)):
        ty0 = y0[m] // tile
        ty1 = y1[m] // tile
        tx0 = x0[m] // tile
        tx1 = x1[m] // tile
        for ty in range(ty0, ty1 + 1):
            row = ty * tiles_x
            for tx in range(tx0, tx1 + 1):
                bins[row + tx].append(m)
    return bins


def forward_composite(mu_x, mu_y, con_a, con_b, con_c, opac, col_r, col_g, col_b,
                      x0, y0, x1, y1, width, height, tile,
                      bg_r, bg_g, bg_b, alpha_clamp, alpha_skip, transm_stop,
                      out_rgb, out_acc, out_cnt):
    """Front-to-back alpha compositing over 16x16-style tiles.

    Inputs are 1-D arrays already restricted to valid Gaussians and already
    in canonical order (depth, then source index); rectangles are inclusive
    pixel bounds.
    """
    mu_x = mu_x.tolist()
    mu_y = mu_y.tolist()
    con_a = con_a.tolist()
    con_b = con_b.tolist()
    con_c = con_c.tolist()
    opac = opac.tolist()
    col_r = col_r.tolist()
    col_g = col_g.tolist()
    col_b = col_b.tolist()
    x0 = x0.tolist()
    y0 = y0.tolist()
    x1 = x1.tolist()
    y1 = y1.tolist()

    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    bins = _bin_tiles(x0, y0, x1, y1, tile, tiles_x, tiles_y)

    rgb = out_rgb
    for ty in range(tiles_y):
        yy_end = min((ty + 1) * tile, height)
        for tx in range(tiles_x):
            members = bins[ty * tiles_x + tx]
            xx_end = min((tx + 1) * tile, width)
            for yy in range(ty * tile, yy_end):
                for xx in range(tx * tile, xx_end):
                    t_cur = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    n = 0
                    for m in members:
                        if xx < x0[m] or xx > x1[m] or yy < y0[m] or yy > y1[m]:
                            continue
                        dx = xx - mu_x[m]
                        dy = yy - mu_y[m]
                        power = -0.5 * (con_a[m] * dx * dx + con_c[m] * dy * dy) - con_b[m] * dx * dy
                        if power > 0.0:
                            continue
                        alpha = opac[m] * exp(power)
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < alpha_skip:
                            continue
                        test_t = t_cur * (1.0 - alpha)
                        if test_t < transm_stop:
                            break
                        r += t_cur * alpha * col_r[m]
                        g += t_cur * alpha * col_g[m]
                        b += t_cur * alpha * col_b[m]
                        t_cur = test_t
                        n += 1
                    rgb[yy, xx, 0] = r + t_cur * bg_r
                    rgb[yy, xx, 1] = g + t_cur * bg_g
                    rgb[yy, xx, 2] = b + t_cur * bg_b
                    out_acc[yy, xx] = 1.0 - t_cur
                    out_cnt[yy, xx] = n


def backward_composite(mu_x, mu_y, con_a, con_b, con_c, opac, col_r, col_g, col_b,
                       x0, y0, x1, y1, width, height, tile,
                       bg_r, bg_g, bg_b, alpha_clamp, alpha_skip, transm_stop,
                       upstream,
                       d_mu_x, d_mu_y, d_con_a, d_con_b, d_con_c,
                       d_opac, d_col_r, d_col_g, d_col_b):
    """Gradients of <upstream, composited image> w.r.t. screen-space inputs.

    Transmittance is recomputed front-to-back per pixel (two traversals: one
    for the pixel's total color, one for the gradients); contributions the
    forward pass skipped or clamped carry zero gradient.
    """
    mu_x = mu_x.tolist()
    mu_y = mu_y.tolist()
    con_a = con_a.tolist()
    con_b = con_b.tolist()
    con_c = con_c.tolist()
    opac = opac.tolist()
    col_r = col_r.tolist()
    col_g = col_g.tolist()
    col_b = col_b.tolist()
    x0 = x0.tolist()
    y0 = y0.tolist()
    x1 = x1.tolist()
    y1 = y1.tolist()

    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    bins = _bin_tiles(x0, y0, x1, y1, tile, tiles_x, tiles_y)

    for ty in range(tiles_y):
        yy_end = min((ty + 1) * tile, height)
        for tx in range(tiles_x):
            members = bins[ty * tiles_x + tx]
            if not members:
                continue
            xx_end = min((tx + 1) * tile, width)
            for yy in range(ty * tile, yy_end):
                for xx in range(tx * tile, xx_end):
                    ur = upstream[yy, xx, 0]
                    ug = upstream[yy, xx, 1]
                    ub = upstream[yy, xx, 2]
                    # pass 1: replay the forward compositing for this pixel
                    t_cur = 1.0
                    tot_r = 0.0
                    tot_g = 0.0
                    tot_b = 0.0
                    for m in members:
                        if xx < x0[m] or xx > x1[m] or yy < y0[m] or yy > y1[m]:
                            continue
                        dx = xx - mu_x[m]
                        dy = yy - mu_y[m]
                        power = -0.5 * (con_a[m] * dx * dx + con_c[m] * dy * dy) - con_b[m] * dx * dy
                        if power > 0.0:
                            continue
                        alpha = opac[m] * exp(power)
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < alpha_skip:
                            continue
                        test_t = t_cur * (1.0 - alpha)
                        if test_t < transm_stop:
                            break
                        tot_r += t_cur * alpha * col_r[m]
                        tot_g += t_cur * alpha * col_g[m]
                        tot_b += t_cur * alpha * col_b[m]
                        t_cur = test_t
                    tot_r += t_cur * bg_r
                    tot_g += t_cur * bg_g
                    tot_b += t_cur * bg_b

                    # pass 2: same traversal, accumulating gradients
                    t_cur = 1.0
                    pre_r = 0.0
                    pre_g = 0.0
                    pre_b = 0.0
                    for m in members:
                        if xx < x0[m] or xx > x1[m] or yy < y0[m] or yy > y1[m]:
                            continue
                        dx = xx - mu_x[m]
                        dy = yy - mu_y[m]
                        power = -0.5 * (con_a[m] * dx * dx + con_c[m] * dy * dy) - con_b[m] * dx * dy
                        if power > 0.0:
                            continue
                        gval = exp(power)
                        raw_alpha = opac[m] * gval
                        alpha = raw_alpha
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < alpha_skip:
                            continue
                        test_t = t_cur * (1.0 - alpha)
                        if test_t < transm_stop:
                            break
                        w = t_cur * alpha
                        pre_r += w * col_r[m]
                        pre_g += w * col_g[m]
                        pre_b += w * col_b[m]
                        d_col_r[m] += ur * w
                        d_col_g[m] += ug * w
                        d_col_b[m] += ub * w
                        if raw_alpha <= alpha_clamp:
                            one_minus = 1.0 - alpha
                            dalpha = (ur * (t_cur * col_r[m] - (tot_r - pre_r) / one_minus)
                                      + ug * (t_cur * col_g[m] - (tot_g - pre_g) / one_minus)
                                      + ub * (t_cur * col_b[m] - (tot_b - pre_b) / one_minus))
                            d_opac[m] += dalpha * gval
                            dpower = dalpha * raw_alpha
                            d_con_a[m] += dpower * (-0.5 * dx * dx)
                            d_con_b[m] += dpower * (-dx * dy)
                            d_con_c[m] += dpower * (-0.5 * dy * dy)
                            ddx = dpower * (-con_a[m] * dx - con_b[m] * dy)
                            ddy = dpower * (-con_c[m] * dy - con_b[m] * dx)
                            d_mu_x[m] -= ddx
                            d_mu_y[m] -= ddy
                        t_cur = test_t
