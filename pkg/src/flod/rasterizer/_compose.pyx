# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled compositing kernels.

Mirrors _compose_py.py expression-for-expression; compiled with
-ffp-contract=off so results stay bit-identical to the Python fallback and
the naive oracle. Keep edits synchronized between the two files.
"""

from libc.math cimport exp
from libc.stdlib cimport free, malloc

import numpy as np


def backend_name():
    return "cython"


cdef struct TileBins:
    int tiles_x
    int tiles_y
    long *offsets   # tiles_x*tiles_y + 1
    long *items


cdef int _build_bins(const long[::1] x0, const long[::1] y0,
                     const long[::1] x1, const long[::1] y1,
                     int width, int height, int tile, TileBins *bins) except -1:
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef Py_ssize_t m, n = x0.shape[0]
    cdef long ty, tx, ty0, ty1, tx0, tx1
    cdef long ntiles = tiles_x * tiles_y
    cdef long *counts = <long *> malloc((ntiles + 1) * sizeof(long))
    cdef long total = 0
    cdef long i
    if counts == NULL:
        raise MemoryError()
    for i in range(ntiles + 1):
        counts[i] = 0
    for m in range(n):
        ty0 = y0[m] // tile
        ty1 = y1[m] // tile
        tx0 = x0[m] // tile
        tx1 = x1[m] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx] += 1
    for i in range(ntiles):
        total += counts[i]
    bins.offsets = <long *> malloc((ntiles + 1) * sizeof(long))
    bins.items = <long *> malloc((total if total > 0 else 1) * sizeof(long))
    if bins.offsets == NULL or bins.items == NULL:
        free(counts)
        raise MemoryError()
    bins.offsets[0] = 0
    for i in range(ntiles):
        bins.offsets[i + 1] = bins.offsets[i] + counts[i]
        counts[i] = bins.offsets[i]
    for m in range(n):
        ty0 = y0[m] // tile
        ty1 = y1[m] // tile
        tx0 = x0[m] // tile
        tx1 = x1[m] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                i = ty * tiles_x + tx
                bins.items[counts[i]] = m
                counts[i] += 1
    free(counts)
    bins.tiles_x = tiles_x
    bins.tiles_y = tiles_y
    return 0


def forward_composite(const double[::1] mu_x, const double[::1] mu_y,
                      const double[::1] con_a, const double[::1] con_b, const double[::1] con_c,
                      const double[::1] opac,
                      const double[::1] col_r, const double[::1] col_g, const double[::1] col_b,
                      const long[::1] x0, const long[::1] y0,
                      const long[::1] x1, const long[::1] y1,
                      int width, int height, int tile,
                      double bg_r, double bg_g, double bg_b,
                      double alpha_clamp, double alpha_skip, double transm_stop,
                      double[:, :, ::1] out_rgb, double[:, ::1] out_acc, int[:, ::1] out_cnt):
    cdef TileBins bins
    _build_bins(x0, y0, x1, y1, width, height, tile, &bins)
    cdef int ty, tx, yy, xx, yy_end, xx_end, n
    cdef long k, m, start, stop
    cdef double t_cur, r, g, b, dx, dy, power, alpha, test_t
    try:
        for ty in range(bins.tiles_y):
            yy_end = min((ty + 1) * tile, height)
            for tx in range(bins.tiles_x):
                start = bins.offsets[ty * bins.tiles_x + tx]
                stop = bins.offsets[ty * bins.tiles_x + tx + 1]
                xx_end = min((tx + 1) * tile, width)
                for yy in range(ty * tile, yy_end):
                    for xx in range(tx * tile, xx_end):
                        t_cur = 1.0
                        r = 0.0
                        g = 0.0
                        b = 0.0
                        n = 0
                        for k in range(start, stop):
                            m = bins.items[k]
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
                        out_rgb[yy, xx, 0] = r + t_cur * bg_r
                        out_rgb[yy, xx, 1] = g + t_cur * bg_g
                        out_rgb[yy, xx, 2] = b + t_cur * bg_b
                        out_acc[yy, xx] = 1.0 - t_cur
                        out_cnt[yy, xx] = n
    finally:
        free(bins.offsets)
        free(bins.items)


def backward_composite(const double[::1] mu_x, const double[::1] mu_y,
                       const double[::1] con_a, const double[::1] con_b, const double[::1] con_c,
                       const double[::1] opac,
                       const double[::1] col_r, const double[::1] col_g, const double[::1] col_b,
                       const long[::1] x0, const long[::1] y0,
                       const long[::1] x1, const long[::1] y1,
                       int width, int height, int tile,
                       double bg_r, double bg_g, double bg_b,
                       double alpha_clamp, double alpha_skip, double transm_stop,
                       const double[:, :, ::1] upstream,
                       double[::1] d_mu_x, double[::1] d_mu_y,
                       double[::1] d_con_a, double[::1] d_con_b, double[::1] d_con_c,
                       double[::1] d_opac,
                       double[::1] d_col_r, double[::1] d_col_g, double[::1] d_col_b):
    cdef TileBins bins
    _build_bins(x0, y0, x1, y1, width, height, tile, &bins)
    cdef int ty, tx, yy, xx, yy_end, xx_end
    cdef long k, m, start, stop
    cdef double t_cur, dx, dy, power, gval, raw_alpha, alpha, test_t
    cdef double tot_r, tot_g, tot_b, pre_r, pre_g, pre_b
    cdef double ur, ug, ub, w, one_minus, dalpha, dpower, ddx, ddy
    try:
        for ty in range(bins.tiles_y):
            yy_end = min((ty + 1) * tile, height)
            for tx in range(bins.tiles_x):
                start = bins.offsets[ty * bins.tiles_x + tx]
                stop = bins.offsets[ty * bins.tiles_x + tx + 1]
                if start == stop:
                    continue
                xx_end = min((tx + 1) * tile, width)
                for yy in range(ty * tile, yy_end):
                    for xx in range(tx * tile, xx_end):
                        ur = upstream[yy, xx, 0]
                        ug = upstream[yy, xx, 1]
                        ub = upstream[yy, xx, 2]
                        t_cur = 1.0
                        tot_r = 0.0
                        tot_g = 0.0
                        tot_b = 0.0
                        for k in range(start, stop):
                            m = bins.items[k]
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

                        t_cur = 1.0
                        pre_r = 0.0
                        pre_g = 0.0
                        pre_b = 0.0
                        for k in range(start, stop):
                            m = bins.items[k]
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
    finally:
        free(bins.offsets)
        free(bins.items)
