# cython: language_level=3
"""Compiled per-pixel kernels: surfel depth peeling and Gaussian splatting.

Arithmetic here mirrors ``_fallback.py`` operation for operation so that the
two backends agree bit for bit on everything except ``exp``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def peel_layers(double[:, ::1] pc, double[::1] pn, double[:, ::1] axes,
                double[:, ::1] scale, int[:, ::1] rects,
                double[::1] rx, double[::1] ry,
                double near, double far, double r2max, int layers):
    """Multi-pass depth peeling over (depth, surfel id) lexicographic order.

    Pass k keeps, per pixel, the nearest fragment strictly behind the fragment
    kept by pass k-1. Returns ids, depth, r2 (H, W, L), per-pixel fragment
    counts and per-surfel fragment counts.
    """
    cdef Py_ssize_t n = pc.shape[0]
    cdef Py_ssize_t H = ry.shape[0]
    cdef Py_ssize_t W = rx.shape[0]
    ids_arr = np.full((H, W, layers), -1, dtype=np.int32)
    depth_arr = np.full((H, W, layers), far, dtype=np.float64)
    r2_arr = np.zeros((H, W, layers), dtype=np.float64)
    count_arr = np.zeros((H, W), dtype=np.int32)
    sfrag_arr = np.zeros(n, dtype=np.int64)
    cdef int[:, :, ::1] ids = ids_arr
    cdef double[:, :, ::1] depth = depth_arr
    cdef double[:, :, ::1] r2o = r2_arr
    cdef int[:, ::1] count = count_arr
    cdef long long[::1] sfrag = sfrag_arr
    cdef Py_ssize_t i, x, y
    cdef int k, pid, cid
    cdef double p0, p1, p2, u0, u1, u2, v0, v1, v2, n0, n1, n2, sx, sy, npc
    cdef double dx, dy, nd, t, X, Y, Z, xl, yl, r2, pd
    with nogil:
        for k in range(layers):
            for i in range(n):
                p0 = pc[i, 0]; p1 = pc[i, 1]; p2 = pc[i, 2]
                u0 = axes[i, 0]; u1 = axes[i, 3]; u2 = axes[i, 6]
                v0 = axes[i, 1]; v1 = axes[i, 4]; v2 = axes[i, 7]
                n0 = axes[i, 2]; n1 = axes[i, 5]; n2 = axes[i, 8]
                sx = scale[i, 0]; sy = scale[i, 1]
                npc = pn[i]
                for y in range(rects[i, 2], rects[i, 3]):
                    dy = ry[y]
                    for x in range(rects[i, 0], rects[i, 1]):
                        dx = rx[x]
                        nd = n0 * dx + n1 * dy + n2
                        if nd == 0.0:
                            continue
                        t = npc / nd
                        if not (t > near and t < far):
                            continue
                        X = t * dx - p0
                        Y = t * dy - p1
                        Z = t - p2
                        xl = (u0 * X + u1 * Y + u2 * Z) / sx
                        yl = (v0 * X + v1 * Y + v2 * Z) / sy
                        r2 = xl * xl + yl * yl
                        if r2 > r2max:
                            continue
                        if k == 0:
                            count[y, x] += 1
                            sfrag[i] += 1
                        else:
                            pid = ids[y, x, k - 1]
                            if pid < 0:
                                continue
                            pd = depth[y, x, k - 1]
                            if not (t > pd or (t == pd and i > pid)):
                                continue
                        cid = ids[y, x, k]
                        if cid < 0 or t < depth[y, x, k] or (t == depth[y, x, k] and i < cid):
                            ids[y, x, k] = <int>i
                            depth[y, x, k] = t
                            r2o[y, x, k] = r2
    return ids_arr, depth_arr, r2_arr, count_arr, sfrag_arr


cdef inline int _interval(double[:, :, ::1] ldepth, Py_ssize_t y, Py_ssize_t x,
                          double d, int L) noexcept nogil:
    cdef int k = 0
    while k < L - 1 and d >= ldepth[y, x, k]:
        k += 1
    return k


def splat_forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                  double[::1] depth, double[:, ::1] color, int[:, ::1] rects,
                  double[:, :, ::1] ldepth, double[:, :, ::1] trans, double[:, ::1] cull,
                  double cutoff):
    """Sort-free accumulation of Gaussian color and weight, Gaussian-major order."""
    cdef Py_ssize_t m = mean2d.shape[0]
    cdef Py_ssize_t H = ldepth.shape[0]
    cdef Py_ssize_t W = ldepth.shape[1]
    cdef int L = ldepth.shape[2]
    cg_arr = np.zeros((H, W, 3), dtype=np.float64)
    wg_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, :, ::1] cg = cg_arr
    cdef double[:, ::1] wg = wg_arr
    cdef Py_ssize_t i, x, y
    cdef int k
    cdef double mx, my, a, b, c, op, d, c0, c1, c2, ddx, ddy, power, ts, wgt
    with nogil:
        for i in range(m):
            mx = mean2d[i, 0]; my = mean2d[i, 1]
            a = conic[i, 0]; b = conic[i, 1]; c = conic[i, 2]
            op = opacity[i]; d = depth[i]
            c0 = color[i, 0]; c1 = color[i, 1]; c2 = color[i, 2]
            for y in range(rects[i, 2], rects[i, 3]):
                ddy = (y + 0.5) - my
                for x in range(rects[i, 0], rects[i, 1]):
                    ddx = (x + 0.5) - mx
                    power = -0.5 * (a * ddx * ddx + c * ddy * ddy) - b * ddx * ddy
                    if power <= cutoff:
                        continue
                    if not (d < cull[y, x]):
                        continue
                    k = _interval(ldepth, y, x, d, L)
                    ts = trans[y, x, k]
                    if ts == 0.0:
                        continue
                    wgt = (op * exp(power)) * ts
                    cg[y, x, 0] += wgt * c0
                    cg[y, x, 1] += wgt * c1
                    cg[y, x, 2] += wgt * c2
                    wg[y, x] += wgt
    return cg_arr, wg_arr


def splat_backward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                   double[::1] depth, double[:, ::1] color, int[:, ::1] rects,
                   double[:, :, ::1] ldepth, double[:, :, ::1] trans, double[:, ::1] cull,
                   double cutoff, double[:, :, ::1] d_cg, double[:, ::1] d_wg,
                   bint trans_grad):
    """Adjoint of ``splat_forward``.

    Returns per-Gaussian gradients for mean2d, conic, opacity, color and the
    per-pixel gradient on the transmittance ladder (zero if ``trans_grad`` is off).
    """
    cdef Py_ssize_t m = mean2d.shape[0]
    cdef Py_ssize_t H = ldepth.shape[0]
    cdef Py_ssize_t W = ldepth.shape[1]
    cdef int L = ldepth.shape[2]
    g_mean_arr = np.zeros((m, 2), dtype=np.float64)
    g_conic_arr = np.zeros((m, 3), dtype=np.float64)
    g_op_arr = np.zeros(m, dtype=np.float64)
    g_col_arr = np.zeros((m, 3), dtype=np.float64)
    g_trans_arr = np.zeros((H, W, L + 1), dtype=np.float64)
    cdef double[:, ::1] g_mean = g_mean_arr
    cdef double[:, ::1] g_conic = g_conic_arr
    cdef double[::1] g_op = g_op_arr
    cdef double[:, ::1] g_col = g_col_arr
    cdef double[:, :, ::1] g_trans = g_trans_arr
    cdef Py_ssize_t i, x, y
    cdef int k
    cdef double mx, my, a, b, c, op, d, c0, c1, c2, ddx, ddy, power, ts, e, alpha, wgt
    cdef double g, dalpha, dpow
    cdef double s_mx, s_my, s_a, s_b, s_c, s_op, s_c0, s_c1, s_c2
    with nogil:
        for i in range(m):
            mx = mean2d[i, 0]; my = mean2d[i, 1]
            a = conic[i, 0]; b = conic[i, 1]; c = conic[i, 2]
            op = opacity[i]; d = depth[i]
            c0 = color[i, 0]; c1 = color[i, 1]; c2 = color[i, 2]
            s_mx = 0.0; s_my = 0.0; s_a = 0.0; s_b = 0.0; s_c = 0.0
            s_op = 0.0; s_c0 = 0.0; s_c1 = 0.0; s_c2 = 0.0
            for y in range(rects[i, 2], rects[i, 3]):
                ddy = (y + 0.5) - my
                for x in range(rects[i, 0], rects[i, 1]):
                    ddx = (x + 0.5) - mx
                    power = -0.5 * (a * ddx * ddx + c * ddy * ddy) - b * ddx * ddy
                    if power <= cutoff:
                        continue
                    if not (d < cull[y, x]):
                        continue
                    k = _interval(ldepth, y, x, d, L)
                    ts = trans[y, x, k]
                    if ts == 0.0:
                        continue
                    e = exp(power)
                    alpha = op * e
                    wgt = alpha * ts
                    g = d_cg[y, x, 0] * c0 + d_cg[y, x, 1] * c1 + d_cg[y, x, 2] * c2 + d_wg[y, x]
                    s_c0 += wgt * d_cg[y, x, 0]
                    s_c1 += wgt * d_cg[y, x, 1]
                    s_c2 += wgt * d_cg[y, x, 2]
                    dalpha = g * ts
                    if trans_grad:
                        g_trans[y, x, k] += g * alpha
                    s_op += dalpha * e
                    dpow = dalpha * alpha
                    s_a += -0.5 * ddx * ddx * dpow
                    s_c += -0.5 * ddy * ddy * dpow
                    s_b += -ddx * ddy * dpow
                    # d power / d mean = -(d power / d delta)
                    s_mx += (a * ddx + b * ddy) * dpow
                    s_my += (c * ddy + b * ddx) * dpow
            g_mean[i, 0] = s_mx; g_mean[i, 1] = s_my
            g_conic[i, 0] = s_a; g_conic[i, 1] = s_b; g_conic[i, 2] = s_c
            g_op[i] = s_op
            g_col[i, 0] = s_c0; g_col[i, 1] = s_c1; g_col[i, 2] = s_c2
    return g_mean_arr, g_conic_arr, g_op_arr, g_col_arr, g_trans_arr
