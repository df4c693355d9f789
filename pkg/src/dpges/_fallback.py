"""Pure numpy versions of the compiled kernels.

Same signatures and results as ``_kernels``. Work is vectorized over
(primitive, pixel) pairs enumerated from each primitive's screen rectangle;
accumulation uses ``np.bincount`` over pairs in primitive-major order, which
reproduces the compiled loops' summation order.
"""

import numpy as np


def _pairs(rects, width):
    """Enumerate (primitive, y, x) for every pixel inside each rectangle, row-major."""
    rects = np.asarray(rects, dtype=np.int64)
    w = np.maximum(rects[:, 1] - rects[:, 0], 0)
    h = np.maximum(rects[:, 3] - rects[:, 2], 0)
    sizes = w * h
    total = int(sizes.sum())
    prim = np.repeat(np.arange(len(rects)), sizes)
    if total == 0:
        e = np.zeros(0, dtype=np.int64)
        return prim, e, e
    start = np.repeat(np.cumsum(sizes) - sizes, sizes)
    local = np.arange(total) - start
    ww = w[prim]
    y = rects[prim, 2] + local // ww
    x = rects[prim, 0] + local % ww
    return prim, y, x


def surfel_fragments(pc, pn, axes, scale, rects, rx, ry, near, far, r2max):
    """All valid fragments as flat arrays (surfel id, y, x, depth, r2)."""
    prim, y, x = _pairs(rects, len(rx))
    dx = rx[x]
    dy = ry[y]
    n0, n1, n2 = axes[prim, 2], axes[prim, 5], axes[prim, 8]
    u0, u1, u2 = axes[prim, 0], axes[prim, 3], axes[prim, 6]
    v0, v1, v2 = axes[prim, 1], axes[prim, 4], axes[prim, 7]
    p0, p1, p2 = pc[prim, 0], pc[prim, 1], pc[prim, 2]
    nd = n0 * dx + n1 * dy + n2
    ok = nd != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = pn[prim] / nd
        ok &= (t > near) & (t < far)
        X = t * dx - p0
        Y = t * dy - p1
        Z = t - p2
        xl = (u0 * X + u1 * Y + u2 * Z) / scale[prim, 0]
        yl = (v0 * X + v1 * Y + v2 * Z) / scale[prim, 1]
        r2 = xl * xl + yl * yl
    ok &= r2 <= r2max
    return prim[ok], y[ok], x[ok], t[ok], r2[ok]


def peel_layers(pc, pn, axes, scale, rects, rx, ry, near, far, r2max, layers):
    H, W = len(ry), len(rx)
    n = pc.shape[0]
    ids = np.full((H, W, layers), -1, dtype=np.int32)
    depth = np.full((H, W, layers), far, dtype=np.float64)
    r2o = np.zeros((H, W, layers), dtype=np.float64)
    sid, y, x, t, r2 = surfel_fragments(pc, pn, axes, scale, rects, rx, ry, near, far, r2max)
    pix = y * W + x
    count = np.bincount(pix, minlength=H * W).astype(np.int32).reshape(H, W)
    sfrag = np.bincount(sid, minlength=n).astype(np.int64)
    # selecting the L smallest (depth, id) per pixel equals L peeling passes
    order = np.lexsort((sid, t, pix))
    pix_s = pix[order]
    first = np.searchsorted(pix_s, pix_s, side="left")
    rank = np.arange(len(order)) - first
    keep = rank < layers
    o = order[keep]
    rk = rank[keep]
    yy, xx = y[o], x[o]
    ids[yy, xx, rk] = sid[o]
    depth[yy, xx, rk] = t[o]
    r2o[yy, xx, rk] = r2[o]
    return ids, depth, r2o, count, sfrag


def _splat_pairs(mean2d, conic, opacity, depth, rects, ldepth, trans, cull, cutoff):
    H, W, L = ldepth.shape
    gid, y, x = _pairs(rects, W)
    ddx = (x + 0.5) - mean2d[gid, 0]
    ddy = (y + 0.5) - mean2d[gid, 1]
    a, b, c = conic[gid, 0], conic[gid, 1], conic[gid, 2]
    power = -0.5 * (a * ddx * ddx + c * ddy * ddy) - b * ddx * ddy
    d = depth[gid]
    ok = (power > cutoff) & (d < cull[y, x])
    gid, y, x, ddx, ddy, power, d = gid[ok], y[ok], x[ok], ddx[ok], ddy[ok], power[ok], d[ok]
    k = np.zeros(len(gid), dtype=np.int64)
    for j in range(L - 1):
        step = (k == j) & (d >= ldepth[y, x, j])
        k[step] += 1
    ts = trans[y, x, k]
    ok = ts != 0.0
    return gid[ok], y[ok], x[ok], ddx[ok], ddy[ok], power[ok], k[ok], ts[ok]


def splat_forward(mean2d, conic, opacity, depth, color, rects, ldepth, trans, cull, cutoff):
    H, W, _ = ldepth.shape
    gid, y, x, _, _, power, _, ts = _splat_pairs(
        mean2d, conic, opacity, depth, rects, ldepth, trans, cull, cutoff)
    wgt = (opacity[gid] * np.exp(power)) * ts
    pix = y * W + x
    cg = np.stack([np.bincount(pix, weights=wgt * color[gid, ch], minlength=H * W)
                   for ch in range(3)], axis=-1).reshape(H, W, 3)
    wg = np.bincount(pix, weights=wgt, minlength=H * W).reshape(H, W)
    return cg, wg


def splat_backward(mean2d, conic, opacity, depth, color, rects, ldepth, trans, cull,
                   cutoff, d_cg, d_wg, trans_grad):
    H, W, L = ldepth.shape
    m = mean2d.shape[0]
    gid, y, x, ddx, ddy, power, k, ts = _splat_pairs(
        mean2d, conic, opacity, depth, rects, ldepth, trans, cull, cutoff)
    e = np.exp(power)
    alpha = opacity[gid] * e
    wgt = alpha * ts
    dc = d_cg[y, x]
    col = color[gid]
    g = dc[:, 0] * col[:, 0] + dc[:, 1] * col[:, 1] + dc[:, 2] * col[:, 2] + d_wg[y, x]
    dalpha = g * ts
    dpow = dalpha * alpha
    a, b, c = conic[gid, 0], conic[gid, 1], conic[gid, 2]

    def per_gauss(v):
        return np.bincount(gid, weights=v, minlength=m)

    g_col = np.stack([per_gauss(wgt * dc[:, ch]) for ch in range(3)], axis=-1)
    g_op = per_gauss(dalpha * e)
    g_conic = np.stack([per_gauss(-0.5 * ddx * ddx * dpow), per_gauss(-ddx * ddy * dpow),
                        per_gauss(-0.5 * ddy * ddy * dpow)], axis=-1)
    g_mean = np.stack([per_gauss((a * ddx + b * ddy) * dpow),
                       per_gauss((c * ddy + b * ddx) * dpow)], axis=-1)
    g_trans = np.zeros((H, W, L + 1))
    if trans_grad:
        flat = (y * W + x) * (L + 1) + k
        g_trans = np.bincount(flat, weights=g * alpha, minlength=H * W * (L + 1)).reshape(H, W, L + 1)
    return g_mean, g_conic, g_op, g_col, g_trans
