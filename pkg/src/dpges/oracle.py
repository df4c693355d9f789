"""Reference renderers and checkers used for verification only.

Everything here runs in float64 and favours plain, exhaustive evaluation:
every surfel is intersected with every pixel ray (no screen rectangles) and
all fragments are kept and fully sorted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fallback
from .composite import render
from .raster_surfel import kernel_alpha, prepare_surfels, support_r2
from .scene import Camera, Scene
from .splat_gauss import CUTOFF_POWER, cull_threshold, prepare_gaussians


@dataclass
class ABuffer:
    ids: np.ndarray      # (H, W, F) sorted by (depth, id); -1 padding
    depth: np.ndarray    # (H, W, F); inf padding
    alpha: np.ndarray    # (H, W, F); 0 padding
    r2: np.ndarray
    color: np.ndarray    # (H, W, F, 3)
    count: np.ndarray    # (H, W)
    surfel_color: np.ndarray  # exact C_s over all fragments

    def first_opaque_depth(self) -> np.ndarray:
        if self.depth.shape[-1] == 0:
            return np.full(self.depth.shape[:2], np.inf)
        opaque = self.alpha >= 1.0
        has = opaque.any(axis=-1)
        idx = np.argmax(opaque, axis=-1)
        d = np.take_along_axis(self.depth, idx[..., None], -1)[..., 0]
        return np.where(has, d, np.inf)


def _all_surfel_fragments(scene: Scene, camera: Camera):
    """(N, H, W) depth and r2 for every surfel/pixel pair, inf depth where invalid."""
    view = prepare_surfels(scene, camera)
    rx, ry = camera.rays()
    dx = rx[None, None, :]
    dy = ry[None, :, None]
    a = view.axes
    n0, n1, n2 = (a[:, 0, 2][:, None, None], a[:, 1, 2][:, None, None], a[:, 2, 2][:, None, None])
    u0, u1, u2 = (a[:, 0, 0][:, None, None], a[:, 1, 0][:, None, None], a[:, 2, 0][:, None, None])
    v0, v1, v2 = (a[:, 0, 1][:, None, None], a[:, 1, 1][:, None, None], a[:, 2, 1][:, None, None])
    p = view.pc[:, :, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        nd = n0 * dx + n1 * dy + n2
        t = view.pn[:, None, None] / nd
        X = t * dx - p[:, 0]
        Y = t * dy - p[:, 1]
        Z = t - p[:, 2]
        xl = (u0 * X + u1 * Y + u2 * Z) / view.scale[:, 0, None, None]
        yl = (v0 * X + v1 * Y + v2 * Z) / view.scale[:, 1, None, None]
        r2 = xl * xl + yl * yl
    ok = (nd != 0.0) & (t > camera.near) & (t < camera.far) & (r2 <= support_r2(scene.w))
    return np.where(ok, t, np.inf), np.where(ok, r2, np.inf), ok, view


def abuffer_render_surfels(scene: Scene, camera: Camera) -> ABuffer:
    H, W = camera.height, camera.width
    n = scene.num_surfels
    if n == 0:
        bg = np.broadcast_to(scene.background, (H, W, 3)).copy()
        z = np.zeros((H, W, 0))
        return ABuffer(np.zeros((H, W, 0), np.int32), z, z, z, np.zeros((H, W, 0, 3)),
                       np.zeros((H, W), np.int32), bg)
    depth, r2, ok, view = _all_surfel_fragments(scene, camera)
    ids = np.broadcast_to(np.arange(n)[:, None, None], depth.shape)
    order = np.lexsort((ids, depth), axis=0)
    count = ok.sum(axis=0).astype(np.int32)
    F = max(int(count.max()), 1)
    order = order[:F]
    s_depth = np.take_along_axis(depth, order, 0)
    s_r2 = np.take_along_axis(r2, order, 0)
    valid = np.isfinite(s_depth)
    s_ids = np.where(valid, order, -1).astype(np.int32)
    s_alpha = np.where(valid, kernel_alpha(np.where(valid, s_r2, 0.0), scene.w), 0.0)
    s_color = np.where(valid[..., None], view.color[np.maximum(s_ids, 0)], 0.0)
    # move the fragment axis last
    s_ids, s_depth, s_alpha, s_r2 = (np.moveaxis(x, 0, -1) for x in (s_ids, s_depth, s_alpha, s_r2))
    s_color = np.moveaxis(s_color, 0, -2)
    T = np.ones((H, W))
    cs = np.zeros((H, W, 3))
    for k in range(F):
        cs += (s_alpha[..., k] * T)[..., None] * s_color[..., k, :]
        T = T * (1.0 - s_alpha[..., k])
    cs += T[..., None] * scene.background
    return ABuffer(s_ids, s_depth, s_alpha, s_r2, s_color, count, cs)


def gaussian_alpha_maps(scene: Scene, camera: Camera):
    """(M, H, W) Gaussian alpha over the whole image with the standard footprint cutoff."""
    view = prepare_gaussians(scene, camera)
    H, W = camera.height, camera.width
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    ddx = xs[None, None, :] - view.mean2d[:, 0, None, None]
    ddy = ys[None, :, None] - view.mean2d[:, 1, None, None]
    A, B, C = (view.conic[:, j, None, None] for j in range(3))
    power = -0.5 * (A * ddx * ddx + C * ddy * ddy) - B * ddx * ddy
    alpha = scene.gauss_opacity[:, None, None] * np.exp(power)
    keep = (power > CUTOFF_POWER) & view.visible[:, None, None]
    return np.where(keep, alpha, 0.0), view


def sorted_full_render(scene: Scene, camera: Camera) -> np.ndarray:
    """Exact per-pixel depth sort of surfel and Gaussian fragments, front-to-back over."""
    H, W = camera.height, camera.width
    frags_d, frags_a, frags_c = [], [], []
    if scene.num_surfels:
        depth, r2, ok, view = _all_surfel_fragments(scene, camera)
        frags_d.append(depth)
        frags_a.append(np.where(ok, kernel_alpha(np.where(ok, r2, 0.0), scene.w), 0.0))
        frags_c.append(np.broadcast_to(view.color[:, None, None, :], depth.shape + (3,)))
    if scene.num_gaussians:
        alpha, gview = gaussian_alpha_maps(scene, camera)
        d = np.where(alpha > 0, gview.depth[:, None, None], np.inf)
        frags_d.append(d)
        frags_a.append(alpha)
        frags_c.append(np.broadcast_to(gview.color[:, None, None, :], d.shape + (3,)))
    if not frags_d:
        return np.broadcast_to(scene.background, (H, W, 3)).copy()
    D = np.concatenate(frags_d)
    Al = np.concatenate(frags_a)
    Co = np.concatenate(frags_c)
    order = np.lexsort((np.broadcast_to(np.arange(D.shape[0])[:, None, None], D.shape), D), axis=0)
    T = np.ones((H, W))
    out = np.zeros((H, W, 3))
    for k in range(D.shape[0]):
        idx = order[k]
        a = np.take_along_axis(Al, idx[None], 0)[0]
        c = np.take_along_axis(Co, idx[None, ..., None], 0)[0]
        out += (a * T)[..., None] * c
        T = T * (1.0 - a)
    return out + T[..., None] * scene.background


def fd_gradient(scene: Scene, camera: Camera, loss, param, h: float = 1e-4,
                layers: int = 3) -> float:
    """Central difference of ``loss(frame)`` w.r.t. one scalar ``param = (name, index)``."""
    name, index = param
    plus, minus = scene.copy(), scene.copy()
    getattr(plus, name)[index] += h
    getattr(minus, name)[index] -= h
    lp = float(loss(render(plus, camera, layers)))
    lm = float(loss(render(minus, camera, layers)))
    return (lp - lm) / (2.0 * h)


def discrete_state(frame) -> tuple:
    """Everything the reverse pass treats as a constant selection, as comparable bytes.

    Layer assignment, opaque-core versus ring membership, culling layer,
    and every (Gaussian, pixel) pair that passes cutoff, depth test and
    zero-transmittance discard together with its interval index.
    """
    st = frame.stack
    parts = [st.ids.tobytes(), (st.alpha >= 1.0).tobytes(), st.cull_layer.tobytes()]
    if frame.scene.num_gaussians:
        gv = frame.gaussians
        rects = gv.rects.copy()
        rects[~gv.visible] = 0
        gid, y, x, _, _, _, k, _ = _fallback._splat_pairs(
            gv.mean2d, gv.conic, frame.scene.gauss_opacity, gv.depth, rects,
            st.depth, st.trans, cull_threshold(st), CUTOFF_POWER)
        parts += [gid.tobytes(), y.tobytes(), x.tobytes(), k.tobytes(), gv.visible.tobytes()]
    return tuple(parts)


def gaussian_pixel_weights(frame):
    """Per-pair pipeline weights alpha * t_s: returns (gid, y, x, weight)."""
    st = frame.stack
    gv = frame.gaussians
    rects = gv.rects.copy()
    rects[~gv.visible] = 0
    gid, y, x, _, _, power, _, ts = _fallback._splat_pairs(
        gv.mean2d, gv.conic, frame.scene.gauss_opacity, gv.depth, rects,
        st.depth, st.trans, cull_threshold(st), CUTOFF_POWER)
    return gid, y, x, frame.scene.gauss_opacity[gid] * np.exp(power) * ts


def occluded_contribution(frame, abuf: ABuffer | None = None) -> np.ndarray:
    """Per-Gaussian weight the pipeline assigns at pixels where an opaque surfel hides it."""
    if abuf is None:
        abuf = abuffer_render_surfels(frame.scene, frame.camera)
    m = frame.scene.num_gaussians
    if m == 0:
        return np.zeros(0)
    gid, y, x, wgt = gaussian_pixel_weights(frame)
    hidden = frame.gaussians.depth[gid] > abuf.first_opaque_depth()[y, x]
    return np.bincount(gid, weights=np.where(hidden, wgt, 0.0), minlength=m).astype(np.float64)
