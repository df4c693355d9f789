"""Hand-derived reverse pass over the fixed render pipeline.

The forward ``Frame`` is the tape. Discrete choices (which surfel lands in
which layer, the transmittance interval a Gaussian falls into, the culling
indicator, the Gaussian footprint cutoff) are constants; every value inside
the chosen branch is differentiated. The opaque surfel core, where
min(1, w G) saturates, passes no gradient to surfel geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import sh
from .composite import Frame
from .geometry import quat_to_matrix_backward
from .splat_gauss import projection_backward, splat_backward

PARAM_CLASSES = (
    "surfel_pos", "surfel_rot", "surfel_scale", "surfel_sh",
    "gauss_pos", "gauss_opacity", "gauss_rot", "gauss_scale", "gauss_sh",
)


@dataclass
class SceneGrad:
    """Gradient blocks mirroring the Scene layout; frozen classes are None."""

    surfel_pos: np.ndarray | None = None
    surfel_rot: np.ndarray | None = None
    surfel_scale: np.ndarray | None = None
    surfel_sh: np.ndarray | None = None
    gauss_pos: np.ndarray | None = None
    gauss_opacity: np.ndarray | None = None
    gauss_rot: np.ndarray | None = None
    gauss_scale: np.ndarray | None = None
    gauss_sh: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, scene, frozen=()) -> SceneGrad:
        return cls(**{name: None if name in frozen else np.zeros_like(getattr(scene, name))
                      for name in PARAM_CLASSES})

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def __add__(self, other: SceneGrad) -> SceneGrad:
        out = {}
        for name in PARAM_CLASSES:
            a, b = getattr(self, name), getattr(other, name)
            out[name] = a if b is None else b if a is None else a + b
        return SceneGrad(**out)

    def __mul__(self, k: float) -> SceneGrad:
        return SceneGrad(**{n: None if v is None else v * k
                            for n, v in ((n, getattr(self, n)) for n in PARAM_CLASSES)})

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for _, v in self.items() if v.size), default=0.0)


def blend_geometry(stack):
    """Alpha-blended surfel depth D_s and normal N_s (same weights as the color blend)."""
    A, T = stack.alpha, stack.trans
    L = A.shape[2]
    wk = A * T[..., :L]
    depth = np.sum(wk * np.where(stack.ids >= 0, stack.depth, 0.0), axis=-1)
    normal = np.sum(wk[..., None] * stack.normal, axis=-2)
    return depth, normal


def backward(frame: Frame, d_image=None, *, d_surfel_color=None, d_trans=None,
             d_depth=None, d_normal=None, trans_grad: bool = True, frozen=()) -> SceneGrad:
    """Parameter gradients of a scalar loss given its adjoints on render outputs.

    d_image: dL/dC (H, W, 3); d_surfel_color: dL/dC_s; d_trans: dL/dT ladder
    (H, W, L + 1); d_depth, d_normal: dL/d of ``blend_geometry`` outputs.
    ``trans_grad=False`` detaches the transmittance seen by the Gaussians.
    """
    scene, camera, stack = frame.scene, frame.camera, frame.stack
    H, W = stack.shape
    L = stack.layers
    grads = SceneGrad.zeros_like(scene)

    g_cs = np.zeros((H, W, 3))
    g_trans = np.zeros((H, W, L + 1))
    if d_image is not None:
        d_image = np.asarray(d_image, dtype=np.float64)
        if d_image.shape != frame.image.shape:
            raise ValueError(f"d_image shape {d_image.shape} != image {frame.image.shape}")
        denom = stack.weight_sum + frame.accum.weight
        g_c = d_image / denom[..., None]
        g_cs += g_c
        if scene.num_gaussians:
            g_wg = -np.sum(d_image * frame.image, axis=-1) / denom
            gm, gq, gop, gcol, gtr = splat_backward(scene, frame.gaussians, stack, g_c, g_wg,
                                                    trans_grad, backend=frame.backend)
            g_trans += gtr
            gpos, grotm, gscale, gsh = projection_backward(scene, camera, frame.gaussians,
                                                           gm, gq, gcol)
            grads.gauss_pos += gpos
            grads.gauss_rot += quat_to_matrix_backward(scene.gauss_rot, grotm)
            grads.gauss_scale += gscale
            grads.gauss_sh += gsh
            grads.gauss_opacity += gop
    if d_surfel_color is not None:
        g_cs += d_surfel_color
    if d_trans is not None:
        g_trans += d_trans

    if scene.num_surfels:
        _surfel_backward(frame, g_cs, g_trans, d_depth, d_normal, grads)

    for name in frozen:
        setattr(grads, name, None)
    return grads


def _surfel_backward(frame, g_cs, g_trans, d_depth, d_normal, grads):
    scene, camera, stack, view = frame.scene, frame.camera, frame.stack, frame.surfels
    A, T, L = stack.alpha, stack.trans, stack.layers
    bg = scene.background
    gA = np.zeros_like(A)
    gT = g_trans.copy()
    gT[..., L] += g_cs @ bg
    g_col = stack.color * 0.0
    gD = np.zeros_like(A)
    gN = np.zeros_like(stack.normal)
    for k in range(L):
        wk = A[..., k] * T[..., k]
        g_col[..., k, :] = wk[..., None] * g_cs
        gw = np.sum(g_cs * stack.color[..., k, :], axis=-1)
        if d_depth is not None:
            gw = gw + d_depth * np.where(stack.ids[..., k] >= 0, stack.depth[..., k], 0.0)
            gD[..., k] = wk * d_depth
        if d_normal is not None:
            gw = gw + np.sum(d_normal * stack.normal[..., k, :], axis=-1)
            gN[..., k, :] = wk[..., None] * d_normal
        gA[..., k] += gw * T[..., k]
        gT[..., k] += gw * A[..., k]
    for k in range(L, 0, -1):
        gA[..., k - 1] += -T[..., k - 1] * gT[..., k]
        gT[..., k - 1] += (1.0 - A[..., k - 1]) * gT[..., k]

    ys, xs, ks = np.nonzero(stack.ids >= 0)
    sid = stack.ids[ys, xs, ks]
    n = scene.num_surfels
    rx, ry = camera.rays()
    dx, dy = rx[xs], ry[ys]
    a = A[ys, xs, ks]
    ring = a < 1.0
    g_r2 = np.where(ring, -0.5 * a * gA[ys, xs, ks], 0.0)
    ax = view.axes[sid]
    u, v, nrm = ax[:, :, 0], ax[:, :, 1], ax[:, :, 2]
    pc = view.pc[sid]
    d = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    nd = np.sum(nrm * d, axis=-1)
    t = view.pn[sid] / nd
    X = t[:, None] * d - pc
    sx, sy = view.scale[sid, 0], view.scale[sid, 1]
    xl = np.sum(u * X, axis=-1) / sx
    yl = np.sum(v * X, axis=-1) / sy
    g_xl = 2.0 * xl * g_r2
    g_yl = 2.0 * yl * g_r2
    g_sx = -g_xl * xl / sx
    g_sy = -g_yl * yl / sy
    g_u = (g_xl / sx)[:, None] * X
    g_v = (g_yl / sy)[:, None] * X
    g_X = (g_xl / sx)[:, None] * u + (g_yl / sy)[:, None] * v
    g_t = np.sum(g_X * d, axis=-1) + gD[ys, xs, ks]
    g_pc = -g_X + (g_t / nd)[:, None] * nrm
    g_n = -(g_t / nd)[:, None] * X
    sign = np.where(nd > 0, -1.0, 1.0)
    g_n = g_n + sign[:, None] * gN[ys, xs, ks]

    def scatter(vals):
        if vals.ndim == 1:
            return np.bincount(sid, weights=vals, minlength=n)
        return np.stack([np.bincount(sid, weights=vals[:, j], minlength=n)
                         for j in range(vals.shape[1])], axis=-1)

    G_axes = np.stack([scatter(g_u), scatter(g_v), scatter(g_n)], axis=-1)  # columns
    Rc = camera.R
    g_rot_world = np.einsum("ji,njk->nik", Rc, G_axes)
    grads.surfel_rot += quat_to_matrix_backward(scene.surfel_rot, g_rot_world)
    grads.surfel_pos += scatter(g_pc) @ Rc
    grads.surfel_scale += np.stack([scatter(g_sx), scatter(g_sy)], axis=-1)

    g_color = scatter(g_col[ys, xs, ks])
    gsh, gpos = sh.color_backward(scene.surfel_sh, view.sh_dirs, view.sh_norms, view.sh_basis,
                                  g_color)
    grads.surfel_sh += gsh
    grads.surfel_pos += gpos
