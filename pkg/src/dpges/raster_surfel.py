"""Surfel rasterization by per-pixel depth peeling.

Each surfel is a disc in its local XY plane. A pixel ray is intersected
exactly with the disc plane; the local radius r2 = x^2 + y^2 (in units of
the surfel scales) gives the opacity min(1, w * exp(-r2 / 2)). Fragments
exist only where that opacity is at least 1/255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, sh
from .scene import Camera, Scene

SUPPORT_ALPHA = 1.0 / 255.0
NO_CULL = np.inf


def support_r2(w: float) -> float:
    """Largest local r2 with alpha >= 1/255, i.e. 2 ln(255 w)."""
    return 2.0 * math.log(w / SUPPORT_ALPHA)


def core_r2(w: float) -> float:
    """Radius^2 of the opaque core: min(1, w G) = 1 for r2 <= 2 ln w."""
    return 2.0 * math.log(w) if w > 1 else 0.0


def kernel_alpha(r2, w: float):
    return np.minimum(1.0, w * np.exp(-0.5 * np.asarray(r2, dtype=np.float64)))


@dataclass
class SurfelFragment:
    depth: float
    alpha: float
    color: np.ndarray
    surfel_id: int
    local_r2: float


@dataclass
class SurfelView:
    """Per-surfel quantities for one camera."""

    pc: np.ndarray        # (N, 3) camera-space centers
    axes: np.ndarray      # (N, 3, 3) camera-space frame, columns u, v, n
    pn: np.ndarray        # (N,) n . pc
    scale: np.ndarray     # (N, 2)
    color: np.ndarray     # (N, 3)
    sh_dirs: np.ndarray
    sh_norms: np.ndarray
    sh_basis: np.ndarray
    rot_world: np.ndarray  # (N, 3, 3)
    rects: np.ndarray     # (N, 4) int32 x0, x1, y0, y1 (exclusive ends)


def prepare_surfels(scene: Scene, camera: Camera) -> SurfelView:
    Rc = camera.R
    pos = scene.surfel_pos
    n = pos.shape[0]
    rot = scene.surfel_axes() if n else np.zeros((0, 3, 3))
    pc = pos @ Rc.T + camera.t
    axes = np.einsum("ij,njk->nik", Rc, rot)
    pn = axes[:, 0, 2] * pc[:, 0] + axes[:, 1, 2] * pc[:, 1] + axes[:, 2, 2] * pc[:, 2]
    if n:
        color, dirs, norms, Y = sh.eval_color(scene.surfel_sh, pos, camera.center)
    else:
        color = np.zeros((0, 3))
        dirs, norms, Y = np.zeros((0, 3)), np.zeros(0), np.zeros((0, scene.surfel_sh.shape[1]))
    rects = surfel_rects(pc, axes, scene.surfel_scale, camera, support_r2(scene.w))
    return SurfelView(pc=pc, axes=axes, pn=pn, scale=scene.surfel_scale.copy(), color=color,
                      sh_dirs=dirs, sh_norms=norms, sh_basis=Y, rot_world=rot, rects=rects)


def surfel_rects(pc, axes, scale, camera: Camera, r2max: float) -> np.ndarray:
    """Screen rectangles from the 8 vertices of the octagon circumscribing the support disc."""
    n = pc.shape[0]
    rects = np.zeros((n, 4), dtype=np.int32)
    if n == 0 or r2max <= 0:
        return rects
    radius = math.sqrt(r2max) / math.cos(math.pi / 8)
    theta = np.arange(8) * (math.pi / 4)
    cu = np.cos(theta)[None, :, None] * (scale[:, 0:1, None] * axes[:, None, :, 0])
    sv = np.sin(theta)[None, :, None] * (scale[:, 1:2, None] * axes[:, None, :, 1])
    verts = pc[:, None, :] + radius * (cu + sv)
    z = verts[..., 2]
    W, H = camera.width, camera.height
    full = np.array([0, W, 0, H], dtype=np.int32)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = camera.fx * verts[..., 0] / z + camera.cx
        ys = camera.fy * verts[..., 1] / z + camera.cy
    for i in range(n):
        if np.all(z[i] <= camera.near) or np.all(z[i] >= camera.far):
            continue
        if np.any(z[i] <= camera.near):
            rects[i] = full
            continue
        # one pixel of slack; the per-pixel test is exact
        x0 = int(np.floor(xs[i].min())) - 1
        x1 = int(np.ceil(xs[i].max())) + 1
        y0 = int(np.floor(ys[i].min())) - 1
        y1 = int(np.ceil(ys[i].max())) + 1
        rects[i] = (max(x0, 0), min(x1, W), max(y0, 0), min(y1, H))
    rects[:, 1] = np.maximum(rects[:, 1], rects[:, 0])
    rects[:, 3] = np.maximum(rects[:, 3], rects[:, 2])
    return rects


def rasterize_surfel_fragments(scene: Scene, camera: Camera, pixel) -> list[SurfelFragment]:
    """All surfel fragments along the ray through pixel (x, y), in surfel-id order."""
    px, py = pixel
    view = prepare_surfels(scene, camera)
    dxs, dys = camera.rays()
    dx, dy = dxs[px], dys[py]
    a = view.axes
    nd = a[:, 0, 2] * dx + a[:, 1, 2] * dy + a[:, 2, 2]
    out = []
    r2max = support_r2(scene.w)
    for i in range(scene.num_surfels):
        if nd[i] == 0.0:
            continue
        t = view.pn[i] / nd[i]
        if not (camera.near < t < camera.far):
            continue
        p0, p1, p2 = view.pc[i]
        X = t * dx - p0
        Y = t * dy - p1
        Z = t - p2
        xl = (a[i, 0, 0] * X + a[i, 1, 0] * Y + a[i, 2, 0] * Z) / view.scale[i, 0]
        yl = (a[i, 0, 1] * X + a[i, 1, 1] * Y + a[i, 2, 1] * Z) / view.scale[i, 1]
        r2 = xl * xl + yl * yl
        if r2 > r2max:
            continue
        out.append(SurfelFragment(depth=float(t), alpha=float(kernel_alpha(r2, scene.w)),
                                  color=view.color[i].copy(), surfel_id=i, local_r2=float(r2)))
    return out


@dataclass
class PeelStack:
    """Per-pixel peeled surfel layers plus everything derived from them."""

    layers: int
    ids: np.ndarray          # (H, W, L) int32, -1 where the layer is missing
    depth: np.ndarray        # (H, W, L), camera far plane where missing
    alpha: np.ndarray        # (H, W, L), 0 where missing
    color: np.ndarray        # (H, W, L, 3)
    normal: np.ndarray       # (H, W, L, 3) camera-space, oriented toward the camera
    r2: np.ndarray           # (H, W, L)
    trans: np.ndarray        # (H, W, L + 1), trans[..., 0] == 1
    layer_count: np.ndarray  # (H, W)
    frag_count: np.ndarray   # (H, W) fragments before truncation
    surfel_frags: np.ndarray  # (N,) fragments generated by each surfel
    cull_layer: np.ndarray   # (H, W) 0-based layer defining d_s, -1 for no culling
    cull_depth: np.ndarray   # (H, W) d_s, +inf for no culling
    cull_eps: np.ndarray     # (H, W) margin of the culling surfel, 0 for no culling
    surfel_color: np.ndarray  # (H, W, 3) C_s
    weight_sum: np.ndarray   # (H, W) W_s

    @property
    def shape(self):
        return self.ids.shape[:2]


def transmittance(alpha: np.ndarray) -> np.ndarray:
    """T_0..T_L with T_0 = 1 and T_i = prod_{j<=i} (1 - A_j); dtype follows alpha."""
    H, W, L = alpha.shape
    T = np.empty((H, W, L + 1), dtype=alpha.dtype)
    T[..., 0] = 1
    for k in range(L):
        T[..., k + 1] = T[..., k] * (1 - alpha[..., k])
    return T


def blend_surfels(stack: PeelStack, background) -> tuple[np.ndarray, np.ndarray]:
    """C_s = sum A_i T_{i-1} C_i + T_L C_b and the explicit weight sum W_s."""
    A = stack.alpha
    T = transmittance(A)
    L = A.shape[2]
    bg = np.asarray(background, dtype=A.dtype)
    cs = T[..., L, None] * bg
    ws = T[..., L].copy()
    for k in range(L):
        wk = A[..., k] * T[..., k]
        cs = cs + wk[..., None] * stack.color[..., k, :].astype(A.dtype)
        ws = ws + wk
    return cs, ws


def culling_depth(stack: PeelStack) -> np.ndarray:
    return _culling(stack.trans, stack.depth, stack.layer_count)[1]


def _culling(trans, depth, layer_count):
    """Layer index and depth used for the Gaussian depth test at each pixel."""
    H, W, L = depth.shape
    zero = trans[..., 1:] == 0
    has_zero = zero.any(axis=-1)
    first_zero = np.argmax(zero, axis=-1)
    layer = np.where(has_zero, first_zero, np.where(layer_count >= L, L - 1, -1))
    d = np.where(layer >= 0, np.take_along_axis(depth, np.maximum(layer, 0)[..., None], -1)[..., 0],
                 NO_CULL)
    return layer, d


def peel(scene: Scene, camera: Camera, layers: int = 3, view: SurfelView | None = None,
         backend: str | None = None) -> PeelStack:
    if layers not in (2, 3, 4):
        raise ValueError(f"peel layers must be 2, 3 or 4, got {layers}")
    if view is None:
        view = prepare_surfels(scene, camera)
    rx, ry = camera.rays()
    ids, depth, r2, count, sfrag = kernels.peel_layers(
        np.ascontiguousarray(view.pc), np.ascontiguousarray(view.pn),
        np.ascontiguousarray(view.axes.reshape(-1, 9)), np.ascontiguousarray(view.scale),
        view.rects, rx, ry, float(camera.near), float(camera.far),
        support_r2(scene.w), int(layers), backend=backend)
    present = ids >= 0
    safe = np.maximum(ids, 0)
    alpha = np.where(present, kernel_alpha(r2, scene.w), 0.0)
    n = scene.num_surfels
    color = np.where(present[..., None], view.color[safe] if n else 0.0, 0.0)
    rx_, ry_ = np.meshgrid(rx, ry)
    if n:
        nrm = view.axes[safe][..., :, 2]
        nd = nrm[..., 0] * rx_[..., None] + nrm[..., 1] * ry_[..., None] + nrm[..., 2]
        sign = np.where(nd > 0, -1.0, 1.0)
        normal = np.where(present[..., None], sign[..., None] * nrm, 0.0)
    else:
        normal = np.zeros(ids.shape + (3,))
    layer_count = np.minimum(count, layers).astype(np.int32)
    trans = transmittance(alpha)
    cull_layer, cull_d = _culling(trans, depth, layer_count)
    cull_ids = np.take_along_axis(ids, np.maximum(cull_layer, 0)[..., None], -1)[..., 0]
    eps = scene.surfel_eps[np.maximum(cull_ids, 0)] if n else np.zeros(cull_ids.shape)
    cull_eps = np.where(cull_layer >= 0, eps, 0.0)
    stack = PeelStack(layers=layers, ids=ids, depth=depth, alpha=alpha, color=color,
                      normal=normal, r2=r2, trans=trans, layer_count=layer_count,
                      frag_count=count, surfel_frags=sfrag, cull_layer=cull_layer,
                      cull_depth=cull_d, cull_eps=cull_eps,
                      surfel_color=np.zeros(ids.shape[:2] + (3,)),
                      weight_sum=np.zeros(ids.shape[:2]))
    stack.surfel_color, stack.weight_sum = blend_surfels(stack, scene.background)
    return stack
