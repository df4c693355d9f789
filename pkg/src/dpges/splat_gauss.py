"""Sort-free splatting of 3D Gaussians modulated by peeled surfel transmittance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, sh
from .geometry import quat_to_matrix
from .raster_surfel import PeelStack
from .scene import Camera, Gaussian, Scene

COV_BLUR = 0.3
CUTOFF_SIGMAS = 3.5
CUTOFF_POWER = -0.5 * CUTOFF_SIGMAS ** 2  # -6.125
MIN_DET = 1e-12


@dataclass
class GaussianSplat:
    depth: float
    mean2d: np.ndarray
    cov2d: np.ndarray     # full symmetric 2x2
    color: np.ndarray
    sigma: float


@dataclass
class AccumBuffers:
    color: np.ndarray   # C_G (H, W, 3)
    weight: np.ndarray  # W_G (H, W)


@dataclass
class GaussView:
    """Projected Gaussians for one camera plus what the adjoint needs."""

    tcam: np.ndarray     # (M, 3)
    depth: np.ndarray    # (M,)
    mean2d: np.ndarray   # (M, 2)
    cov2d: np.ndarray    # (M, 3) a, b, c of [[a, b], [b, c]]
    conic: np.ndarray    # (M, 3)
    J: np.ndarray        # (M, 2, 3)
    cov_cam: np.ndarray  # (M, 3, 3)
    rot: np.ndarray      # (M, 3, 3) world rotation
    color: np.ndarray
    sh_dirs: np.ndarray
    sh_norms: np.ndarray
    sh_basis: np.ndarray
    visible: np.ndarray  # (M,) bool
    rects: np.ndarray    # (M, 4) int32


def prepare_gaussians(scene: Scene, camera: Camera) -> GaussView:
    m = scene.num_gaussians
    Rc = camera.R
    tcam = scene.gauss_pos @ Rc.T + camera.t
    x, y, z = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    front = z > camera.near
    zs = np.where(front, z, 1.0)
    fx, fy = camera.fx, camera.fy
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / (zs * zs)
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / (zs * zs)
    rot = quat_to_matrix(scene.gauss_rot) if m else np.zeros((0, 3, 3))
    M = rot * scene.gauss_scale[:, None, :]
    cov3 = M @ np.transpose(M, (0, 2, 1))
    cov_cam = Rc @ cov3 @ Rc.T
    cov = J @ cov_cam @ np.transpose(J, (0, 2, 1))
    a = cov[:, 0, 0] + COV_BLUR
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_BLUR
    det = a * c - b * b
    ok = front & (det >= MIN_DET)
    dsafe = np.where(ok, det, 1.0)
    conic = np.stack([c / dsafe, -b / dsafe, a / dsafe], axis=-1)
    mean2d = np.stack([fx * x / zs + camera.cx, fy * y / zs + camera.cy], axis=-1)
    # bounding box of the 3.5-sigma ellipse is +-3.5 sqrt(diag)
    rx = CUTOFF_SIGMAS * np.sqrt(np.maximum(a, 0.0))
    ry = CUTOFF_SIGMAS * np.sqrt(np.maximum(c, 0.0))
    x0 = np.maximum(np.floor(mean2d[:, 0] - rx) - 1, 0)
    x1 = np.minimum(np.ceil(mean2d[:, 0] + rx) + 1, camera.width)
    y0 = np.maximum(np.floor(mean2d[:, 1] - ry) - 1, 0)
    y1 = np.minimum(np.ceil(mean2d[:, 1] + ry) + 1, camera.height)
    ok &= (x1 > x0) & (y1 > y0)
    rects = np.zeros((m, 4), dtype=np.int32)
    if m:
        rects[ok] = np.stack([x0, x1, y0, y1], axis=-1)[ok].astype(np.int32)
        color, dirs, norms, Y = sh.eval_color(scene.gauss_sh, scene.gauss_pos, camera.center)
    else:
        color = np.zeros((0, 3))
        dirs, norms, Y = np.zeros((0, 3)), np.zeros(0), np.zeros((0, scene.gauss_sh.shape[1]))
    return GaussView(tcam=tcam, depth=z, mean2d=mean2d, cov2d=np.stack([a, b, c], axis=-1),
                     conic=conic, J=J, cov_cam=cov_cam, rot=rot, color=color, sh_dirs=dirs,
                     sh_norms=norms, sh_basis=Y, visible=ok, rects=rects)


def project_gaussian(g: Gaussian, camera: Camera) -> GaussianSplat | None:
    """Project a single Gaussian; None when it is culled for this camera."""
    scene = Scene.from_primitives(gaussians=[g], sh_degree=sh.degree_from_count(g.sh.shape[0]))
    view = prepare_gaussians(scene, camera)
    if not view.visible[0]:
        return None
    a, b, c = view.cov2d[0]
    return GaussianSplat(depth=float(view.depth[0]), mean2d=view.mean2d[0],
                         cov2d=np.array([[a, b], [b, c]]), color=view.color[0], sigma=g.opacity)


def interval_transmittance(layer_depth, trans, d: float) -> float:
    """Transmittance for a Gaussian at depth d given one pixel's layer depths and ladder.

    T_0 in front of the first layer, T_k between layers k and k+1, T_{L-1}
    beyond; d equal to a layer depth falls into the deeper interval.
    """
    L = len(layer_depth)
    k = 0
    while k < L - 1 and d >= layer_depth[k]:
        k += 1
    return float(trans[k])


def cull_threshold(stack: PeelStack) -> np.ndarray:
    return stack.cull_depth + stack.cull_eps


def _kernel_args(scene: Scene, view: GaussView, stack: PeelStack):
    vis = view.visible
    rects = view.rects.copy()
    rects[~vis] = 0
    return (np.ascontiguousarray(view.mean2d), np.ascontiguousarray(view.conic),
            np.ascontiguousarray(scene.gauss_opacity), np.ascontiguousarray(view.depth),
            np.ascontiguousarray(view.color), rects,
            np.ascontiguousarray(stack.depth), np.ascontiguousarray(stack.trans),
            np.ascontiguousarray(cull_threshold(stack)), CUTOFF_POWER)


def splat_accumulate(scene: Scene, camera: Camera, stack: PeelStack,
                     view: GaussView | None = None, backend: str | None = None) -> AccumBuffers:
    if view is None:
        view = prepare_gaussians(scene, camera)
    H, W = stack.shape
    if scene.num_gaussians == 0:
        return AccumBuffers(np.zeros((H, W, 3)), np.zeros((H, W)))
    cg, wg = kernels.splat_forward(*_kernel_args(scene, view, stack), backend=backend)
    return AccumBuffers(cg, wg)


def splat_backward(scene: Scene, view: GaussView, stack: PeelStack, d_cg, d_wg,
                   trans_grad: bool = True, backend: str | None = None):
    return kernels.splat_backward(*_kernel_args(scene, view, stack),
                                  np.ascontiguousarray(d_cg), np.ascontiguousarray(d_wg),
                                  bool(trans_grad), backend=backend)


def projection_backward(scene: Scene, camera: Camera, view: GaussView,
                        g_mean2d, g_conic, g_color):
    """Chain screen-space gradients back to world position, rotation, scale and SH."""
    vis = view.visible
    g_mean2d = np.where(vis[:, None], g_mean2d, 0.0)
    g_conic = np.where(vis[:, None], g_conic, 0.0)
    A, B, C = view.conic[:, 0], view.conic[:, 1], view.conic[:, 2]
    Q = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    GQ = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    Gcov = -Q @ GQ @ Q
    J = view.J
    g_covcam = np.transpose(J, (0, 2, 1)) @ Gcov @ J
    g_J = 2.0 * Gcov @ J @ view.cov_cam
    Rc = camera.R
    g_cov3 = Rc.T @ g_covcam @ Rc
    s = scene.gauss_scale
    Mmat = view.rot * s[:, None, :]
    g_M = 2.0 * g_cov3 @ Mmat
    g_rotm = g_M * s[:, None, :]
    g_scale = np.sum(g_M * view.rot, axis=1)

    x, y, z = view.tcam[:, 0], view.tcam[:, 1], view.tcam[:, 2]
    zs = np.where(vis, z, 1.0)
    fx, fy = camera.fx, camera.fy
    z2, z3 = zs * zs, zs * zs * zs
    gx = g_J[:, 0, 2] * (-fx / z2) + g_mean2d[:, 0] * fx / zs
    gy = g_J[:, 1, 2] * (-fy / z2) + g_mean2d[:, 1] * fy / zs
    gz = (g_J[:, 0, 0] * (-fx / z2) + g_J[:, 0, 2] * (2.0 * fx * x / z3)
          + g_J[:, 1, 1] * (-fy / z2) + g_J[:, 1, 2] * (2.0 * fy * y / z3)
          - g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2)
    g_tcam = np.stack([gx, gy, gz], axis=-1)
    g_pos = g_tcam @ Rc
    g_sh, g_pos_color = sh.color_backward(scene.gauss_sh, view.sh_dirs, view.sh_norms,
                                          view.sh_basis, g_color)
    return g_pos + g_pos_color, g_rotm, g_scale, g_sh
