"""Training losses; every function returns (value, gradient w.r.t. its input)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import ssim_grad

LAMBDA_SCALE_BOUNDED = 1e-5
LAMBDA_SCALE_UNBOUNDED = 5e-5


@dataclass
class LossWeights:
    surfel: float = 0.01          # L_s
    scale: float = LAMBDA_SCALE_BOUNDED
    transmittance: float = 0.08   # L_t
    depth: float = 0.1            # L_sd
    normal: float = 0.05          # L_sn
    depth_normal: float = 0.05    # L_sdn
    geometry_reg_enabled: bool = False
    ssim_weight: float = 0.2
    per_axis_scale_norm: bool = False

    def __post_init__(self):
        for name in ("surfel", "scale", "transmittance", "depth", "normal", "depth_normal",
                     "ssim_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    @classmethod
    def for_scene(cls, unbounded: bool = False, **kw) -> LossWeights:
        scale = LAMBDA_SCALE_UNBOUNDED if unbounded else LAMBDA_SCALE_BOUNDED
        return cls(scale=scale, **kw)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")


def l1(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_rgb(image, target, ssim_weight: float = 0.2):
    """(1 - w) L1 + w (1 - SSIM)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check(image, target)
    v1, g1 = l1(image, target)
    s, gs = ssim_grad(image, target)
    value = (1.0 - ssim_weight) * v1 + ssim_weight * (1.0 - s)
    return value, (1.0 - ssim_weight) * g1 - ssim_weight * gs


def loss_surfel(surfel_color, target):
    return l1(surfel_color, target)


def loss_scale(scale, per_axis: bool = False):
    """Mean of exp of the mean-normalized surfel scale; gradient flows through the mean."""
    s = np.asarray(scale, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(s)
    if per_axis:
        m = s.mean(axis=0)
        st = s / m
        e = np.exp(0.5 * (st[:, 0] + st[:, 1]))
        value = float(e.mean())
        g_st = np.stack([0.5 * e / n, 0.5 * e / n], axis=-1)
        # st_ij = s_ij / m_j, m_j = mean_i s_ij
        g = g_st / m - np.sum(g_st * s, axis=0) / (m * m) / n
        return value, g
    a = 0.5 * (s[:, 0] + s[:, 1])
    m = a.mean()
    e = np.exp(a / m)
    value = float(e.mean())
    g_a = e / (n * m) - np.sum(e * a) / (n * n * m * m)
    return value, np.stack([0.5 * g_a, 0.5 * g_a], axis=-1)


def loss_transmittance(stack):
    """Mean (1 - T_L)^2 over all pixels; gradient masked where fewer than 2 layers exist."""
    L = stack.layers
    T = stack.trans[..., L]
    hw = T.size
    value = float(np.sum((1.0 - T) ** 2) / hw)
    g = np.zeros_like(stack.trans)
    g[..., L] = np.where(stack.layer_count >= 2, -2.0 * (1.0 - T) / hw, 0.0)
    return value, g


def depth_to_normal(depth, camera, coverage=None):
    """Camera-space normals from a depth map by central differences of back-projected points.

    Returns (normals (H, W, 3), valid mask, cache for the adjoint). Border
    pixels and pixels next to uncovered ones are invalid.
    """
    rx, ry = camera.rays()
    H, W = depth.shape
    rays = np.stack(np.broadcast_arrays(rx[None, :], ry[:, None], np.ones((H, W))), axis=-1)
    P = depth[..., None] * rays
    a = np.zeros((H, W, 3))
    b = np.zeros((H, W, 3))
    a[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    b[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(b, a)
    norm = np.linalg.norm(c, axis=-1)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = True
    if coverage is not None:
        cov = np.asarray(coverage, dtype=bool)
        valid[1:-1, 1:-1] &= (cov[1:-1, 1:-1] & cov[1:-1, 2:] & cov[1:-1, :-2]
                              & cov[2:, 1:-1] & cov[:-2, 1:-1])
    valid &= norm > 0
    n = np.where(valid[..., None], c / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    return n, valid, (a, b, n, norm, rays)


def depth_to_normal_backward(cache, g_n, valid):
    a, b, n, norm, rays = cache
    H, W = valid.shape
    g_n = np.where(valid[..., None], g_n, 0.0)
    g_c = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / np.where(norm > 0, norm, 1.0)[..., None]
    g_a = np.cross(g_c, b)
    g_b = np.cross(a, g_c)
    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += g_a[1:-1, 1:-1]
    gP[1:-1, :-2] -= g_a[1:-1, 1:-1]
    gP[2:, 1:-1] += g_b[1:-1, 1:-1]
    gP[:-2, 1:-1] -= g_b[1:-1, 1:-1]
    return np.sum(gP * rays, axis=-1)


@dataclass
class GeometryTerms:
    value: float
    depth: float
    normal: float
    depth_normal: float
    d_depth: np.ndarray = field(repr=False)
    d_normal: np.ndarray = field(repr=False)


def loss_geometry(depth, normal, ref_depth, ref_normal, camera, weights: LossWeights,
                  coverage=None) -> GeometryTerms:
    """lambda_sd L1(depth) + lambda_sn (1 - N_ref . N) + lambda_sdn (1 - N_ref . normal(depth)).

    The normal terms average over pixels where the reference is defined.
    """
    H, W = depth.shape
    hw = H * W
    diff = depth - ref_depth
    l_sd = float(np.mean(np.abs(diff)))
    g_depth = weights.depth * np.sign(diff) / hw

    ref_ok = np.linalg.norm(ref_normal, axis=-1) > 0
    cnt = max(int(ref_ok.sum()), 1)
    dots = np.sum(ref_normal * normal, axis=-1)
    l_sn = float(np.sum(np.where(ref_ok, 1.0 - dots, 0.0)) / cnt)
    g_normal = weights.normal * np.where(ref_ok[..., None], -ref_normal, 0.0) / cnt

    n_d, valid, cache = depth_to_normal(depth, camera, coverage)
    valid &= ref_ok
    cnt2 = max(int(valid.sum()), 1)
    dots2 = np.sum(ref_normal * n_d, axis=-1)
    l_sdn = float(np.sum(np.where(valid, 1.0 - dots2, 0.0)) / cnt2)
    g_nd = np.where(valid[..., None], -ref_normal, 0.0) / cnt2
    g_depth = g_depth + weights.depth_normal * depth_to_normal_backward(cache, g_nd, valid)

    value = weights.depth * l_sd + weights.normal * l_sn + weights.depth_normal * l_sdn
    return GeometryTerms(value, l_sd, l_sn, l_sdn, g_depth, g_normal)


@dataclass
class LossResult:
    total: float
    terms: dict
    d_image: np.ndarray
    d_surfel_color: np.ndarray
    d_trans: np.ndarray
    d_scale: np.ndarray
    d_depth: np.ndarray | None = None
    d_normal: np.ndarray | None = None


def total_loss(frame, target, weights: LossWeights, supervision=None) -> LossResult:
    """All terms for one rendered view. ``supervision`` is (ref_depth, ref_normal) or None."""
    from .autodiff import blend_geometry

    rgb, d_img = loss_rgb(frame.image, target, weights.ssim_weight)
    ls, d_cs = loss_surfel(frame.stack.surfel_color, target)
    lscale, d_scale = loss_scale(frame.scene.surfel_scale, weights.per_axis_scale_norm)
    lt, d_tr = loss_transmittance(frame.stack)
    total = rgb + weights.surfel * ls + weights.scale * lscale + weights.transmittance * lt
    terms = {"rgb": rgb, "surfel": ls, "scale": lscale, "transmittance": lt}
    res = LossResult(total=total, terms=terms, d_image=d_img, d_surfel_color=weights.surfel * d_cs,
                     d_trans=weights.transmittance * d_tr, d_scale=weights.scale * d_scale)
    if weights.geometry_reg_enabled and supervision is not None:
        depth, normal = blend_geometry(frame.stack)
        geo = loss_geometry(depth, normal, supervision[0], supervision[1], frame.camera, weights,
                            coverage=frame.stack.layer_count > 0)
        terms.update(geo_depth=geo.depth, geo_normal=geo.normal, geo_depth_normal=geo.depth_normal)
        res.total += geo.value
        res.d_depth, res.d_normal = geo.d_depth, geo.d_normal
    terms["total"] = res.total
    return res
