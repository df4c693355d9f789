"""Real spherical harmonics color model (degrees 0-3) with its adjoint.

Color = 0.5 + sum_k coeff[k] * Y_k(dir), no clamping, so the map from
coefficients and direction to color is smooth everywhere.
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def degree_from_count(k: int) -> int:
    for d in range(4):
        if (d + 1) ** 2 == k:
            return d
    raise ValueError(f"{k} is not a valid SH coefficient count")


def rgb_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """SH basis values for unit directions (..., 3) -> (..., K)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d Y_k / d dir for (..., 3) directions -> (..., K, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [
            (zero, zero - C1, zero),
            (zero, zero, zero + C1),
            (zero - C1, zero, zero),
        ]
    if degree >= 2:
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2.0 * C2[4] * x, -2.0 * C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (C3[2] * -2.0 * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), C3[2] * 8.0 * y * z),
            (C3[3] * -6.0 * x * z, C3[3] * -6.0 * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            (C3[4] * (4.0 * zz - 3.0 * xx - yy), C3[4] * -2.0 * x * y, C3[4] * 8.0 * x * z),
            (C3[5] * 2.0 * x * z, C3[5] * -2.0 * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * -6.0 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_color(coeffs: np.ndarray, positions: np.ndarray, cam_center: np.ndarray):
    """View-dependent color of each primitive, looking from its center to the camera.

    coeffs (P, K, 3), positions (P, 3). Returns (colors (P, 3), dirs, norms, Y).
    """
    degree = degree_from_count(coeffs.shape[1])
    v = cam_center[None, :] - positions
    norm = np.sqrt(np.sum(v * v, axis=1))
    dirs = v / norm[:, None]
    Y = basis(dirs, degree)
    colors = 0.5 + np.einsum("pk,pkc->pc", Y, coeffs)
    return colors, dirs, norm, Y


def color_backward(coeffs, dirs, norms, Y, d_colors):
    """Adjoint of eval_color: returns (d_coeffs, d_positions)."""
    degree = degree_from_count(coeffs.shape[1])
    d_coeffs = Y[:, :, None] * d_colors[:, None, :]
    if degree == 0:
        return d_coeffs, np.zeros_like(dirs)
    # dL/dY_k = sum_c coeff[k, c] dcolor[c]
    dY = np.einsum("pkc,pc->pk", coeffs, d_colors)
    J = basis_jacobian(dirs, degree)
    d_dir = np.einsum("pk,pkj->pj", dY, J)
    # dir = v / |v|, v = cam - p
    d_v = (d_dir - dirs * np.sum(d_dir * dirs, axis=1, keepdims=True)) / norms[:, None]
    return d_coeffs, -d_v
