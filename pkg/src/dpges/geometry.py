"""Quaternion and rotation helpers shared by the surfel and Gaussian paths.

Quaternions are stored (w, x, y, z). The forward pass normalizes raw
quaternions, so gradients are taken with respect to the raw 4-vectors.
"""

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from raw quaternions (..., 4)."""
    qn = quat_normalize(q)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    R = np.empty(qn.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given dL/dR (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2.0 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2.0 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
                - 2.0 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
                + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2])
    dy = 2.0 * (-2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
                + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
                + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2])
    dz = 2.0 * (-2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
                + w * g[..., 1, 0] - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2]
                + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # projection through q / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation maps local +z onto the unit normal n."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return matrix_to_quat(np.stack([t, b, n], axis=1))
