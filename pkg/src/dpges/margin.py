"""Per-surfel depth margins for the Gaussian depth test.

Each surfel starts from eps = 2.5 (sX + sY); the operative margin is the
median of that value over its 16 nearest neighbouring surfels, which keeps
one large surfel from handing a huge margin to a patch of fine ones.
"""

import numpy as np

NEIGHBORS = 16


def initial_margins(scale: np.ndarray) -> np.ndarray:
    return 2.5 * (scale[:, 0] + scale[:, 1])


def knn(query: np.ndarray, points: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the k nearest points to each query, brute force.

    Distance ties break toward the lower index. With ``exclude_self`` the
    query set must be ``points`` and row i never returns i.
    """
    n = points.shape[0]
    d2 = np.sum((query[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
        k = min(k, n - 1)
    else:
        k = min(k, n)
    idx = np.broadcast_to(np.arange(n), d2.shape)
    order = np.lexsort((idx, d2), axis=-1)
    return order[:, :k]


def compute_margins(positions: np.ndarray, scale: np.ndarray, raw: bool = False,
                    neighbors: int = NEIGHBORS) -> np.ndarray:
    """Final margins: median of neighbours' initial margins (``raw`` keeps the initial ones)."""
    eps0 = initial_margins(scale)
    n = positions.shape[0]
    if raw or n <= 1:
        return eps0.copy()
    nb = knn(positions, positions, neighbors, exclude_self=True)
    return np.median(eps0[nb], axis=1)


def update_scene_margins(scene, raw: bool = False) -> None:
    if scene.num_surfels:
        scene.surfel_eps = compute_margins(scene.surfel_pos, scene.surfel_scale, raw=raw)
