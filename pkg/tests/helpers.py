"""Small scene builders shared by the tests."""

import numpy as np

from dpges.geometry import frame_from_normal
from dpges.scene import Gaussian, Scene, Surfel

SH_C0 = 0.28209479177387814


def _dc(color, degree):
    sh = np.zeros(((degree + 1) ** 2, 3))
    sh[0] = (np.asarray(color, float) - 0.5) / SH_C0
    return sh


def facing_surfel(pos, scale=(0.2, 0.2), color=(0.5, 0.5, 0.5), eps=0.1, degree=0):
    """A surfel whose normal points at a camera on the -z axis."""
    sh = _dc(color, degree)
    return Surfel(np.asarray(pos, float), frame_from_normal(np.array([0.0, 0.0, -1.0])),
                  np.asarray(scale, float), sh, eps)


def flat_gaussian(pos, scale=0.05, opacity=0.8, color=(0.5, 0.5, 0.5), degree=0):
    sh = _dc(color, degree)
    return Gaussian(np.asarray(pos, float), opacity, np.array([1.0, 0, 0, 0]),
                    np.full(3, scale), sh)


def scene_of(surfels=(), gaussians=(), background=(0.0, 0.0, 0.0), degree=0):
    return Scene.from_primitives(list(surfels), list(gaussians), sh_degree=degree,
                                 background=background)
