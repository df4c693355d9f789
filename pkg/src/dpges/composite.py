"""Final image assembly and the full forward render."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster_surfel import PeelStack, SurfelView, peel, prepare_surfels
from .scene import Camera, Scene
from .splat_gauss import AccumBuffers, GaussView, prepare_gaussians, splat_accumulate


def composite(surfel_color, weight_sum, accum: AccumBuffers) -> np.ndarray:
    denom = weight_sum + accum.weight
    # W_s == 1 and W_G >= 0, so the denominator never drops below one
    assert np.all(denom >= 1.0 - 1e-6), "composite denominator below 1: upstream bug"
    return (surfel_color + accum.color) / denom[..., None]


@dataclass
class Frame:
    """Output of ``render``; doubles as the tape consumed by ``autodiff.backward``."""

    image: np.ndarray
    stack: PeelStack
    accum: AccumBuffers
    scene: Scene
    camera: Camera
    surfels: SurfelView
    gaussians: GaussView
    backend: str | None = None

    def __iter__(self):
        # allows ``image, stack, accum = render(...)``
        return iter((self.image, self.stack, self.accum))


def render(scene: Scene, camera: Camera, layers: int = 3, backend: str | None = None) -> Frame:
    sview = prepare_surfels(scene, camera)
    stack = peel(scene, camera, layers, view=sview, backend=backend)
    gview = prepare_gaussians(scene, camera)
    accum = splat_accumulate(scene, camera, stack, view=gview, backend=backend)
    image = composite(stack.surfel_color, stack.weight_sum, accum)
    return Frame(image=image, stack=stack, accum=accum, scene=scene, camera=camera,
                 surfels=sview, gaussians=gview, backend=backend)


def export_image(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] for presentation; losses always see the unclamped image."""
    return np.clip(image, 0.0, 1.0)
