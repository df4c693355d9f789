"""Depth-peeled surfels with sort-free Gaussian splatting."""

from .scene import Camera, Gaussian, Scene, Surfel, load_scene, save_scene

__version__ = "0.1.0"

__all__ = ["Camera", "Gaussian", "Scene", "Surfel", "load_scene", "save_scene"]
