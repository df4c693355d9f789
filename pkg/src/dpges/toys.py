"""Synthetic scene recipes, their deterministic construction, and toy datasets.

A recipe is plain JSON: analytic surfaces that surfels are laid on,
a Gaussian sampling block and a camera rig. ``init_toy`` turns it into a
Scene; ``make_toy`` also renders ground-truth views.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from . import sh
from .composite import export_image, render
from .geometry import frame_from_normal, quat_to_matrix
from .margin import update_scene_margins
from .scene import Camera, Scene, save_dataset, save_scene


def _surfel_block(positions, normals, scales, colors, k):
    n = len(positions)
    rot = np.stack([frame_from_normal(nm) for nm in normals]) if n else np.zeros((0, 4))
    shc = np.zeros((n, k, 3))
    if n:
        shc[:, 0, :] = sh.rgb_to_dc(colors)
    return np.asarray(positions, float).reshape(n, 3), rot, np.asarray(scales, float).reshape(n, 2), shc


def _color(spec, rng, n):
    base = np.asarray(spec.get("color", [0.5, 0.5, 0.5]), dtype=np.float64)
    jit = float(spec.get("color_jitter", 0.0))
    cols = base[None, :] + rng.uniform(-jit, jit, size=(n, 3))
    return np.clip(cols, 0.0, 1.0)


def _plane(spec, rng):
    c = np.asarray(spec["center"], float)
    nrm = np.asarray(spec.get("normal", [0, 0, -1]), float)
    nrm /= np.linalg.norm(nrm)
    R = quat_to_matrix(frame_from_normal(nrm))
    ex, ey = spec.get("extent", [1.0, 1.0])
    nx, ny = spec.get("grid", [4, 4])
    us = (np.arange(nx) + 0.5) / nx - 0.5
    vs = (np.arange(ny) + 0.5) / ny - 0.5
    pts = [c + ex * u * R[:, 0] + ey * v * R[:, 1] for v in vs for u in us]
    n = len(pts)
    s = spec.get("scale", [0.5 * ex / nx, 0.5 * ey / ny])
    s = np.broadcast_to(np.asarray(s, float), (n, 2))
    return np.array(pts), np.repeat(nrm[None], n, 0), s, _color(spec, rng, n)


def _sphere(spec, rng):
    c = np.asarray(spec["center"], float)
    r = float(spec["radius"])
    n = int(spec["count"])
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)
    default = r * math.sqrt(4 * math.pi / n) * 0.35
    s = np.broadcast_to(np.asarray(spec.get("scale", [default, default]), float), (n, 2))
    return c + r * dirs, dirs, s, _color(spec, rng, n)


def _box(spec, rng):
    c = np.asarray(spec["center"], float)
    size = np.asarray(spec["size"], float)
    g = int(spec.get("grid", 3))
    parts = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            nrm = np.zeros(3)
            nrm[axis] = sign
            a, b = [j for j in range(3) if j != axis]
            face = dict(spec, center=(c + sign * 0.5 * size[axis] * nrm).tolist(),
                        normal=nrm.tolist(), extent=[size[a], size[b]], grid=[g, g])
            face.pop("scale", None)
            if "scale" in spec:
                face["scale"] = spec["scale"]
            parts.append(_plane(face, rng))
    return tuple(np.concatenate(x) for x in zip(*parts))


def _explicit(spec, rng):
    pos = np.asarray(spec["position"], float)[None]
    nrm = np.asarray(spec.get("normal", [0, 0, -1]), float)[None]
    s = np.asarray(spec.get("scale", [0.1, 0.1]), float)[None]
    return pos, nrm, s, _color(spec, rng, 1)


_BUILDERS = {"plane": _plane, "sphere": _sphere, "box": _box, "surfel": _explicit}


def init_toy(recipe: dict, seed: int | None = None) -> Scene:
    """Build a Scene from a recipe; deterministic given the seed."""
    seed = recipe.get("seed", 0) if seed is None else seed
    rng = np.random.default_rng(seed)
    degree = int(recipe.get("sh_degree", 3))
    k = sh.num_coeffs(degree)
    scene = Scene.empty(sh_degree=degree, background=recipe.get("background", [0, 0, 0]),
                        w=float(recipe.get("w", 30.0)))
    blocks = []
    for spec in recipe.get("surfels", []):
        if spec["type"] not in _BUILDERS:
            raise ValueError(f"unknown surface type {spec['type']!r}")
        blocks.append(_BUILDERS[spec["type"]](spec, rng))
    if blocks:
        pos, nrm, s, col = (np.concatenate(x) for x in zip(*blocks))
        jitter = float(recipe.get("jitter", 0.0))
        if jitter > 0:
            # jitter stays in the surface plane so analytic geometry is preserved
            off = rng.uniform(-jitter, jitter, size=pos.shape)
            off -= nrm * np.sum(off * nrm, axis=1, keepdims=True)
            pos = pos + off
        p, r, sc, shc = _surfel_block(pos, nrm, s, col, k)
        scene.surfel_pos, scene.surfel_rot, scene.surfel_scale, scene.surfel_sh = p, r, sc, shc
        scene.surfel_eps = np.zeros(len(p))
        vd = float(recipe.get("view_dependence", 0.0))
        if vd > 0 and k > 1:
            scene.surfel_sh[:, 1:, :] = rng.normal(0, vd, size=(len(p), k - 1, 3))
    _add_gaussians(scene, recipe.get("gaussians"), rng, k)
    update_scene_margins(scene, raw=bool(recipe.get("raw_epsilon", False)))
    scene.validate()
    return scene


def _add_gaussians(scene: Scene, spec, rng, k):
    if not spec:
        return
    if isinstance(spec, list):
        items = spec
        m = len(items)
        pos = np.array([g["position"] for g in items], float)
        scale = np.array([np.broadcast_to(g.get("scale", 0.05), 3) for g in items], float)
        opac = np.array([g.get("opacity", 0.8) for g in items], float)
        col = np.array([g.get("color", [0.5, 0.5, 0.5]) for g in items], float)
        rot = np.tile([1.0, 0, 0, 0], (m, 1))
    else:
        m = int(spec.get("count", 0))
        if m == 0:
            return
        n = scene.num_surfels
        offset = float(spec.get("offset", 0.05))
        lo, hi = spec.get("scale", [0.02, 0.06])
        if n:
            host = rng.integers(0, n, size=m)
            R = quat_to_matrix(scene.surfel_rot[host])
            su, sv = rng.uniform(-1, 1, size=(2, m))
            spread = 2.0 * scene.surfel_scale[host]
            pos = (scene.surfel_pos[host] + R[:, :, 0] * (su * spread[:, 0])[:, None]
                   + R[:, :, 1] * (sv * spread[:, 1])[:, None]
                   - R[:, :, 2] * rng.uniform(0.0, offset, size=m)[:, None])
        else:
            pos = rng.uniform(-0.5, 0.5, size=(m, 3))
        scale = rng.uniform(lo, hi, size=(m, 3))
        opac = rng.uniform(*spec.get("opacity", [0.4, 0.9]), size=m)
        col = rng.uniform(0.1, 0.9, size=(m, 3))
        q = rng.normal(size=(m, 4))
        rot = q / np.linalg.norm(q, axis=1, keepdims=True)
    shc = np.zeros((m, k, 3))
    shc[:, 0, :] = sh.rgb_to_dc(col)
    scene.gauss_pos, scene.gauss_scale, scene.gauss_opacity = pos, scale, opac
    scene.gauss_rot, scene.gauss_sh = rot, shc


def make_cameras(rig: dict) -> list[Camera]:
    n = int(rig.get("count", 8))
    r = float(rig.get("radius", 3.0))
    target = np.asarray(rig.get("target", [0, 0, 0]), float)
    arc = math.radians(float(rig.get("arc", 60.0)))
    elev = math.radians(float(rig.get("elevation", 10.0)))
    cams = []
    for i in range(n):
        az = -0.5 * arc + (arc * i / (n - 1) if n > 1 else 0.5 * arc)
        el = elev * (1.0 if i % 2 == 0 else -1.0)
        eye = target + r * np.array([math.sin(az) * math.cos(el), math.sin(el),
                                     -math.cos(az) * math.cos(el)])
        cams.append(Camera.look_at(eye, target, width=int(rig.get("width", 64)),
                                   height=int(rig.get("height", 64)),
                                   fov_deg=float(rig.get("fov", 40.0)),
                                   near=float(rig.get("near", 0.05)),
                                   far=float(rig.get("far", 50.0))))
    return cams


def render_views(scene: Scene, cameras, layers: int = 3):
    return [(cam, render(scene, cam, layers).image) for cam in cameras]


def perturb_scene(scene: Scene, seed: int, *, position=0.02, scale=0.15,
                  gauss_position=0.3, rotation=0.05) -> Scene:
    """A random starting point near ``scene``: geometry jittered, all colors and opacities redrawn.

    Gaussian position noise is relative to each Gaussian's mean scale.
    """
    rng = np.random.default_rng(seed)
    out = scene.copy()
    n, m = out.num_surfels, out.num_gaussians
    out.surfel_pos = out.surfel_pos + rng.normal(0, position, size=(n, 3))
    out.surfel_scale = out.surfel_scale * np.exp(rng.normal(0, scale, size=(n, 2)))
    q = out.surfel_rot + rng.normal(0, rotation, size=(n, 4))
    out.surfel_rot = q / np.linalg.norm(q, axis=1, keepdims=True)
    out.surfel_sh = np.zeros_like(out.surfel_sh)
    out.surfel_sh[:, 0, :] = sh.rgb_to_dc(rng.uniform(0.2, 0.8, size=(n, 3)))
    ms = out.gauss_scale.mean(axis=1, keepdims=True)
    out.gauss_pos = out.gauss_pos + rng.normal(0, 1, size=(m, 3)) * gauss_position * ms
    out.gauss_scale = out.gauss_scale * np.exp(rng.normal(0, scale, size=(m, 3)))
    q = out.gauss_rot + rng.normal(0, rotation, size=(m, 4))
    out.gauss_rot = q / np.linalg.norm(q, axis=1, keepdims=True)
    out.gauss_opacity = rng.uniform(0.3, 0.9, size=m)
    out.gauss_sh = np.zeros_like(out.gauss_sh)
    out.gauss_sh[:, 0, :] = sh.rgb_to_dc(rng.uniform(0.2, 0.8, size=(m, 3)))
    update_scene_margins(out)
    return out


BUNDLED: dict[str, dict] = {
    "overlap-rings": {
        "name": "overlap-rings", "seed": 1, "sh_degree": 0, "background": [0.0, 0.0, 0.0],
        "surfels": [
            {"type": "surfel", "position": [x, y, 0.08 * i], "normal": [0, 0, -1],
             "scale": [0.13, 0.13], "color": c}
            for i, (x, y, c) in enumerate([
                (-0.28, -0.12, [0.9, 0.2, 0.2]), (0.02, -0.18, [0.2, 0.9, 0.2]),
                (0.3, -0.05, [0.2, 0.2, 0.9]), (-0.15, 0.22, [0.9, 0.9, 0.2]),
                (0.15, 0.2, [0.2, 0.9, 0.9]), (0.0, 0.02, [0.9, 0.2, 0.9]),
            ])
        ],
        "gaussians": None,
        "cameras": {"count": 4, "radius": 3.0, "arc": 20.0, "elevation": 5.0, "fov": 30.0},
    },
    "plane-grid": {
        "name": "plane-grid", "seed": 2, "sh_degree": 1, "background": [0.0, 0.0, 0.0],
        "jitter": 0.01,
        "surfels": [{"type": "plane", "center": [0, 0, 0.5], "normal": [0, 0, -1],
                     "extent": [3.0, 3.0], "grid": [6, 6], "scale": [0.12, 0.12],
                     "color": [0.5, 0.5, 0.5], "color_jitter": 0.3}],
        "gaussians": {"count": 24, "offset": 0.1, "scale": [0.03, 0.08]},
        "cameras": {"count": 8, "radius": 3.0, "arc": 30.0, "elevation": 5.0, "fov": 35.0},
    },
    "sphere": {
        "name": "sphere", "seed": 3, "sh_degree": 1, "background": [0.1, 0.1, 0.1],
        "surfels": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.6, "count": 100,
                     "color": [0.7, 0.5, 0.3], "color_jitter": 0.2}],
        "gaussians": {"count": 32, "offset": 0.05, "scale": [0.02, 0.05]},
        "cameras": {"count": 8, "radius": 3.0, "arc": 90.0, "elevation": 15.0, "fov": 40.0},
    },
    "occluder-box": {
        "name": "occluder-box", "seed": 4, "sh_degree": 1, "background": [0.0, 0.0, 0.0],
        "surfels": [
            {"type": "box", "center": [0, 0, 0], "size": [0.6, 0.6, 0.6], "grid": 3,
             "color": [0.8, 0.3, 0.2], "color_jitter": 0.1},
            {"type": "plane", "center": [0, 0, 1.2], "normal": [0, 0, -1], "extent": [3.0, 3.0],
             "grid": [6, 6], "scale": [0.12, 0.12], "color": [0.3, 0.4, 0.8], "color_jitter": 0.1},
        ],
        "gaussians": [
            {"position": [0.0, 0.0, 0.5], "scale": 0.08, "opacity": 0.9, "color": [1.0, 1.0, 0.0]},
            {"position": [0.6, 0.3, -0.2], "scale": 0.05, "opacity": 0.8, "color": [0.0, 1.0, 0.0]},
        ],
        "cameras": {"count": 8, "radius": 3.0, "arc": 40.0, "elevation": 10.0, "fov": 40.0},
    },
    "margin-outlier": {
        # one large surfel among fine ones; its opaque core is the third layer
        # behind two semi-transparent rings, with a Gaussian just behind it
        "name": "margin-outlier", "seed": 5, "sh_degree": 0, "background": [0.0, 0.0, 0.0],
        "surfels": [
            {"type": "surfel", "position": [-0.26, 0.0, 0.0], "normal": [0, 0, -1],
             "scale": [0.08, 0.08], "color": [0.9, 0.2, 0.2]},
            {"type": "surfel", "position": [0.26, 0.0, 0.2], "normal": [0, 0, -1],
             "scale": [0.08, 0.08], "color": [0.2, 0.9, 0.2]},
            {"type": "surfel", "position": [0.0, 0.0, 1.0], "normal": [0, 0, -1],
             "scale": [1.2, 1.2], "color": [0.3, 0.3, 0.8]},
            {"type": "plane", "center": [0.0, 0.0, 1.05], "normal": [0, 0, -1],
             "extent": [1.2, 1.2], "grid": [4, 4], "scale": [0.08, 0.08],
             "color": [0.5, 0.5, 0.5]},
        ],
        "gaussians": [
            {"position": [0.0, 0.0, 2.0], "scale": 0.06, "opacity": 0.9, "color": [1.0, 1.0, 0.0]},
        ],
        "cameras": {"count": 1, "radius": 3.0, "arc": 0.0, "elevation": 0.0, "fov": 30.0},
    },
    "two-surfel": {
        "name": "two-surfel", "seed": 6, "sh_degree": 0, "background": [0.0, 0.0, 0.0],
        "surfels": [
            {"type": "surfel", "position": [-0.3, 0.0, 0.0], "normal": [0, 0, -1],
             "scale": [0.2, 0.2], "color": [0.9, 0.3, 0.2]},
            {"type": "surfel", "position": [0.3, 0.0, 0.05], "normal": [0, 0, -1],
             "scale": [0.2, 0.2], "color": [0.2, 0.3, 0.9]},
        ],
        "gaussians": None,
        "cameras": {"count": 1, "radius": 3.0, "arc": 0.0, "elevation": 0.0, "fov": 40.0},
    },
    "self-fit": {
        "name": "self-fit", "seed": 7, "sh_degree": 1, "background": [0.05, 0.05, 0.1],
        "surfels": [
            {"type": "surfel", "position": [-0.3, -0.3, 0.0], "normal": [0.1, 0.05, -1],
             "scale": [0.25, 0.2], "color": [0.8, 0.3, 0.2]},
            {"type": "surfel", "position": [0.3, -0.25, 0.25], "normal": [-0.1, 0.1, -1],
             "scale": [0.2, 0.25], "color": [0.2, 0.7, 0.3]},
            {"type": "surfel", "position": [-0.25, 0.3, 0.5], "normal": [0.05, -0.1, -1],
             "scale": [0.25, 0.25], "color": [0.3, 0.3, 0.8]},
            {"type": "surfel", "position": [0.3, 0.3, 0.75], "normal": [0, 0, -1],
             "scale": [0.22, 0.2], "color": [0.8, 0.8, 0.3]},
        ],
        "gaussians": {"count": 32, "offset": 0.15, "scale": [0.04, 0.1], "opacity": [0.5, 0.9]},
        "cameras": {"count": 8, "radius": 3.0, "arc": 40.0, "elevation": 8.0, "fov": 35.0},
    },
}

SHIPPED = ("overlap-rings", "plane-grid", "sphere", "occluder-box")


def bundled_recipe(name: str) -> dict:
    if name not in BUNDLED:
        raise KeyError(f"unknown toy {name!r}; have {sorted(BUNDLED)}")
    return copy.deepcopy(BUNDLED[name])


def make_toy(name_or_recipe, out_dir, layers: int = 3, seed: int | None = None):
    """Write recipe.json, the ground-truth scene and rendered views to ``out_dir``."""
    recipe = bundled_recipe(name_or_recipe) if isinstance(name_or_recipe, str) else name_or_recipe
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = init_toy(recipe, seed)
    cams = make_cameras(recipe.get("cameras", {}))
    views = render_views(scene, cams, layers)
    with open(out / "recipe.json", "w") as fh:
        json.dump(recipe, fh, indent=1)
    save_scene(scene, out / "scene_gt.dpges")
    save_dataset(views, out / "views", ext=".pfm")
    save_dataset([(c, export_image(img)) for c, img in views], out / "views_ppm", ext=".ppm")
    return scene, views
