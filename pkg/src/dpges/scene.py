"""Primitives, cameras, the Scene container and its on-disk format.

A scene file is a small self-describing binary container::

    b"DPGES1\\n" | uint32 LE header length | JSON header | parameter blocks

The header lists counts, SH degree, the opacity modulation ``w``, the
background color, the block dtype and the ordered block table. Blocks are
raw little-endian arrays in table order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sh
from .geometry import quat_to_matrix

MAGIC = b"DPGES1\n"
DEFAULT_W = 30.0
# quaternions further than this from unit length are renormalized on load
QUAT_RENORM_TOL = 1e-12


class SceneError(ValueError):
    """A primitive violates a type invariant."""


class SceneFormatError(ValueError):
    """A scene file or camera file could not be parsed."""


@dataclass
class Surfel:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray
    eps: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = _unit_quat(self.rotation)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(2)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        sh.degree_from_count(self.sh.shape[0])
        if not np.all(self.scale > 0):
            raise SceneError(f"surfel scale must be positive, got {self.scale}")
        if not self.eps >= 0:
            raise SceneError(f"surfel eps must be non-negative, got {self.eps}")


@dataclass
class Gaussian:
    position: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = _unit_quat(self.rotation)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        sh.degree_from_count(self.sh.shape[0])
        if not 0.0 < self.opacity <= 1.0:
            raise SceneError(f"gaussian opacity must be in (0, 1], got {self.opacity}")
        if not np.all(self.scale > 0):
            raise SceneError(f"gaussian scale must be positive, got {self.scale}")


def _unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not n > 0 or not np.isfinite(n):
        raise SceneError(f"degenerate quaternion {q}")
    return q / n


@dataclass
class Camera:
    """Pinhole camera; ``R``, ``t`` map world points to camera space (+z forward)."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise SceneError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Camera-space ray directions (z = 1) through pixel centers, as (dx, dy) grids."""
        dx = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        dy = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        return dx, dy

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width=64, height=64,
                fov_deg=50.0, near=0.01, far=100.0) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(R=R, t=-R @ eye, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, near=near, far=far)

    def to_json(self) -> dict:
        return {
            "R": self.R.tolist(), "t": self.t.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict) -> Camera:
        try:
            return cls(R=d["R"], t=d["t"], fx=float(d["fx"]), fy=float(d["fy"]),
                       cx=float(d["cx"]), cy=float(d["cy"]),
                       width=int(d["width"]), height=int(d["height"]),
                       near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"bad camera record: {exc}") from exc


SURFEL_BLOCKS = ("surfel_pos", "surfel_rot", "surfel_scale", "surfel_sh", "surfel_eps")
GAUSS_BLOCKS = ("gauss_pos", "gauss_opacity", "gauss_rot", "gauss_scale", "gauss_sh")


@dataclass
class Scene:
    """Struct-of-arrays scene: N surfels and M Gaussians."""

    surfel_pos: np.ndarray
    surfel_rot: np.ndarray
    surfel_scale: np.ndarray
    surfel_sh: np.ndarray
    surfel_eps: np.ndarray
    gauss_pos: np.ndarray
    gauss_opacity: np.ndarray
    gauss_rot: np.ndarray
    gauss_scale: np.ndarray
    gauss_sh: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: float = DEFAULT_W
    sh_degree: int = 3

    @classmethod
    def empty(cls, sh_degree: int = 3, background=(0.0, 0.0, 0.0), w: float = DEFAULT_W) -> Scene:
        k = sh.num_coeffs(sh_degree)
        return cls(
            surfel_pos=np.zeros((0, 3)), surfel_rot=np.zeros((0, 4)),
            surfel_scale=np.zeros((0, 2)), surfel_sh=np.zeros((0, k, 3)),
            surfel_eps=np.zeros(0),
            gauss_pos=np.zeros((0, 3)), gauss_opacity=np.zeros(0),
            gauss_rot=np.zeros((0, 4)), gauss_scale=np.zeros((0, 3)),
            gauss_sh=np.zeros((0, k, 3)),
            background=np.asarray(background, dtype=np.float64), w=float(w),
            sh_degree=sh_degree,
        )

    @classmethod
    def from_primitives(cls, surfels=(), gaussians=(), *, sh_degree: int = 3,
                        background=(0.0, 0.0, 0.0), w: float = DEFAULT_W) -> Scene:
        scene = cls.empty(sh_degree, background, w)
        k = sh.num_coeffs(sh_degree)

        def pad(c):
            out = np.zeros((k, 3))
            n = min(k, c.shape[0])
            out[:n] = c[:n]
            return out

        surfels, gaussians = list(surfels), list(gaussians)
        if surfels:
            scene.surfel_pos = np.stack([s.position for s in surfels])
            scene.surfel_rot = np.stack([s.rotation for s in surfels])
            scene.surfel_scale = np.stack([s.scale for s in surfels])
            scene.surfel_sh = np.stack([pad(s.sh) for s in surfels])
            scene.surfel_eps = np.array([s.eps for s in surfels], dtype=np.float64)
        if gaussians:
            scene.gauss_pos = np.stack([g.position for g in gaussians])
            scene.gauss_opacity = np.array([g.opacity for g in gaussians], dtype=np.float64)
            scene.gauss_rot = np.stack([g.rotation for g in gaussians])
            scene.gauss_scale = np.stack([g.scale for g in gaussians])
            scene.gauss_sh = np.stack([pad(g.sh) for g in gaussians])
        scene.validate()
        return scene

    @property
    def num_surfels(self) -> int:
        return self.surfel_pos.shape[0]

    @property
    def num_gaussians(self) -> int:
        return self.gauss_pos.shape[0]

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.surfel_pos[i], self.surfel_rot[i], self.surfel_scale[i],
                      self.surfel_sh[i], float(self.surfel_eps[i]))

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.gauss_pos[i], float(self.gauss_opacity[i]), self.gauss_rot[i],
                        self.gauss_scale[i], self.gauss_sh[i])

    def copy(self) -> Scene:
        kw = {name: getattr(self, name).copy() for name in SURFEL_BLOCKS + GAUSS_BLOCKS}
        return Scene(**kw, background=self.background.copy(), w=self.w, sh_degree=self.sh_degree)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SURFEL_BLOCKS + GAUSS_BLOCKS}

    def select(self, surfel_mask=None, gauss_mask=None) -> Scene:
        out = self.copy()
        if surfel_mask is not None:
            for name in SURFEL_BLOCKS:
                setattr(out, name, getattr(out, name)[surfel_mask])
        if gauss_mask is not None:
            for name in GAUSS_BLOCKS:
                setattr(out, name, getattr(out, name)[gauss_mask])
        return out

    def surfel_axes(self) -> np.ndarray:
        """World-space rotation matrices of the surfels; column 2 is the normal."""
        return quat_to_matrix(self.surfel_rot)

    def validate(self) -> None:
        n, m = self.num_surfels, self.num_gaussians
        k = sh.num_coeffs(self.sh_degree)
        shapes = {
            "surfel_pos": (n, 3), "surfel_rot": (n, 4), "surfel_scale": (n, 2),
            "surfel_sh": (n, k, 3), "surfel_eps": (n,),
            "gauss_pos": (m, 3), "gauss_opacity": (m,), "gauss_rot": (m, 4),
            "gauss_scale": (m, 3), "gauss_sh": (m, k, 3),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise SceneError(f"{name}: expected shape {shape}, got {arr.shape}")
            bad = ~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1) if arr.size else []
            if np.any(bad):
                raise SceneError(f"{name}[{int(np.flatnonzero(bad)[0])}]: non-finite value")
        if not self.w > 0:
            raise SceneError(f"opacity modulation w must be positive, got {self.w}")
        if self.background.shape != (3,):
            raise SceneError("background must be an RGB triple")
        for label, rot in (("surfel", self.surfel_rot), ("gaussian", self.gauss_rot)):
            norms = np.linalg.norm(rot, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
            if bad.size:
                raise SceneError(f"{label} {int(bad[0])}: quaternion norm {norms[bad[0]]} != 1")
        bad = np.flatnonzero(~(self.surfel_scale > 0).all(axis=1))
        if bad.size:
            raise SceneError(f"surfel {int(bad[0])}: scales must be positive")
        bad = np.flatnonzero(~(self.surfel_eps >= 0))
        if bad.size:
            raise SceneError(f"surfel {int(bad[0])}: eps must be non-negative")
        bad = np.flatnonzero(~((self.gauss_opacity > 0) & (self.gauss_opacity <= 1)))
        if bad.size:
            i = int(bad[0])
            raise SceneError(f"gaussian {i}: opacity {self.gauss_opacity[i]} outside (0, 1]")
        bad = np.flatnonzero(~(self.gauss_scale > 0).all(axis=1))
        if bad.size:
            raise SceneError(f"gaussian {int(bad[0])}: scales must be positive")

    def renormalize(self) -> None:
        for name in ("surfel_rot", "gauss_rot"):
            q = getattr(self, name)
            if q.size:
                norms = np.linalg.norm(q, axis=1)
                fix = np.abs(norms - 1.0) > QUAT_RENORM_TOL
                if np.any(norms == 0):
                    raise SceneError(f"{name}[{int(np.flatnonzero(norms == 0)[0])}]: zero quaternion")
                q[fix] = q[fix] / norms[fix, None]


def save_scene(scene: Scene, path: str | os.PathLike, dtype: str = "<f8") -> None:
    """Write ``scene`` to ``path``; float64 blocks make the round trip exact."""
    scene.validate()
    if dtype not in ("<f8", "<f4"):
        raise ValueError("dtype must be '<f8' or '<f4'")
    arrays = scene.arrays()
    header = {
        "version": 1,
        "num_surfels": scene.num_surfels,
        "num_gaussians": scene.num_gaussians,
        "sh_degree": scene.sh_degree,
        "w": scene.w,
        "background": [float(c) for c in scene.background],
        "dtype": dtype,
        "blocks": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(arr, dtype=dtype).tobytes() for arr in arrays.values()]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_scene(path: str | os.PathLike) -> Scene:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise SceneFormatError(f"{path}: not a scene file (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise SceneFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    try:
        header = json.loads(buf[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    pos += hlen
    try:
        dtype = np.dtype(header["dtype"])
        degree = int(header["sh_degree"])
        blocks = header["blocks"]
        background = np.asarray(header["background"], dtype=np.float64)
        w = float(header["w"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: header missing field {exc}") from exc
    arrays = {}
    for name, shape in blocks:
        if name not in SURFEL_BLOCKS + GAUSS_BLOCKS:
            raise SceneFormatError(f"{path}: unknown block {name!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(buf):
            raise SceneFormatError(f"{path}: block {name!r} truncated")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        arrays[name] = arr.astype(np.float64)
        pos += nbytes
    missing = set(SURFEL_BLOCKS + GAUSS_BLOCKS) - set(arrays)
    if missing:
        raise SceneFormatError(f"{path}: missing blocks {sorted(missing)}")
    if pos != len(buf):
        raise SceneFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    scene = Scene(**arrays, background=background, w=w, sh_degree=degree)
    scene.renormalize()
    scene.validate()
    return scene


def load_camera(path: str | os.PathLike) -> Camera:
    try:
        with open(path) as fh:
            return Camera.from_json(json.load(fh))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


def save_camera(camera: Camera, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(camera.to_json(), fh, indent=1)


IMAGE_EXTS = (".pfm", ".ppm")


def load_dataset(directory: str | os.PathLike) -> list[tuple[Camera, np.ndarray]]:
    """Load ``<name>.json`` cameras paired with ``<name>.pfm``/``<name>.ppm`` images."""
    from .imageio import read_image

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    views = []
    for cam_path in sorted(directory.glob("*.json")):
        img_path = next((cam_path.with_suffix(e) for e in IMAGE_EXTS
                         if cam_path.with_suffix(e).exists()), None)
        if img_path is None:
            continue
        cam = load_camera(cam_path)
        img = read_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneFormatError(f"{img_path}: image size {img.shape[:2]} does not match camera")
        views.append((cam, img))
    if not views:
        raise SceneFormatError(f"{directory}: no camera/image pairs found")
    return views


def save_dataset(views, directory: str | os.PathLike, ext: str = ".pfm") -> None:
    from .imageio import write_image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (cam, img) in enumerate(views):
        save_camera(cam, directory / f"view_{i:03d}.json")
        write_image(directory / f"view_{i:03d}{ext}", img)
