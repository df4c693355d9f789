"""Joint optimization of surfels and Gaussians against posed images."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import sh
from .autodiff import PARAM_CLASSES, backward
from .composite import render
from .geometry import quat_to_matrix
from .losses import LossWeights, total_loss
from .margin import knn, update_scene_margins
from .scene import Scene, save_scene

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-4
MIN_OPACITY = 1e-6
SPLIT_FACTOR = 1.6
SPLIT_RATIO = 2.0


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    iterations: int = 25000
    layers: int = 3
    seed: int = 0
    # learning rates; position decays exponentially to lr_position_final
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_color_rest_ratio: float = 1.0 / 20.0
    spatial_scale: float | None = None   # None: camera rig radius
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    # ablations
    trans_grad_off: bool = False
    no_Ls: bool = False
    no_Lscale: bool = False
    no_Lt: bool = False
    no_split: bool = False
    raw_epsilon: bool = False
    # maintenance
    split_every: int = 2000
    eps_recompute: tuple = (0, 4000)
    prune_every: int = 1000
    prune_small: float = 20.0
    prune_occluded: float = 0.05
    max_gaussians: int = 20000
    densify_every: int = 500
    densify_from: int = 500
    densify_until: int | None = None
    densify_k: int = 128
    checkpoint_every: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.layers not in (2, 3, 4):
            raise ValueError(f"layers must be 2, 3 or 4, got {self.layers}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        self.eps_recompute = tuple(self.eps_recompute)

    def loss_weights(self) -> LossWeights:
        w = LossWeights(**asdict(self.weights))
        if self.no_Ls:
            w.surfel = 0.0
        if self.no_Lscale:
            w.scale = 0.0
        if self.no_Lt:
            w.transmittance = 0.0
        return w

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected moment updates on the optimizer-space parameter blocks."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def begin_step(self):
        self.step_count += 1

    def update(self, name: str, value: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
        m = self.m.get(name)
        if m is None or m.shape != value.shape:
            m = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
        v = self.v[name]
        m = self.b1 * m + (1.0 - self.b1) * grad
        v = self.b2 * v + (1.0 - self.b2) * grad * grad
        self.m[name], self.v[name] = m, v
        t = self.step_count
        mhat = m / (1.0 - self.b1 ** t)
        vhat = v / (1.0 - self.b2 ** t)
        return value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def reindex(self, prefix: str, keep: np.ndarray, added: int = 0):
        """Keep rows ``keep`` of every state block starting with ``prefix`` and append zero rows."""
        for store in (self.m, self.v):
            for name in list(store):
                if name.startswith(prefix):
                    a = store[name][keep]
                    if added:
                        a = np.concatenate([a, np.zeros((added,) + a.shape[1:])])
                    store[name] = a


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_gradients(scene: Scene, grads, opt: Adam, lrs: dict) -> None:
    """One moment-based step. Scales live in log space, opacity in logit space."""
    opt.begin_step()
    for name in PARAM_CLASSES:
        g = getattr(grads, name)
        if g is None or g.size == 0:
            continue
        x = getattr(scene, name)
        if name.endswith("_scale"):
            logs = np.log(x)
            new = opt.update(name, logs, g * x, lrs["scale"])
            setattr(scene, name, np.maximum(np.exp(new), SCALE_FLOOR))
        elif name == "gauss_opacity":
            p = np.clip(x, MIN_OPACITY, 1.0 - 1e-12)
            new = opt.update(name, _logit(p), g * p * (1.0 - p), lrs["opacity"])
            setattr(scene, name, np.clip(_sigmoid(new), MIN_OPACITY, 1.0))
        elif name.endswith("_sh"):
            lr = np.full((1, x.shape[1], 1), lrs["color"] * lrs["color_rest_ratio"])
            lr[:, 0] = lrs["color"]
            setattr(scene, name, opt.update(name, x, g, lr))
        elif name.endswith("_rot"):
            setattr(scene, name, opt.update(name, x, g, lrs["rotation"]))
        else:
            setattr(scene, name, opt.update(name, x, g, lrs["position"]))
    scene.surfel_rot = _normalize_rows(scene.surfel_rot)
    scene.gauss_rot = _normalize_rows(scene.gauss_rot)


def _normalize_rows(q):
    if q.size == 0:
        return q
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# maintenance


@dataclass
class CoverageStats:
    """Per-surfel first-layer pixel coverage and fragment totals over a view sweep."""

    first_layer: np.ndarray
    fragments: np.ndarray
    views: int = 0

    @classmethod
    def zeros(cls, n: int) -> CoverageStats:
        return cls(np.zeros(n), np.zeros(n))

    def add(self, stack) -> None:
        n = self.first_layer.shape[0]
        ids = stack.ids[..., 0]
        self.first_layer += np.bincount(ids[ids >= 0], minlength=n)[:n]
        self.fragments += stack.surfel_frags[:n]
        self.views += 1


def prune_mask(stats: CoverageStats, small: float = 20.0, occluded: float = 0.05) -> np.ndarray:
    """Boolean keep-mask; at least one surfel always survives."""
    cov, frags = stats.first_layer, stats.fragments
    n = cov.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    ratio = np.divide(cov, frags, out=np.zeros(n), where=frags > 0)
    keep = (cov >= small) & (ratio >= occluded)
    if not keep.any():
        keep[int(np.argmax(cov))] = True
    return keep


def prune_surfels(scene: Scene, stats: CoverageStats, small: float = 20.0,
                  occluded: float = 0.05) -> tuple[Scene, np.ndarray]:
    keep = prune_mask(stats, small, occluded)
    return scene.select(surfel_mask=keep), keep


def gaussian_neighbor_eps(scene: Scene, k: int = 16) -> np.ndarray:
    """Average margin of the k nearest surfels of each Gaussian."""
    if scene.num_surfels == 0 or scene.num_gaussians == 0:
        return np.full(scene.num_gaussians, np.inf)
    nb = knn(scene.gauss_pos, scene.surfel_pos, k)
    return scene.surfel_eps[nb].mean(axis=1)


def split_large_gaussians(scene: Scene, rng: np.random.Generator,
                          max_gaussians: int | None = None) -> tuple[Scene, np.ndarray, int]:
    """Split every Gaussian whose mean scale exceeds twice its neighbourhood margin.

    Each flagged parent becomes two children drawn from its own density with
    scale divided by 1.6 and the same opacity. Returns (scene, keep mask over
    the old Gaussians, number of appended Gaussians).
    """
    m = scene.num_gaussians
    flagged = np.flatnonzero(scene.gauss_scale.mean(axis=1) > SPLIT_RATIO * gaussian_neighbor_eps(scene))
    if max_gaussians is not None:
        flagged = flagged[:max(0, max_gaussians - m)]
    keep = np.ones(m, dtype=bool)
    if flagged.size == 0:
        return scene, keep, 0
    keep[flagged] = False
    R = quat_to_matrix(scene.gauss_rot[flagged])
    s = scene.gauss_scale[flagged]
    children = []
    for _ in range(2):
        z = rng.normal(size=s.shape) * s
        children.append(scene.gauss_pos[flagged] + np.einsum("nij,nj->ni", R, z))
    out = scene.select(gauss_mask=keep)
    rep = lambda a: np.concatenate([a, a])  # noqa: E731
    out.gauss_pos = np.concatenate([out.gauss_pos] + children)
    out.gauss_scale = np.concatenate([out.gauss_scale, rep(s / SPLIT_FACTOR)])
    out.gauss_rot = np.concatenate([out.gauss_rot, rep(scene.gauss_rot[flagged])])
    out.gauss_opacity = np.concatenate([out.gauss_opacity, rep(scene.gauss_opacity[flagged])])
    out.gauss_sh = np.concatenate([out.gauss_sh, rep(scene.gauss_sh[flagged])])
    return out, keep, 2 * flagged.size


def densify_gaussians(scene: Scene, camera, error_image: np.ndarray, target: np.ndarray,
                      stack, max_gaussians: int, k: int = 128) -> tuple[Scene, int]:
    """Spawn small Gaussians at the worst pixels, placed at the culling depth."""
    budget = max_gaussians - scene.num_gaussians
    err = np.asarray(error_image, dtype=np.float64)
    if err.ndim == 3:
        err = err.mean(axis=-1)
    flat = err.ravel()
    k = min(k, budget, int(np.count_nonzero(flat > 0)))
    if k <= 0:
        return scene, 0
    order = np.argsort(-flat, kind="stable")[:k]
    ys, xs = np.unravel_index(order, err.shape)
    d = stack.cull_depth[ys, xs]
    fallback_d = stack.depth[ys, xs, 0]
    have_layer = stack.layer_count[ys, xs] > 0
    typical = _typical_depth(scene, camera, stack)
    d = np.where(np.isfinite(d), d, np.where(have_layer, fallback_d, typical))
    footprint = 0.5 * d / camera.fx
    # sitting exactly on d_s would put the new Gaussian behind the opaque
    # layer (ties go to the deeper interval), so pull it forward by its scale
    d = d - footprint
    rx, ry = camera.rays()
    pc = np.stack([rx[xs] * d, ry[ys] * d, d], axis=-1)
    pw = (pc - camera.t) @ camera.R
    shc = np.zeros((k,) + scene.gauss_sh.shape[1:])
    shc[:, 0, :] = sh.rgb_to_dc(np.asarray(target, np.float64)[ys, xs])
    out = scene.copy()
    out.gauss_pos = np.concatenate([out.gauss_pos, pw])
    out.gauss_scale = np.concatenate([out.gauss_scale, np.repeat(footprint[:, None], 3, 1)])
    out.gauss_rot = np.concatenate([out.gauss_rot, np.tile([1.0, 0.0, 0.0, 0.0], (k, 1))])
    out.gauss_opacity = np.concatenate([out.gauss_opacity, np.full(k, 0.5)])
    out.gauss_sh = np.concatenate([out.gauss_sh, shc])
    return out, k


def _typical_depth(scene, camera, stack):
    covered = stack.layer_count > 0
    if covered.any():
        return float(np.median(stack.depth[..., 0][covered]))
    if scene.num_gaussians:
        z = scene.gauss_pos @ camera.R[2] + camera.t[2]
        z = z[z > camera.near]
        if z.size:
            return float(np.median(z))
    return float(np.linalg.norm(camera.center)) or 1.0


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    scene: Scene
    log: list = field(default_factory=list)


def _param_stats(scene: Scene) -> dict:
    out = {}
    for name, a in scene.arrays().items():
        a = np.asarray(a, dtype=np.float64)
        out[name] = {
            "shape": list(a.shape),
            "nonfinite": int(np.size(a) - np.count_nonzero(np.isfinite(a))),
            "min": float(np.nanmin(a)) if a.size else None,
            "max": float(np.nanmax(a)) if a.size else None,
        }
    return out


def _spatial_scale(cameras) -> float:
    centers = np.array([c.center for c in cameras])
    r = float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1))) * 1.1
    return r if r > 0 else 1.0


def train(scene: Scene, dataset, config: TrainConfig | None = None, *, out_dir=None,
          backend: str | None = None, callback=None) -> TrainResult:
    """Optimize ``scene`` against ``dataset`` (a list of (camera, image) pairs).

    The input scene is not modified. With ``out_dir`` set, checkpoints and
    the CSV log are written there, plus a JSON dump if training aborts.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    scene = scene.copy()
    scene.validate()
    if config.iterations == 0:
        return TrainResult(scene, [])

    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights()
    opt = Adam(config.adam_betas, config.adam_eps)
    spatial = config.spatial_scale or _spatial_scale([c for c, _ in dataset])
    until = config.densify_until if config.densify_until is not None else config.iterations // 2
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump(config.to_json(), fh, indent=1)

    stats = CoverageStats.zeros(scene.num_surfels)
    last_sweep = None
    order = rng.permutation(len(dataset))
    cursor = 0
    rows = []
    for it in range(config.iterations):
        if it in config.eps_recompute:
            update_scene_margins(scene, raw=config.raw_epsilon)
        if cursor == len(order):
            last_sweep, stats = stats, CoverageStats.zeros(scene.num_surfels)
            order = rng.permutation(len(dataset))
            cursor = 0
        vi = int(order[cursor])
        cursor += 1
        cam, target = dataset[vi]

        frame = render(scene, cam, config.layers, backend=backend)
        res = total_loss(frame, target, weights)
        if not math.isfinite(res.total):
            dump = {"iteration": it, "view": vi, "terms": {k: float(v) for k, v in res.terms.items()},
                    "camera": cam.to_json(), "params": _param_stats(scene)}
            if out:
                with open(out / "abort_dump.json", "w") as fh:
                    json.dump(dump, fh, indent=1)
            raise TrainingError(f"non-finite loss at iteration {it} (view {vi})", dump)
        stats.add(frame.stack)

        grads = backward(frame, res.d_image, d_surfel_color=res.d_surfel_color,
                         d_trans=res.d_trans, d_depth=res.d_depth, d_normal=res.d_normal,
                         trans_grad=not config.trans_grad_off)
        grads.surfel_scale = grads.surfel_scale + res.d_scale
        frac = it / max(config.iterations - 1, 1)
        lr_pos = math.exp((1 - frac) * math.log(config.lr_position)
                          + frac * math.log(config.lr_position_final)) * spatial
        lrs = {"position": lr_pos, "scale": config.lr_scale, "rotation": config.lr_rotation,
               "opacity": config.lr_opacity, "color": config.lr_color,
               "color_rest_ratio": config.lr_color_rest_ratio}
        apply_gradients(scene, grads, opt, lrs)

        row = {"iteration": it, "view": vi}
        row.update({k: float(v) for k, v in res.terms.items()})
        rows.append(row)
        if callback is not None:
            callback(it, scene, row)

        step = it + 1
        # maintenance events
        if (config.prune_every and step % config.prune_every == 0 and last_sweep is not None
                and last_sweep.first_layer.shape[0] == scene.num_surfels):
            scene, keep = prune_surfels(scene, last_sweep, config.prune_small, config.prune_occluded)
            if not keep.all():
                log.info("iteration %d: pruned %d surfels", step, int((~keep).sum()))
                opt.reindex("surfel_", keep)
                stats = CoverageStats(stats.first_layer[keep], stats.fragments[keep], stats.views)
                last_sweep = None
        if not config.no_split and config.split_every and step % config.split_every == 0:
            scene, keep, added = split_large_gaussians(scene, rng, config.max_gaussians)
            if added:
                log.info("iteration %d: split %d Gaussians", step, added // 2)
                opt.reindex("gauss_", keep, added)
        if (config.densify_every and config.densify_from <= step <= until
                and step % config.densify_every == 0 and scene.num_gaussians < config.max_gaussians):
            err = np.abs(frame.image - target)
            before = scene.num_gaussians
            scene, added = densify_gaussians(scene, cam, err, target, frame.stack,
                                             config.max_gaussians, config.densify_k)
            if added:
                opt.reindex("gauss_", np.arange(before), added)
        if out and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_scene(scene, out / f"checkpoint_{step:06d}.dpges")
    if out:
        write_log(rows, out / "train_log.csv")
    return TrainResult(scene, rows)


def write_log(rows, path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
