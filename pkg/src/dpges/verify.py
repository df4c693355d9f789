"""Property suites behind ``dpges verify``; each returns a Report."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import PARAM_CLASSES, backward
from .composite import render
from .geometry import frame_from_normal
from .margin import initial_margins, knn, update_scene_margins
from .oracle import abuffer_render_surfels, discrete_state, occluded_contribution
from .scene import Camera, Gaussian, Scene, Surfel
from .toys import SHIPPED, bundled_recipe, init_toy, make_cameras

FD_STEP = 1e-4
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7
# finite differences step in the optimizer's coordinates: log for scales,
# logit for opacity, raw values for everything else
LOG_PARAMS = ("surfel_scale", "gauss_scale")
LOGIT_PARAMS = ("gauss_opacity",)


def _shifted(scene: Scene, name: str, idx, delta: float) -> Scene:
    out = scene.copy()
    arr = getattr(out, name)
    v = arr[idx]
    if name in LOG_PARAMS:
        arr[idx] = v * np.exp(delta)
    elif name in LOGIT_PARAMS:
        z = np.log(v) - np.log1p(-v) + delta
        arr[idx] = 1.0 / (1.0 + np.exp(-z))
    else:
        arr[idx] = v + delta
    return out


def _chain(scene: Scene, name: str, idx, g: float) -> float:
    """Analytic gradient in the same coordinates as ``_shifted``."""
    v = float(getattr(scene, name)[idx])
    if name in LOG_PARAMS:
        return g * v
    if name in LOGIT_PARAMS:
        return g * v * (1.0 - v)
    return g


@dataclass
class Report:
    name: str
    passed: bool
    lines: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    seconds: float = 0.0

    def __str__(self):
        head = f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.1f}s)"
        return "\n".join([head] + ["  " + ln for ln in self.lines])


def random_surfel_scene(rng: np.random.Generator, n: int, sh_degree: int = 0) -> Scene:
    k = (sh_degree + 1) ** 2
    surfels = []
    for _ in range(n):
        q = rng.normal(size=4)
        surfels.append(Surfel(rng.uniform(-1, 1, 3) * [1.0, 1.0, 0.6], q / np.linalg.norm(q),
                              rng.uniform(0.02, 0.25, 2), rng.normal(0, 0.4, (k, 3)), eps=0.05))
    return Scene.from_primitives(surfels, sh_degree=sh_degree,
                                 background=rng.uniform(0, 1, 3))


def default_camera(size: int = 64, distance: float = 3.0, fov: float = 50.0) -> Camera:
    return Camera.look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0], width=size, height=size,
                          fov_deg=fov, near=0.05, far=20.0)


# --------------------------------------------------------------------------
# peel / A-buffer equivalence


def compare_peel(scene: Scene, camera: Camera, layers: int = 3) -> list[str]:
    """Field-by-field differences between peeled layers and the A-buffer's first fragments."""
    st = render(scene, camera, layers).stack
    ab = abuffer_render_surfels(scene, camera)
    H, W = camera.height, camera.width
    F = ab.ids.shape[-1]
    take = min(layers, F)
    ids = np.full((H, W, layers), -1, np.int32)
    ids[..., :take] = ab.ids[..., :take]
    present = ids >= 0
    problems = []
    if not np.array_equal(ids, st.ids):
        problems.append(f"ids differ at {int(np.sum(ids != st.ids))} entries")
        return problems
    for name, ref, got in (("depth", ab.depth, st.depth), ("alpha", ab.alpha, st.alpha),
                           ("r2", ab.r2, st.r2)):
        r = np.zeros((H, W, layers))
        r[..., :take] = ref[..., :take]
        if not np.array_equal(np.where(present, r, 0), np.where(present, got, 0)):
            problems.append(f"{name} differs (max {np.max(np.abs(np.where(present, r - got, 0))):.3g})")
    cnt = np.minimum(ab.count, layers)
    if not np.array_equal(cnt, st.layer_count):
        problems.append("layer counts differ")
    return problems


def verify_peel(n_scenes: int = 50, seed: int = 0, size: int = 64, max_surfels: int = 500) -> Report:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cam = default_camera(size)
    bad = []
    for i in range(n_scenes):
        scene = random_surfel_scene(rng, int(rng.integers(1, max_surfels + 1)))
        probs = compare_peel(scene, cam)
        if probs:
            bad.append(f"scene {i}: " + "; ".join(probs))
    rep = Report("peel", not bad, bad or [f"{n_scenes} scenes match the sorted A-buffer exactly"])
    rep.seconds = time.perf_counter() - t0
    return rep


def weight_sum_error(scene: Scene, camera: Camera, dtype=np.float64) -> float:
    """Largest |W_s - 1| with the layer weights summed explicitly in ``dtype``."""
    st = render(scene, camera).stack
    A = st.alpha.astype(dtype)
    T = np.ones(A.shape[:2], dtype=dtype)
    ws = np.zeros(A.shape[:2], dtype=dtype)
    for k in range(A.shape[2]):
        ws = ws + A[..., k] * T
        T = T * (dtype(1) - A[..., k])
    ws = ws + T
    return float(np.max(np.abs(ws.astype(np.float64) - 1.0)))


# --------------------------------------------------------------------------
# order independence


def verify_order(permutations: int = 20, seed: int = 0, scenes=None) -> Report:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    lines, worst = [], 0.0
    for name, scene, cam in scenes or shipped_scenes():
        if scene.num_gaussians == 0:
            continue
        ref = render(scene, cam).image
        for _ in range(permutations):
            perm = rng.permutation(scene.num_gaussians)
            img = render(scene.select(gauss_mask=perm), cam).image
            rel = float(np.max(np.abs(img - ref) / np.maximum(np.abs(ref), 1e-12)))
            worst = max(worst, rel)
        lines.append(f"{name}: worst relative difference {worst:.3g}")
    rep = Report("order", worst <= 1e-6, lines, {"worst": worst})
    rep.seconds = time.perf_counter() - t0
    return rep


def shipped_scenes():
    for name in SHIPPED:
        r = bundled_recipe(name)
        yield name, init_toy(r), make_cameras(r["cameras"])[0]


# --------------------------------------------------------------------------
# gradients


def micro_scene(rng: np.random.Generator, sh_degree: int = 1) -> Scene:
    """Three surfels and five Gaussians arranged so rings, cores and culling all occur."""
    k = (sh_degree + 1) ** 2
    surfels = []
    for i in range(3):
        n = rng.normal(size=3)
        n[2] = -abs(n[2]) - 1.5
        q = frame_from_normal(n) + rng.normal(0, 0.05, 4)
        surfels.append(Surfel(rng.uniform(-0.3, 0.3, 3) * [1, 1, 0.5], q / np.linalg.norm(q),
                              rng.uniform(0.08, 0.15, 2), rng.normal(0, 0.3, (k, 3)),
                              eps=float(rng.uniform(0.02, 0.3))))
    gauss = []
    for _ in range(5):
        q = rng.normal(size=4)
        gauss.append(Gaussian(rng.uniform(-0.4, 0.4, 3), float(rng.uniform(0.3, 0.9)),
                              q / np.linalg.norm(q), rng.uniform(0.03, 0.1, 3),
                              rng.normal(0, 0.3, (k, 3))))
    return Scene.from_primitives(surfels, gauss, sh_degree=sh_degree,
                                 background=rng.uniform(0, 0.5, 3))


class LinearProbe:
    """Smooth scalar loss: fixed random linear functionals of every differentiable output."""

    def __init__(self, rng, shape, layers=3):
        H, W = shape
        self.gi = rng.normal(size=(H, W, 3))
        self.gs = rng.normal(size=(H, W, 3))
        self.gt = rng.normal(size=(H, W, layers + 1))

    def __call__(self, frame) -> float:
        st = frame.stack
        return float(np.sum(self.gi * frame.image) + np.sum(self.gs * st.surfel_color)
                     + np.sum(self.gt * st.trans))

    def grads(self, frame, trans_grad=True):
        return backward(frame, self.gi, d_surfel_color=self.gs, d_trans=self.gt,
                        trans_grad=trans_grad)


def grad_check_scene(scene: Scene, camera: Camera, probe: LinearProbe, h: float = FD_STEP,
                     max_per_class: int | None = None, rng=None):
    """Per-class (worst error, checked, skipped); error is min(rel, abs-scaled) vs tolerance."""
    frame = render(scene, camera)
    g = probe.grads(frame)
    base = discrete_state(frame)
    out = {}
    for name in PARAM_CLASSES:
        arr = getattr(scene, name)
        idxs = list(np.ndindex(arr.shape))
        if max_per_class is not None and len(idxs) > max_per_class:
            pick = (rng or np.random.default_rng(0)).choice(len(idxs), max_per_class, replace=False)
            idxs = [idxs[i] for i in sorted(pick)]
        worst, checked, skipped = 0.0, 0, 0
        fails = []
        for idx in idxs:
            if _near_boundary(scene, camera, name, idx, 10 * h, base):
                skipped += 1
                continue
            plus, minus = _shifted(scene, name, idx, h), _shifted(scene, name, idx, -h)
            fd = (probe(render(plus, camera)) - probe(render(minus, camera))) / (2 * h)
            an = _chain(scene, name, idx, float(getattr(g, name)[idx]))
            err = abs(fd - an)
            score = min(err / max(abs(fd), 1e-300) / GRAD_RTOL, err / GRAD_ATOL)
            if score > 1.0:
                fails.append((idx, fd, an))
            worst = max(worst, score)
            checked += 1
        out[name] = {"score": worst, "checked": checked, "skipped": skipped, "fails": fails}
    return out


def _near_boundary(scene, camera, name, idx, delta, base) -> bool:
    for s in (delta, -delta):
        if discrete_state(render(_shifted(scene, name, idx, s), camera)) != base:
            return True
    return False


def verify_grad(n_scenes: int = 20, seed: int = 0, size: int = 24,
                max_per_class: int | None = 8) -> Report:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.2, 0.1, -3.0], [0, 0, 0], width=size, height=size, fov_deg=30)
    per_class = {n: {"score": 0.0, "checked": 0, "skipped": 0, "fails": []} for n in PARAM_CLASSES}
    for _ in range(n_scenes):
        scene = micro_scene(rng)
        probe = LinearProbe(rng, (size, size))
        res = grad_check_scene(scene, cam, probe, max_per_class=max_per_class, rng=rng)
        for n, r in res.items():
            acc = per_class[n]
            acc["score"] = max(acc["score"], r["score"])
            acc["checked"] += r["checked"]
            acc["skipped"] += r["skipped"]
            acc["fails"] += r["fails"]
    ok = all(v["score"] <= 1.0 and v["checked"] > 0 for v in per_class.values())
    lines = [f"{n}: worst error/tolerance {v['score']:.3g} over {v['checked']} params "
             f"({v['skipped']} near a discrete boundary)" for n, v in per_class.items()]
    rep = Report("grad", ok, lines, per_class)
    rep.seconds = time.perf_counter() - t0
    return rep


# --------------------------------------------------------------------------
# margins and leakage


def verify_leakage() -> Report:
    t0 = time.perf_counter()
    r = bundled_recipe("margin-outlier")
    scene = init_toy(r)
    cam = make_cameras(r["cameras"])[0]
    eps0 = initial_margins(scene.surfel_scale)
    nb = knn(scene.surfel_pos, scene.surfel_pos, 16, exclude_self=True)
    median_ok = np.array_equal(scene.surfel_eps, np.median(eps0[nb], axis=1))
    raw = scene.copy()
    update_scene_margins(raw, raw=True)
    leak_median = occluded_contribution(render(scene, cam))
    leak_raw = occluded_contribution(render(raw, cam))
    ok = bool(median_ok and np.all(leak_median == 0) and np.any(leak_raw > 0))
    outlier = int(np.argmax(eps0))
    lines = [
        f"outlier surfel {outlier}: raw eps {eps0[outlier]:.3g}, median eps {scene.surfel_eps[outlier]:.3g}",
        f"final margins equal neighbourhood medians: {median_ok}",
        f"occluded Gaussian weight with median eps: {leak_median.sum():.6g}",
        f"occluded Gaussian weight with raw eps: {leak_raw.sum():.6g}",
    ]
    rep = Report("leakage", ok, lines,
                 {"median": leak_median, "raw": leak_raw, "median_ok": median_ok})
    rep.seconds = time.perf_counter() - t0
    return rep


def transmittance_mechanism(steps: int = 200, free=("surfel_pos",), lr_position: float = 1.6e-4,
                            layers: int = 3) -> Report:
    """Optimize the two-surfel overlap on the transmittance loss alone.

    Passes when the share of pixels with zero final transmittance strictly
    grows and the loss gradient vanishes wherever fewer than two layers exist.
    """
    from .losses import loss_transmittance
    from .trainer import Adam, TrainConfig, apply_gradients

    t0 = time.perf_counter()
    r = bundled_recipe("two-surfel")
    scene = init_toy(r)
    cam = make_cameras(r["cameras"])[0]
    cfg = TrainConfig()
    lrs = {"position": lr_position, "scale": cfg.lr_scale, "rotation": cfg.lr_rotation,
           "opacity": cfg.lr_opacity, "color": cfg.lr_color,
           "color_rest_ratio": cfg.lr_color_rest_ratio}
    frozen = tuple(n for n in PARAM_CLASSES if n not in free)

    def area(sc):
        return float(np.mean(render(sc, cam, layers).stack.trans[..., layers] == 0))

    # mask probe: single-layer pixels carry loss value but no gradient
    frame = render(scene, cam, layers)
    _, g_t = loss_transmittance(frame.stack)
    single = frame.stack.layer_count < 2
    probe_ok = bool(np.all(g_t[single] == 0) and np.any(frame.stack.trans[single][:, layers] < 1)
                    and np.any(g_t[~single] != 0))
    apart = scene.copy()
    apart.surfel_pos[:, 0] *= 20.0
    af = render(apart, cam, layers)
    _, g_apart = loss_transmittance(af.stack)
    no_overlap_ok = bool(np.all(af.stack.layer_count < 2)
                         and backward(af, None, d_trans=g_apart).max_abs() == 0.0)

    before = area(scene)
    opt = Adam(cfg.adam_betas, cfg.adam_eps)
    for _ in range(steps):
        f = render(scene, cam, layers)
        _, g_t = loss_transmittance(f.stack)
        apply_gradients(scene, backward(f, d_trans=g_t, frozen=frozen), opt, lrs)
    after = area(scene)
    ok = after > before and probe_ok and no_overlap_ok
    lines = [f"zero-transmittance area {before:.4f} -> {after:.4f} after {steps} steps "
             f"(free: {', '.join(free)})",
             f"gradient masked on single-layer pixels: {probe_ok}",
             f"no overlap gives zero parameter gradient: {no_overlap_ok}"]
    rep = Report("transmittance", ok, lines, {"before": before, "after": after, "scene": scene})
    rep.seconds = time.perf_counter() - t0
    return rep


SUITES = {
    "peel": verify_peel,
    "order": verify_order,
    "grad": verify_grad,
    "leakage": verify_leakage,
}


def run_suites(names, seed: int = 0) -> list[Report]:
    out = []
    for n in names:
        fn = SUITES[n]
        out.append(fn() if n == "leakage" else fn(seed=seed))
    return out


