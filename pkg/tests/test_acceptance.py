"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are also collected and
shown together in the terminal summary.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dpges import cli
from dpges.composite import render
from dpges.metrics import psnr
from dpges.oracle import sorted_full_render
from dpges.scene import Camera
from dpges.toys import bundled_recipe, init_toy, make_cameras, perturb_scene, render_views
from dpges.trainer import TrainConfig, gaussian_neighbor_eps, split_large_gaussians, train
from dpges.verify import (random_surfel_scene, shipped_scenes, transmittance_mechanism,
                          verify_grad, verify_leakage, verify_order, verify_peel,
                          weight_sum_error)


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_01_peel_matches_abuffer():
    t0 = time.perf_counter()
    rep = verify_peel(n_scenes=50, size=64, max_surfels=500)
    secs = time.perf_counter() - t0
    report(1, rep.passed and secs < 60, f"50 scenes field-exact: {rep.passed}, {secs:.1f}s")


def test_02_weight_identity():
    rng = np.random.default_rng(2)
    cam = Camera.look_at([0.3, 0.2, -3.0], [0, 0, 0], width=64, height=64, fov_deg=45)
    cases = [(n, s, c) for n, s, c in shipped_scenes()]
    cases += [(f"random{i}", random_surfel_scene(rng, 200), cam) for i in range(5)]
    e32 = max(weight_sum_error(s, c, np.float32) for _, s, c in cases)
    e64 = max(weight_sum_error(s, c, np.float64) for _, s, c in cases)
    report(2, e32 <= 1e-6 and e64 <= 1e-12,
           f"max |W_s - 1| float32 {e32:.2e}, float64 {e64:.2e} over {len(cases)} scenes")


def test_03_order_independence():
    rep = verify_order(permutations=20)
    report(3, rep.passed, f"20 permutations, worst relative difference {rep.data['worst']:.2e}")


def test_04_gradients():
    rep = verify_grad(n_scenes=20)
    worst = max(v["score"] for v in rep.data.values())
    fewest = min(v["checked"] for v in rep.data.values())
    report(4, rep.passed and rep.seconds < 300,
           f"worst error/tolerance {worst:.3f}, fewest checks per class {fewest}, "
           f"{rep.seconds:.1f}s")


@pytest.fixture(scope="module")
def self_fit():
    recipe = bundled_recipe("self-fit")
    hidden = init_toy(recipe)
    views = render_views(hidden, make_cameras(recipe["cameras"]))
    start = perturb_scene(hidden, 11)
    out = {}
    for off in (False, True):
        cfg = TrainConfig(iterations=3000, densify_every=0, prune_every=0, split_every=0,
                          checkpoint_every=0, trans_grad_off=off)
        res = train(start, views, cfg)
        out[off] = {"psnr": float(np.mean([psnr(render(res.scene, c).image, im)
                                           for c, im in views])),
                    "log": res.log}
    return out


@pytest.mark.slow
def test_05_self_consistency(self_fit):
    full, off = self_fit[False]["psnr"], self_fit[True]["psnr"]
    report(5, full >= 35.0 and off < full,
           f"train PSNR {full:.3f} dB, transmittance gradient off {off:.3f} dB")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="transmittance loss keeps a floor of about 0.06 "
                   "because uncovered background pixels never reach zero transmittance")
def test_self_fit_loss_drops_below_tenth(self_fit):
    log = self_fit[False]["log"]
    assert log[-1]["total"] < 0.1 * log[0]["total"]


FULL_COVER = {
    "name": "full-cover", "seed": 9, "sh_degree": 1, "background": [0.1, 0.1, 0.1],
    "surfels": [
        {"type": "plane", "center": [0, 0, 0], "extent": [1.5, 1.5], "grid": [3, 3],
         "scale": [0.05, 0.05], "color": [0.8, 0.3, 0.2], "color_jitter": 0.1},
        {"type": "plane", "center": [0.25, 0.25, 0.3], "extent": [1.5, 1.5], "grid": [3, 3],
         "scale": [0.05, 0.05], "color": [0.2, 0.7, 0.3], "color_jitter": 0.1},
        # one wide backdrop whose opaque core fills every view
        {"type": "plane", "center": [0, 0, 1.0], "extent": [1.0, 1.0], "grid": [1, 1],
         "scale": [3.0, 3.0], "color": [0.3, 0.4, 0.8]},
    ],
    "gaussians": {"count": 24, "offset": 0.3, "scale": [0.03, 0.08], "opacity": [0.5, 0.9]},
    "cameras": {"count": 4, "radius": 3.0, "arc": 20.0, "elevation": 5.0, "fov": 35.0},
}


def test_06_layer_count():
    recipe = bundled_recipe("overlap-rings")
    scene = init_toy(recipe)
    mae = {2: [], 3: []}
    for cam in make_cameras(recipe["cameras"]):
        ref = sorted_full_render(scene, cam)
        for n in mae:
            mae[n].append(np.abs(render(scene, cam, n).image - ref).mean())
    m2, m3 = float(np.mean(mae[2])), float(np.mean(mae[3]))

    cover = init_toy(FULL_COVER)
    covered, d34 = True, 0.0
    for cam in make_cameras(FULL_COVER["cameras"]):
        f3, f4 = render(cover, cam, 3), render(cover, cam, 4)
        covered &= bool(np.all(f3.stack.trans[..., 3] == 0))
        d34 = max(d34, float(np.abs(f3.image - f4.image).mean()))
    report(6, m2 >= 2 * m3 and covered and d34 < 1e-3,
           f"MAE vs A-buffer 2 layers {m2:.4f}, 3 layers {m3:.4f}; "
           f"full-coverage 4 vs 3 layers {d34:.2e}")


def test_07_transmittance_mechanism():
    rep = transmittance_mechanism()
    report(7, rep.passed,
           f"zero-transmittance area {rep.data['before']:.4f} -> {rep.data['after']:.4f}, "
           f"single-layer mask and no-overlap probes hold: {rep.passed}")


def test_08_margin_leakage():
    rep = verify_leakage()
    report(8, rep.passed,
           f"median margins exact: {rep.data['median_ok']}, occluded weight "
           f"median eps {rep.data['median'].sum():.3g}, raw eps {rep.data['raw'].sum():.3g}")


def test_09_split_oversized():
    recipe = {"seed": 3, "sh_degree": 0,
              "surfels": [{"type": "plane", "center": [0, 0, 0.5], "extent": [1.0, 1.0],
                           "grid": [4, 4], "scale": [0.06, 0.06]}],
              "gaussians": [{"position": [x, 0.1, 0.45], "scale": 0.01} for x in (-0.2, 0.0, 0.2)]}
    scene = init_toy(recipe)
    limit = 2 * gaussian_neighbor_eps(scene)
    scene.gauss_scale[1] = 1.05 * limit[1]
    before = scene.num_gaussians
    out, _, _ = split_large_gaussians(scene, np.random.default_rng(0))
    over = out.gauss_scale.mean(axis=1) > 2 * gaussian_neighbor_eps(out)
    report(9, out.num_gaussians == before + 1 and not over.any(),
           f"count {before} -> {out.num_gaussians}, over threshold after: {int(over.sum())}")


def test_10_determinism(tmp_path):
    data = tmp_path / "toy"
    assert cli.run(["make-toy", "self-fit", "--out", str(data)]) == 0
    cfg = tmp_path / "cfg.json"
    config = TrainConfig(iterations=120, densify_from=40, densify_every=40, prune_every=60,
                         split_every=50, checkpoint_every=60)
    cfg.write_text(json.dumps(config.to_json()))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"{run}.dpges"
        assert cli.run(["train", "--scene", str(data / "scene_init.dpges"),
                        "--images", str(data / "views"), "--config", str(cfg), "--seed", "5",
                        "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    report(10, outs[0] == outs[1], f"two CLI train runs, {len(outs[0])} bytes each, identical")
