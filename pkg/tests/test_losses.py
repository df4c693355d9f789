import math

import numpy as np
import pytest

from dpges.autodiff import backward
from dpges.composite import render
from dpges.losses import (LossWeights, depth_to_normal, l1, loss_geometry, loss_rgb, loss_scale,
                          loss_surfel, loss_transmittance, total_loss)
from dpges.metrics import ssim
from dpges.raster_surfel import peel
from dpges.scene import Surfel
from dpges.geometry import frame_from_normal
from helpers import _dc, facing_surfel, scene_of


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (f(p) - f(m)) / (2 * h)
    return g


def test_rgb_loss_zero_on_match(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    assert loss_rgb(img, img)[0] == pytest.approx(0.0, abs=1e-12)


def test_rgb_loss_constant_offset():
    gt = np.full((16, 16, 3), 0.4)
    value, _ = loss_rgb(gt + 0.1, gt)
    assert l1(gt + 0.1, gt)[0] * 0.8 == pytest.approx(0.08)
    assert value == pytest.approx(0.08 + 0.2 * (1 - ssim(gt + 0.1, gt)))


def test_rgb_loss_symmetric(rng):
    a, b = rng.uniform(0, 1, (2, 12, 12, 3))
    assert loss_rgb(a, b)[0] == pytest.approx(loss_rgb(b, a)[0], rel=1e-12)


def test_rgb_loss_gradient(rng):
    a, b = rng.uniform(0, 1, (2, 6, 7, 3))
    _, g = loss_rgb(a, b)
    np.testing.assert_allclose(g, fd(lambda x: loss_rgb(x, b)[0], a), rtol=1e-5, atol=1e-9)


def test_rgb_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rgb(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_surfel_loss(rng):
    a, b = rng.uniform(0, 1, (2, 8, 8, 3))
    assert loss_surfel(a, a)[0] == 0.0
    assert loss_surfel(a + 0.5, a)[0] == pytest.approx(0.5)
    assert loss_surfel(a, b)[0] == pytest.approx(np.abs(a - b).mean())


def test_scale_loss_identical_scales():
    assert loss_scale(np.full((7, 2), 0.3))[0] == pytest.approx(math.e)
    assert loss_scale(np.array([[0.01, 0.9]]))[0] == pytest.approx(math.e)


def test_scale_loss_scale_invariant(rng):
    s = rng.uniform(0.01, 1, (20, 2))
    assert loss_scale(2 * s)[0] == pytest.approx(loss_scale(s)[0], rel=1e-12)
    assert loss_scale(2 * s, per_axis=True)[0] == pytest.approx(loss_scale(s, per_axis=True)[0])


@pytest.mark.parametrize("per_axis", [False, True])
def test_scale_loss_gradient_through_mean(rng, per_axis):
    s = rng.uniform(0.05, 1, (6, 2))
    _, g = loss_scale(s, per_axis)
    np.testing.assert_allclose(g, fd(lambda x: loss_scale(x, per_axis)[0], s), rtol=1e-6,
                               atol=1e-10)


def test_transmittance_loss_all_opaque(camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(5.0, 5.0))])
    frame = render(sc, camera)
    assert np.all(frame.stack.trans[..., 3] == 0)
    value, g_t = loss_transmittance(frame.stack)
    assert value == 1.0
    # one layer per pixel: the mask removes every gradient
    assert np.all(g_t == 0)
    # stacked opaque layers: gradient reaches the ladder but the core blocks geometry
    sc = scene_of([facing_surfel([0, 0, 0], scale=(5.0, 5.0)),
                   facing_surfel([0, 0, 0.2], scale=(5.0, 5.0))])
    frame = render(sc, camera)
    value, g_t = loss_transmittance(frame.stack)
    assert value == 1.0
    g = backward(frame, None, d_trans=g_t)
    assert g.max_abs() == 0.0


def test_transmittance_loss_empty(camera):
    st = peel(scene_of(), camera)
    value, g = loss_transmittance(st)
    assert value == 0.0 and np.all(g == 0)


def test_transmittance_loss_single_pixel():
    from types import SimpleNamespace
    H = W = 4
    trans = np.ones((H, W, 4))
    trans[1, 2, 1:] = [0.9, 0.7, 0.5]
    count = np.zeros((H, W), dtype=np.int32)
    count[1, 2] = 3
    st = SimpleNamespace(layers=3, trans=trans, layer_count=count)
    value, g = loss_transmittance(st)
    assert value == pytest.approx(0.25 / (H * W))
    nz = np.argwhere(g != 0)
    assert nz.tolist() == [[1, 2, 3]]
    assert g[1, 2, 3] == pytest.approx(-2 * 0.5 / (H * W))


def test_geometry_zero_when_consistent(camera):
    depth = np.full((32, 32), 3.0)
    normal, valid, _ = depth_to_normal(depth, camera)
    w = LossWeights(geometry_reg_enabled=True)
    geo = loss_geometry(depth, normal, depth, normal, camera, w)
    assert geo.depth == 0.0
    assert geo.normal == pytest.approx(0.0, abs=1e-12)
    assert geo.depth_normal == pytest.approx(0.0, abs=1e-12)


def test_geometry_orthogonal_normals(camera):
    depth = np.full((32, 32), 3.0)
    n = np.zeros((32, 32, 3))
    n[..., 2] = -1
    ref = np.zeros((32, 32, 3))
    ref[..., 0] = 1
    geo = loss_geometry(depth, n, depth, ref, camera, LossWeights())
    assert geo.normal == 1.0


def test_plane_depth_to_normal_matches_analytic(camera):
    nrm = np.array([0.3, -0.2, -1.0])
    s = Surfel(np.zeros(3), frame_from_normal(nrm), np.array([5.0, 5.0]), _dc((1, 1, 1), 0), 0.1)
    st = peel(scene_of([s]), camera)
    depth = st.depth[..., 0]
    n_cam = camera.R @ (nrm / np.linalg.norm(nrm))
    ref = np.broadcast_to(n_cam, (32, 32, 3)).copy()
    n_d, valid, _ = depth_to_normal(depth, camera)
    geo = loss_geometry(depth, ref, depth, ref, camera, LossWeights())
    assert valid.sum() == 30 * 30
    assert geo.depth_normal < 1e-3


def test_geometry_gradient(rng, camera):
    from dpges.scene import Camera
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], width=7, height=6, fov_deg=40.0)
    depth = 3.0 + rng.uniform(-0.1, 0.1, (6, 7))
    ref_d = 3.0 + rng.uniform(-0.1, 0.1, (6, 7))
    ref_n = rng.normal(size=(6, 7, 3))
    ref_n /= np.linalg.norm(ref_n, axis=-1, keepdims=True)
    normal = rng.normal(size=(6, 7, 3))
    w = LossWeights(geometry_reg_enabled=True)
    geo = loss_geometry(depth, normal, ref_d, ref_n, cam, w)
    num = fd(lambda d: loss_geometry(d, normal, ref_d, ref_n, cam, w).value, depth)
    np.testing.assert_allclose(geo.d_depth, num, rtol=1e-5, atol=1e-9)
    num_n = fd(lambda n: loss_geometry(depth, n, ref_d, ref_n, cam, w).value, normal)
    np.testing.assert_allclose(geo.d_normal, num_n, rtol=1e-5, atol=1e-9)


def test_total_loss_combines_terms(micro, camera, rng):
    frame = render(micro, camera)
    target = rng.uniform(0, 1, frame.image.shape)
    w = LossWeights()
    res = total_loss(frame, target, w)
    t = res.terms
    expect = t["rgb"] + w.surfel * t["surfel"] + w.scale * t["scale"] + w.transmittance * t[
        "transmittance"]
    assert res.total == pytest.approx(expect)
    assert t["total"] == res.total
    assert res.d_depth is None


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(transmittance=-1)
    assert LossWeights.for_scene(unbounded=True).scale == 5e-5
