import math

import numpy as np
import pytest

from dpges.composite import composite, export_image, render
from dpges.oracle import abuffer_render_surfels, sorted_full_render
from dpges.scene import Camera
from dpges.splat_gauss import AccumBuffers
from dpges.toys import bundled_recipe, init_toy, make_cameras
from helpers import facing_surfel, flat_gaussian, scene_of


def acc(color, weight):
    return AccumBuffers(np.asarray(color, float).reshape(1, 1, 3), np.array([[weight]], float))


def test_no_gaussians_gives_surfel_color():
    cs = np.array([[[0.1, 0.2, 0.3]]])
    np.testing.assert_array_equal(composite(cs, np.ones((1, 1)), acc([0, 0, 0], 0)), cs)


def test_black_surfels_plus_one_gaussian_halves_color():
    out = composite(np.zeros((1, 1, 3)), np.ones((1, 1)), acc([0.4, 0.6, 0.8], 1.0))
    np.testing.assert_allclose(out[0, 0], [0.2, 0.3, 0.4])


def test_equal_colors_average_to_same_color():
    c = np.array([0.3, 0.5, 0.7])
    out = composite(c.reshape(1, 1, 3), np.ones((1, 1)), acc(c, 1.0))
    np.testing.assert_allclose(out[0, 0], c)


def test_denominator_guard():
    with pytest.raises(AssertionError):
        composite(np.zeros((1, 1, 3)), np.full((1, 1), 0.5), acc([0, 0, 0], 0))


def test_empty_scene_renders_background(camera):
    img = render(scene_of(background=(0.2, 0.4, 0.6)), camera).image
    np.testing.assert_allclose(img, np.broadcast_to([0.2, 0.4, 0.6], img.shape))


def test_frame_unpacks_into_intermediates(camera):
    image, stack, accum = render(scene_of(), camera)
    assert image.shape == (32, 32, 3) and stack.layers == 3 and accum.weight.shape == (32, 32)


def test_export_clamps_but_render_does_not(camera):
    # a strongly negative SH coefficient drives the color below zero
    sc = scene_of([facing_surfel([0, 0, 0], color=(-0.5, 0.5, 1.5))])
    img = render(sc, camera).image
    assert img.min() < 0 and img.max() > 1
    out = export_image(img)
    assert out.min() == 0.0 and out.max() == 1.0


def test_fewer_than_four_fragments_matches_abuffer(rng, camera):
    sc = scene_of([facing_surfel(rng.uniform(-0.4, 0.4, 3), scale=(0.2, 0.15),
                                 color=rng.uniform(0, 1, 3)) for _ in range(3)],
                  background=(0.1, 0.2, 0.3))
    st = render(sc, camera).stack
    ab = abuffer_render_surfels(sc, camera)
    assert ab.count.max() <= 3
    np.testing.assert_allclose(st.surfel_color, ab.surfel_color, atol=1e-14)


def test_five_rings_truncated_tail():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], width=33, height=33, fov_deg=40.0)
    targets = [0.5, 0.4, 0.3, 0.6, 0.2]
    colors = np.eye(3)[[0, 1, 2, 0, 1]] * 0.9
    surfels = []
    for i, (a, c) in enumerate(zip(targets, colors)):
        off = math.sqrt(2 * math.log(30.0 / a)) * 0.2
        surfels.append(facing_surfel([off, 0, 0.2 * i], color=c))
    bg = np.array([0.1, 0.1, 0.1])
    sc = scene_of(surfels, background=bg)
    st = render(sc, cam).stack
    ab = abuffer_render_surfels(sc, cam)
    np.testing.assert_allclose(st.alpha[16, 16], targets[:3], rtol=1e-9)
    T = np.cumprod([1.0] + [1 - a for a in targets])
    tail = sum(targets[k] * T[k] * colors[k] for k in (3, 4)) + T[5] * bg - T[3] * bg
    np.testing.assert_allclose(ab.surfel_color[16, 16] - st.surfel_color[16, 16], tail, atol=1e-9)
    assert np.abs(tail).max() > 0.01


def test_fourth_layer_unreachable_behind_early_opaque_layer():
    recipe = bundled_recipe("occluder-box")
    sc = init_toy(recipe)
    for cam in make_cameras(recipe["cameras"])[:3]:
        f3, f4 = render(sc, cam, 3), render(sc, cam, 4)
        full = f3.stack.trans[..., 3] == 0
        early = full & (f3.stack.cull_layer < 2)
        assert early.sum() > 100
        np.testing.assert_array_equal(f3.image[early], f4.image[early])
        # where the third layer is the opaque one, Gaussians inside its margin
        # read the second-layer transmittance with three layers and zero with four
        assert np.abs(f3.image - f4.image)[full].mean() < 2e-3


def test_low_occlusion_gaussians_close_to_sorted_render(rng, camera):
    surf = [facing_surfel([0, 0, 0.5], scale=(1.0, 1.0), color=(0.3, 0.6, 0.2))]
    gs = [flat_gaussian([x, y, -0.3], scale=0.05, opacity=0.05, color=rng.uniform(0, 1, 3))
          for x, y in rng.uniform(-0.4, 0.4, (8, 2))]
    sc = scene_of(surf, gs, background=(0.2, 0.2, 0.2))
    mae = np.abs(render(sc, camera).image - sorted_full_render(sc, camera)).mean()
    assert mae < 0.02 * np.abs(sorted_full_render(sc, camera)).mean()


def test_hidden_gaussian_hidden_in_both(camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(1.0, 1.0), color=(0.3, 0.3, 0.3), eps=0.05)],
                  [flat_gaussian([0, 0, 0.8], opacity=1.0, color=(1, 0, 0))])
    img = render(sc, camera).image
    ref = sorted_full_render(sc, camera)
    np.testing.assert_allclose(img[12:20, 12:20], 0.3, atol=1e-12)
    np.testing.assert_allclose(ref[12:20, 12:20], 0.3, atol=1e-12)


def test_single_opaque_surfel_equals_sorted_render(camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.3, 0.3), color=(0.7, 0.2, 0.1))],
                  background=(0.0, 0.1, 0.0))
    np.testing.assert_allclose(render(sc, camera).image, sorted_full_render(sc, camera),
                               atol=1e-14)


def test_sorted_render_of_empty_scene(camera):
    np.testing.assert_array_equal(sorted_full_render(scene_of(background=(1, 0, 0)), camera)[3, 3],
                                  [1, 0, 0])
