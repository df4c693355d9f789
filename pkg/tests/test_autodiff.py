import dataclasses

import numpy as np
import pytest

from dpges.autodiff import PARAM_CLASSES, SceneGrad, backward, blend_geometry
from dpges.composite import composite, render
from dpges.oracle import discrete_state
from dpges.splat_gauss import splat_accumulate
from dpges.verify import LinearProbe, default_camera, grad_check_scene
from helpers import facing_surfel, scene_of

SURFEL_GEOMETRY = ("surfel_pos", "surfel_rot", "surfel_scale")


def test_opaque_core_passes_no_geometry_gradient(camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.5, 0.5), color=(0.4, 0.5, 0.6))],
                  background=(0.1, 0.1, 0.1))
    frame = render(sc, camera)
    assert frame.stack.alpha[16, 16, 0] == 1.0
    d = np.zeros_like(frame.image)
    d[16, 16] = 1.0
    g = backward(frame, d)
    for name in SURFEL_GEOMETRY:
        assert np.all(getattr(g, name) == 0), name
    assert np.abs(g.surfel_sh).max() > 0


def test_ring_pixel_passes_geometry_gradient(camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.05, 0.05), color=(0.9, 0.9, 0.9))])
    frame = render(sc, camera)
    ring = (frame.stack.alpha[..., 0] > 0) & (frame.stack.alpha[..., 0] < 1)
    assert ring.any()
    g = backward(frame, np.where(ring[..., None], 1.0, 0.0) * np.ones(3))
    assert np.abs(g.surfel_scale).max() > 0


def test_micro_scene_matches_finite_differences(micro, rng):
    cam = default_camera(20, fov=30.0)
    probe = LinearProbe(rng, (20, 20))
    res = grad_check_scene(micro, cam, probe, max_per_class=6, rng=rng)
    for name, r in res.items():
        assert r["score"] <= 1.0, (name, r["fails"])
    assert sum(r["checked"] for r in res.values()) > 30


def test_linearity(micro, camera, rng):
    frame = render(micro, camera)
    a, b = rng.normal(size=frame.image.shape), rng.normal(size=frame.image.shape)
    ga, gb = backward(frame, a), backward(frame, b)
    gab = backward(frame, 2.0 * a - 3.0 * b)
    combo = ga * 2.0 + gb * -3.0
    for name, v in gab.items():
        np.testing.assert_allclose(v, getattr(combo, name), rtol=1e-9, atol=1e-12)


def test_zero_adjoint_gives_zero_gradient(micro, camera):
    frame = render(micro, camera)
    g = backward(frame, np.zeros_like(frame.image))
    assert g.max_abs() == 0.0


def test_shape_mismatch_is_rejected(micro, camera):
    frame = render(micro, camera)
    with pytest.raises(ValueError):
        backward(frame, np.zeros((3, 3, 3)))


def test_frozen_classes_have_no_slot(micro, camera):
    frame = render(micro, camera)
    g = backward(frame, np.ones_like(frame.image), frozen=("gauss_sh", "surfel_rot"))
    names = dict(g.items())
    assert "gauss_sh" not in names and "surfel_rot" not in names
    assert set(names) == set(PARAM_CLASSES) - {"gauss_sh", "surfel_rot"}


def _detached_image(scene, camera, base_stack):
    """Render with surfel transmittance seen by Gaussians held at ``base_stack``."""
    frame = render(scene, camera)
    st = dataclasses.replace(frame.stack, trans=base_stack.trans)
    acc = splat_accumulate(scene, camera, st)
    return composite(frame.stack.surfel_color, frame.stack.weight_sum, acc)


def test_trans_grad_off_equals_detached_transmittance(micro, camera, rng):
    frame = render(micro, camera)
    d = rng.normal(size=frame.image.shape)
    on = backward(frame, d)
    off = backward(frame, d, trans_grad=False)
    for name in ("gauss_pos", "gauss_opacity", "gauss_rot", "gauss_scale", "gauss_sh"):
        np.testing.assert_array_equal(getattr(on, name), getattr(off, name))
    base = discrete_state(frame)
    h = 1e-5
    checked = differs = 0
    for name in SURFEL_GEOMETRY:
        arr = getattr(micro, name)
        for idx in np.ndindex(arr.shape):
            plus, minus = micro.copy(), micro.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            if (discrete_state(render(plus, camera)) != base
                    or discrete_state(render(minus, camera)) != base):
                continue
            fd = (np.sum(d * _detached_image(plus, camera, frame.stack))
                  - np.sum(d * _detached_image(minus, camera, frame.stack))) / (2 * h)
            an = getattr(off, name)[idx]
            assert abs(fd - an) <= max(1e-4 * abs(fd), 1e-7), (name, idx, fd, an)
            checked += 1
            differs += getattr(on, name)[idx] != an
    assert checked >= 5
    assert differs > 0


def test_blend_geometry_weights_match_color_blend(micro, camera):
    st = render(micro, camera).stack
    depth, normal = blend_geometry(st)
    assert depth.shape == st.shape and normal.shape == st.shape + (3,)
    empty = st.layer_count == 0
    assert np.all(depth[empty] == 0)


def test_scenegrad_arithmetic(micro):
    g = SceneGrad.zeros_like(micro, frozen=("gauss_rot",))
    assert g.gauss_rot is None
    g.surfel_pos[0, 0] = 2.0
    h = g + g * 0.5
    assert h.surfel_pos[0, 0] == 3.0 and h.max_abs() == 3.0
