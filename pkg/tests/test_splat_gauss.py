import numpy as np
import pytest

from dpges import kernels
from dpges.geometry import quat_normalize
from dpges.raster_surfel import peel
from dpges.scene import Camera, Gaussian
from dpges.splat_gauss import (COV_BLUR, CUTOFF_POWER, interval_transmittance, prepare_gaussians,
                               project_gaussian, splat_accumulate)
from helpers import _dc, facing_surfel, flat_gaussian, scene_of


@pytest.fixture
def odd_camera():
    return Camera.look_at([0, 0, -3.0], [0, 0, 0], width=33, height=33, fov_deg=40.0)


def test_cutoff_is_three_and_a_half_sigma():
    assert CUTOFF_POWER == -6.125


def test_isotropic_covariance_on_axis(odd_camera):
    s = 0.07
    sp = project_gaussian(flat_gaussian([0, 0, 0], scale=s), odd_camera)
    f = odd_camera.fx * s / 3.0
    np.testing.assert_allclose(sp.cov2d, np.diag([f * f, f * f]) + COV_BLUR * np.eye(2), rtol=1e-12)
    np.testing.assert_allclose(sp.mean2d, [16.5, 16.5])
    assert sp.depth == pytest.approx(3.0)


def test_center_behind_camera_is_culled(odd_camera):
    assert project_gaussian(flat_gaussian([0, 0, -4.0]), odd_camera) is None


def test_isotropic_rotation_invariance(odd_camera, rng):
    base = flat_gaussian([0.2, -0.1, 0.3], scale=0.1)
    q = quat_normalize(rng.normal(size=4))
    rot = Gaussian(base.position, base.opacity, q, base.scale, base.sh)
    a, b = project_gaussian(base, odd_camera), project_gaussian(rot, odd_camera)
    np.testing.assert_allclose(a.cov2d, b.cov2d, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(a.mean2d, b.mean2d)


@pytest.mark.parametrize("d,expected", [(0.5, 1.0), (2.5, 0.25), (1.0, 0.5), (2.0, 0.25),
                                        (7.0, 0.25)])
def test_interval_transmittance(d, expected):
    T = [1.0, 0.5, 0.25, 0.125]
    assert interval_transmittance([1.0, 2.0, 3.0], T, d) == expected


def test_single_gaussian_at_its_mean(odd_camera):
    sc = scene_of(gaussians=[flat_gaussian([0, 0, 0], opacity=1.0, color=(0.2, 0.5, 0.7))])
    st = peel(sc, odd_camera)
    acc = splat_accumulate(sc, odd_camera, st)
    assert acc.weight[16, 16] == 1.0
    np.testing.assert_allclose(acc.color[16, 16], [0.2, 0.5, 0.7])
    assert acc.weight[16, 17] < 1.0


def test_gaussian_behind_opaque_surfel_is_discarded(odd_camera):
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.5, 0.5), eps=0.1)],
                  [flat_gaussian([0, 0, 0.5], opacity=1.0)])
    st = peel(sc, odd_camera)
    acc = splat_accumulate(sc, odd_camera, st)
    core = st.alpha[..., 0] == 1.0
    assert core.sum() > 10
    assert np.all(acc.weight[core] == 0)


def test_gaussian_within_margin_is_kept_at_zero_transmittance(odd_camera):
    # in front of the margin but behind the opaque layer: t_s = T_1 = 0 so still hidden
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.5, 0.5), eps=1.0)],
                  [flat_gaussian([0, 0, 0.5], opacity=1.0)])
    st = peel(sc, odd_camera)
    acc = splat_accumulate(sc, odd_camera, st)
    assert acc.weight[16, 16] == 0
    # directly in front it is fully visible
    sc = scene_of([facing_surfel([0, 0, 0], scale=(0.5, 0.5))], [flat_gaussian([0, 0, -0.5])])
    st = peel(sc, odd_camera)
    assert splat_accumulate(sc, odd_camera, st).weight[16, 16] == pytest.approx(0.8)


def test_gaussian_between_semi_transparent_layers_is_attenuated(odd_camera):
    import math
    off = math.sqrt(2 * math.log(60.0)) * 0.2
    surf = [facing_surfel([off, 0, z]) for z in (0.0, 0.3, 0.6)]
    sc = scene_of(surf, [flat_gaussian([0, 0, 0.45], opacity=1.0)])
    st = peel(sc, odd_camera)
    acc = splat_accumulate(sc, odd_camera, st)
    assert acc.weight[16, 16] == pytest.approx(0.25, rel=1e-9)


def test_permutation_invariance(rng, odd_camera):
    gs = [flat_gaussian(rng.uniform(-0.5, 0.5, 3), scale=rng.uniform(0.02, 0.2),
                        opacity=rng.uniform(0.1, 1), color=rng.uniform(0, 1, 3)) for _ in range(40)]
    surf = [facing_surfel([0.1, 0.1, 0.2], scale=(0.3, 0.2))]
    base = scene_of(surf, gs)
    st = peel(base, odd_camera)
    ref = splat_accumulate(base, odd_camera, st)
    for _ in range(5):
        perm = rng.permutation(len(gs))
        sc = scene_of(surf, [gs[i] for i in perm])
        acc = splat_accumulate(sc, odd_camera, st)
        np.testing.assert_allclose(acc.color, ref.color, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(acc.weight, ref.weight, rtol=1e-12, atol=1e-15)


def test_projection_handles_empty(odd_camera):
    view = prepare_gaussians(scene_of(), odd_camera)
    assert view.visible.shape == (0,)
    st = peel(scene_of(), odd_camera)
    acc = splat_accumulate(scene_of(), odd_camera, st)
    assert acc.weight.sum() == 0


@pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled kernels not built")
def test_backends_agree(rng, odd_camera):
    gs = [flat_gaussian(rng.uniform(-0.5, 0.5, 3), scale=rng.uniform(0.02, 0.2),
                        opacity=rng.uniform(0.1, 1), color=rng.uniform(0, 1, 3)) for _ in range(30)]
    surf = [facing_surfel(rng.uniform(-0.3, 0.3, 3), scale=(0.3, 0.2)) for _ in range(5)]
    sc = scene_of(surf, gs)
    st = peel(sc, odd_camera)
    a = splat_accumulate(sc, odd_camera, st, backend="python")
    b = splat_accumulate(sc, odd_camera, st, backend="cython")
    np.testing.assert_allclose(a.color, b.color, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(a.weight, b.weight, rtol=1e-12, atol=1e-15)
