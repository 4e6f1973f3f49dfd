import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mhsplat import importance as imp
from mhsplat.render import render
from mhsplat.scene import ContractError, GaussianCloud, sigmoid

from conftest import front_camera, random_cloud


# --------------------------------------------------------------- scheduling

def test_subset_size_endpoints():
    s = imp.CameraSchedule(10, 100, 200)
    assert s.subset_size(100) == 10
    assert s.subset_size(200) == 1
    with pytest.raises(ContractError):
        s.subset_size(99)
    with pytest.raises(ContractError):
        s.subset_size(201)


def test_subset_wraps_from_cursor():
    s = imp.CameraSchedule(10, 0, 100, cursor=8)
    assert imp.camera_subset(s, 55) == [8, 9, 0, 1]
    assert s.cursor == 2


def test_schedule_invariants():
    with pytest.raises(ContractError):
        imp.CameraSchedule(5, 10, 10)
    assert imp.CameraSchedule(5, 0, 1, cursor=7).cursor == 2


@given(st.integers(1, 20), st.integers(1, 40))
def test_round_robin_fairness(n, steps):
    s = imp.CameraSchedule(n, 0, 1000)
    counts = Counter()
    total = 0
    for k in range(steps):
        t = int(1000 * k / max(steps - 1, 1))
        idx = imp.camera_subset(s, t)
        counts.update(idx)
        total += len(idx)
    c = [counts[i] for i in range(n)]
    assert max(c) - min(c) <= 1
    assert sum(c) == total


# --------------------------------------------------------------- maps

def _img(v, shape=(16, 16)):
    return np.full(shape + (3,), v, dtype=np.float64)


def test_perfect_renders_give_zero_maps():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    s, l = imp.aggregate_error_maps([x, x], [x, x])
    np.testing.assert_allclose(s, 0.0, atol=1e-12)
    np.testing.assert_array_equal(l, 0.0)


def test_single_view_maps_equal_that_view():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    s, l = imp.aggregate_error_maps([x], [y])
    from mhsplat.objective import ssim_map
    np.testing.assert_allclose(s, 1 - ssim_map(x, y))
    np.testing.assert_allclose(l, np.abs(x - y).mean(axis=2))


def test_two_views_average_l1():
    _, l = imp.aggregate_error_maps([_img(0.5), _img(0.7)], [_img(0.5), _img(0.5)])
    np.testing.assert_allclose(l, 0.1)


def test_aggregate_contracts():
    with pytest.raises(ContractError):
        imp.aggregate_error_maps([], [])
    with pytest.raises(ContractError):
        imp.aggregate_error_maps([_img(0.1), _img(0.1, (8, 8))], [_img(0.1), _img(0.1, (8, 8))])


def test_robust_normalize_constant_and_ramp():
    np.testing.assert_array_equal(imp.robust_normalize(np.full((5, 5), 3.0)), 0.0)
    ramp = np.linspace(0, 1, 1001)
    out = imp.robust_normalize(ramp)
    inner = (ramp > 0.02) & (ramp < 0.98)
    np.testing.assert_allclose(out[inner], (ramp[inner] - 0.01) / 0.98, atol=1e-12)
    assert out.min() == 0.0 and out.max() == 1.0


def test_robust_normalize_clips_outlier():
    rng = np.random.default_rng(2)
    m = rng.uniform(0, 1, 500)
    m[17] = 1e6
    srt = np.sort(m)
    # linear-interpolated percentiles computed directly from the sorted array
    pos_lo, pos_hi = 0.01 * (len(m) - 1), 0.99 * (len(m) - 1)
    lo = srt[int(pos_lo)] + (pos_lo - int(pos_lo)) * (srt[int(pos_lo) + 1] - srt[int(pos_lo)])
    hi = srt[int(pos_hi)] + (pos_hi - int(pos_hi)) * (srt[int(pos_hi) + 1] - srt[int(pos_hi)])
    out = imp.robust_normalize(m)
    assert out[17] == 1.0
    np.testing.assert_allclose(out, (np.clip(m, lo, hi) - lo) / (hi - lo), atol=1e-12)


def test_importance_field_closed_forms():
    z, o = np.zeros((4, 4)), np.ones((4, 4))
    np.testing.assert_allclose(imp.importance_field(z, z, z), 0.5)
    np.testing.assert_allclose(imp.importance_field(o, o, o), 1 / (1 + math.exp(-1.8)))
    assert imp.importance_field(o, o, o)[0, 0] == pytest.approx(0.8581, abs=1e-4)
    assert imp.importance_field(o, z, z)[0, 0] == pytest.approx(0.6900, abs=1e-4)
    with pytest.raises(ContractError):
        imp.importance_field(z, z, np.zeros((3, 3)))


@given(arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)))
def test_importance_field_range(maps):
    s = imp.importance_field(*maps)
    # closed at 0.5 when every input is exactly 0 (see decisions ledger)
    assert np.all(s >= 0.5) and np.all(s <= sigmoid(1.8))


def test_opacity_map_modes():
    cloud = random_cloud(30, np.random.default_rng(3))
    out = render(cloud, front_camera(16))
    np.testing.assert_allclose(imp.opacity_map([out], "deficit"), 1 - out.accumulated_alpha)
    np.testing.assert_allclose(imp.opacity_map([out], "coverage"), out.accumulated_alpha)
    with pytest.raises(ContractError):
        imp.opacity_map([out], "other")


# --------------------------------------------------------------- per-Gaussian

def _points(pos):
    n = len(pos)
    return GaussianCloud(np.asarray(pos, float), np.full((n, 3), -3.0), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full((n, 3), 0.5), np.zeros(n))


def test_same_pixel_gives_uniform_pick():
    cam = front_camera(16)
    cloud = _points([[0.0, 0.0, z] for z in (-0.5, 0.0, 0.5)])
    I, p = imp.gaussian_importance(cloud, np.full((16, 16), 0.7), cam)
    np.testing.assert_allclose(I, 0.7)
    np.testing.assert_allclose(p, 1 / 3)


def test_pick_normalization_arithmetic():
    cam = front_camera(16)
    cloud = _points([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
    s = np.full((16, 16), 0.5)
    uv, _ = cam.project(cloud.positions[1])
    s[int(uv[0, 1]), int(uv[0, 0])] = 0.731
    I, p = imp.gaussian_importance(cloud, s, cam)
    np.testing.assert_allclose(I, [0.5, 0.731])
    np.testing.assert_allclose(p, [0.406, 0.594], atol=1e-3)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_pick_monte_carlo_frequencies():
    p = np.array([0.5, 0.731]) / 1.231
    draws = np.random.default_rng(4).choice(2, size=100_000, p=p)
    freq = np.bincount(draws, minlength=2) / 100_000
    np.testing.assert_allclose(freq, [0.406, 0.594], atol=0.01)


def test_offscreen_and_behind_splats_get_field_minimum():
    cam = front_camera(16)
    cloud = _points([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [0.0, 0.0, -10.0]])
    s = np.random.default_rng(5).uniform(0.55, 0.8, (16, 16))
    I, p = imp.gaussian_importance(cloud, s, cam)
    assert I[1] == s.min() and I[2] == s.min()
    assert np.all(p > 0)


def test_pick_scale_invariance_and_uniform_case():
    cloud = random_cloud(40, np.random.default_rng(6))
    cam = front_camera(16)
    s = np.random.default_rng(7).uniform(0.5, 0.85, (16, 16))
    _, p1 = imp.gaussian_importance(cloud, s, cam)
    _, p2 = imp.gaussian_importance(cloud, 3.0 * s, cam)
    np.testing.assert_allclose(p1, p2)
    assert np.argmax(p1) == np.argmax(p2)
    out = render(cloud, cam)
    f = imp.build_importance(cloud, [out], [out.image], cam, alpha=0.8, beta=0.0, gamma=0.0,
                             opacity_mode="deficit", maps=(np.zeros((16, 16)), np.zeros((16, 16))))
    # uniform opacity term: feed a uniform map directly
    s_uniform = imp.importance_field(np.full((16, 16), 0.3), np.zeros((16, 16)), np.zeros((16, 16)), 0.8, 0, 0)
    _, pu = imp.gaussian_importance(cloud, s_uniform, cam)
    np.testing.assert_allclose(pu, 1 / len(cloud))
    assert f.p_pick.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all((f.per_gaussian > 0) & (f.per_gaussian < 1))


def test_resolution_mismatch():
    with pytest.raises(ContractError):
        imp.gaussian_importance(random_cloud(3, np.random.default_rng(0)), np.zeros((8, 8)), front_camera(16))
