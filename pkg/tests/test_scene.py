import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mhsplat.scene import (Camera, ContractError, GaussianCloud, GaussianSplat, ImageBuffer,
                           InvalidParameterError, covariance_from_scale_rotation, logit, quat_to_rotmat,
                           sigmoid, validate_cloud)

from conftest import random_cloud

finite = st.floats(-5, 5, allow_nan=False)


def test_identity_covariance():
    np.testing.assert_allclose(covariance_from_scale_rotation([1, 1, 1], [1, 0, 0, 0]), np.eye(3))


def test_anisotropic_covariance():
    np.testing.assert_allclose(covariance_from_scale_rotation([2, 1, 1], [1, 0, 0, 0]), np.diag([4, 1, 1]))


@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_isotropic_covariance_invariant_under_rotation(q):
    np.testing.assert_allclose(covariance_from_scale_rotation([1, 1, 1], q), np.eye(3), atol=1e-12)


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(0)
    scales = rng.uniform(0.01, 3.0, (1000, 3))
    q = rng.normal(size=(1000, 4))
    cov = covariance_from_scale_rotation(scales, q)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12)
    ev = np.linalg.eigvalsh(cov)
    np.testing.assert_allclose(ev, np.sort(scales ** 2, axis=1), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("bad", [
    ([np.nan, 1, 1], [1, 0, 0, 0]),
    ([1, 1, 1], [np.inf, 0, 0, 0]),
    ([0, 1, 1], [1, 0, 0, 0]),
])
def test_covariance_rejects_invalid(bad):
    with pytest.raises(InvalidParameterError):
        covariance_from_scale_rotation(*bad)


def test_rotation_matrices_are_orthonormal():
    R = quat_to_rotmat(np.random.default_rng(1).normal(size=(50, 4)))
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


@given(arrays(np.float64, 20, elements=st.floats(-30, 30)))
def test_opacity_roundtrip(raw):
    np.testing.assert_allclose(logit(sigmoid(raw)), raw, atol=1e-9 * np.exp(np.abs(raw) / 2).max())


@given(arrays(np.float64, 20, elements=st.floats(-8, 8)))
def test_activation_roundtrip_within_1e12(raw):
    np.testing.assert_allclose(logit(sigmoid(raw)), raw, atol=1e-12 * np.exp(np.abs(raw)).max())
    np.testing.assert_allclose(np.log(np.exp(raw)), raw, atol=1e-12)


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_valid_cloud_has_empty_report():
    assert validate_cloud(random_cloud(10, np.random.default_rng(0))) == []


def test_nan_position_reported_with_index_and_field():
    c = random_cloud(10, np.random.default_rng(0))
    c.positions[4, 1] = np.nan
    rep = validate_cloud(c)
    assert len(rep) == 1
    assert rep[0].index == 4 and rep[0].field == "positions"


def test_unnormalized_quaternion_reported():
    c = random_cloud(10, np.random.default_rng(0))
    c.rotations[2] *= 0.9
    rep = validate_cloud(c)
    assert [(v.index, v.field) for v in rep] == [(2, "rotations")]
    assert "norm" in rep[0].message


def test_saturated_opacity_reported():
    c = random_cloud(3, np.random.default_rng(0))
    c.raw_opacities[1] = 1e4
    assert [(v.index, v.field) for v in validate_cloud(c)] == [(1, "raw_opacities")]


def test_cloud_helpers_roundtrip():
    c = random_cloud(5, np.random.default_rng(3))
    splats = [c.splat(i) for i in range(len(c))]
    assert GaussianCloud.from_splats(splats).equals(c)
    sub = c.subset(np.array([True, False, True, False, True]))
    assert len(sub) == 3 and np.array_equal(sub.positions, c.positions[::2])
    d = c.copy()
    d.positions[0] += 1
    assert not d.equals(c)


def test_splat_activations():
    s = GaussianSplat(np.zeros(3), np.log([1.0, 2.0, 3.0]), np.array([1.0, 0, 0, 0]), np.ones(3), 0.0)
    assert s.opacity == 0.5
    np.testing.assert_allclose(s.covariance, np.diag([1.0, 4.0, 9.0]))


@pytest.mark.parametrize("kw", [
    dict(fx=0.0), dict(near=0.0), dict(near=5.0, far=1.0), dict(width=4),
])
def test_camera_invariants(kw):
    args = dict(R=np.eye(3), t=np.zeros(3), fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)
    args.update(kw)
    with pytest.raises(InvalidParameterError):
        Camera(**args)


def test_camera_rejects_non_rotation():
    with pytest.raises(InvalidParameterError):
        Camera(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10, 10, 4, 4, 8, 8)


def test_image_buffer_contracts():
    with pytest.raises(ContractError):
        ImageBuffer(np.zeros((4, 4)))
    with pytest.raises(InvalidParameterError):
        ImageBuffer(np.full((4, 4, 3), np.nan))
    t = ImageBuffer.target(np.array([[[-0.5, 0.5, 1.5]]]))
    np.testing.assert_array_equal(t.pixels, [[[0.0, 0.5, 1.0]]])


@settings(max_examples=30)
@given(st.integers(1, 30), st.integers(0, 2 ** 31))
def test_append_and_normalize_keep_invariants(n, seed):
    c = random_cloud(n, np.random.default_rng(seed))
    c.rotations *= 3.0
    c.normalize_rotations()
    assert validate_cloud(c) == []
    c.append(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.5), 0.0)
    assert len(c) == n + 1 and validate_cloud(c) == []
