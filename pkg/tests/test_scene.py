import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from slgs.errors import InvalidCamera, InvalidPrimitive
from slgs.scene import (BASELINE_3DGS_OPTIMIZABLE, BASELINE_3DGS_STORED, CameraView, GaussianCloud,
                        LatentGaussian, activate, camera_center, look_at, quat_to_rotmat, rotmat_to_quat)

from conftest import random_rotation


def gaussian(**kw):
    base = dict(position=np.zeros(3), opacity_logit=0.0, rotation=np.array([1.0, 0, 0, 0]),
                log_scale=np.zeros(3), f_diffuse=np.zeros(8), f_specular=np.zeros(8))
    base.update(kw)
    return LatentGaussian(**base)


def test_activate_identity_case():
    opacity, scale, rot = activate(gaussian())
    assert opacity == 0.5
    np.testing.assert_allclose(scale, np.ones(3))
    np.testing.assert_allclose(rot, np.eye(3), atol=1e-12)


def test_activate_opacity_at_logit_four():
    opacity, _, _ = activate(gaussian(opacity_logit=4.0))
    assert abs(opacity - 0.9820) < 1e-4


@pytest.mark.parametrize("field,value", [
    ("position", np.array([np.nan, 0, 0])),
    ("opacity_logit", np.inf),
    ("log_scale", np.array([0, -np.inf, 0])),
    ("f_specular", np.full(8, np.nan)),
    ("rotation", np.zeros(4)),
])
def test_activate_rejects_bad_fields(field, value):
    with pytest.raises(InvalidPrimitive):
        activate(gaussian(**{field: value}))


def test_rotation_is_renormalized():
    _, _, rot = activate(gaussian(rotation=np.array([3.0, 0, 0, 0])))
    np.testing.assert_allclose(rot, np.eye(3), atol=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_matrix_is_proper_rotation(q):
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(r) - 1) < 1e-9


def test_quaternion_round_trip(rng):
    for _ in range(50):
        r = random_rotation(rng)
        q = rotmat_to_quat(r)
        assert q[0] >= 0
        np.testing.assert_allclose(quat_to_rotmat(q), r, atol=1e-9)


def test_scale_positive_and_opacity_in_unit_interval(rng):
    for _ in range(20):
        g = gaussian(opacity_logit=rng.normal() * 5, log_scale=rng.normal(size=3) * 5)
        opacity, scale, _ = activate(g)
        assert 0 < opacity < 1
        assert np.all(scale > 0)


def test_camera_center_identity_and_translation():
    np.testing.assert_allclose(camera_center(CameraView(4, 4, 1, 1, (2, 2), np.eye(4))), 0)
    m = np.eye(4)
    m[:3, 3] = (1, 2, 3)
    np.testing.assert_allclose(camera_center(CameraView(4, 4, 1, 1, (2, 2), m)), (-1, -2, -3))


def test_camera_center_maps_to_origin(rng):
    for _ in range(20):
        m = np.eye(4)
        m[:3, :3] = random_rotation(rng)
        m[:3, 3] = rng.normal(size=3) * 5
        c = camera_center(CameraView(4, 4, 1, 1, (2, 2), m))
        np.testing.assert_allclose(m @ np.append(c, 1), [0, 0, 0, 1], atol=1e-9)


def test_camera_center_singular_raises():
    m = np.eye(4)
    m[2, 2] = 0
    with pytest.raises(InvalidCamera):
        camera_center(CameraView(4, 4, 1, 1, (2, 2), m))


def test_camera_validation():
    CameraView(4, 4, 1, 1, (2, 2), np.eye(4)).validate()
    with pytest.raises(InvalidCamera):
        CameraView(4, 4, 0, 1, (2, 2), np.eye(4)).validate()
    bad = np.eye(4)
    bad[0, 0] = -1  # reflection
    with pytest.raises(InvalidCamera):
        CameraView(4, 4, 1, 1, (2, 2), bad).validate()


def test_look_at_points_forward_axis_at_target():
    eye, target = np.array([1.0, -2.0, 3.0]), np.array([0.5, 0.0, 0.0])
    m = look_at(eye, target)
    p = m @ np.append(target, 1)
    assert p[2] > 0 and abs(p[0]) < 1e-9 and abs(p[1]) < 1e-9
    CameraView(4, 4, 1, 1, (2, 2), m).validate()


def test_parameter_counts():
    cloud = GaussianCloud.from_gaussians([gaussian(), gaussian()])
    assert cloud.parameters_per_gaussian == 27
    assert gaussian().num_parameters == 27
    assert BASELINE_3DGS_OPTIMIZABLE == 59 and BASELINE_3DGS_STORED == 62
    small = GaussianCloud.from_gaussians([gaussian(f_diffuse=np.zeros(4), f_specular=np.zeros(4))])
    assert small.parameters_per_gaussian == 19


def test_cloud_select_append_keep_lengths_aligned():
    cloud = GaussianCloud.from_gaussians([gaussian(position=np.full(3, i)) for i in range(5)])
    cloud.grad_accum[:] = np.arange(5)
    cloud.select(np.array([True, False, True, False, True]))
    assert len(cloud) == 3 and len(cloud.grad_accum) == 3 and len(cloud.max_radii) == 3
    np.testing.assert_array_equal(cloud.grad_accum, [0, 2, 4])
    cloud.append({k: v[:1] for k, v in cloud.params().items()})
    assert len(cloud) == 4 and len(cloud.grad_count) == 4 and cloud.grad_accum[-1] == 0
    np.testing.assert_array_equal(cloud[3].position, np.zeros(3))


def test_cloud_copy_is_independent():
    cloud = GaussianCloud.from_gaussians([gaussian()])
    twin = cloud.copy()
    twin.positions[0, 0] = 7
    assert cloud.positions[0, 0] == 0
