import numpy as np
import pytest
from hypothesis import given, strategies as st

from slgs.autodiff import Tensor, check_gradients
from slgs.projection import (COV_FLOOR, ProjectedGaussian, build_covariance, depth_order, project,
                             project_arrays, project_gaussians, sort_by_depth)
from slgs.scene import CameraView, LatentGaussian

from conftest import make_view, random_rotation


def gaussian(position, scale=0.1, rotation=(1.0, 0, 0, 0), logit=0.0):
    return LatentGaussian(np.asarray(position, float), logit, np.asarray(rotation, float),
                          np.log(np.broadcast_to(scale, 3)).astype(float), np.zeros(8), np.zeros(8))


def test_build_covariance_simple_cases():
    np.testing.assert_allclose(build_covariance(np.eye(3), np.ones(3)), np.eye(3))
    np.testing.assert_allclose(build_covariance(np.eye(3), [0.1, 1, 2]), np.diag([0.01, 1, 4]))


def test_covariance_eigenvalues_are_squared_scales(rng):
    for _ in range(50):
        s = rng.uniform(0.05, 3, 3)
        sigma = build_covariance(random_rotation(rng), s)
        np.testing.assert_allclose(sigma, sigma.T, atol=1e-12)
        np.testing.assert_allclose(np.linalg.eigvalsh(sigma), np.sort(s ** 2), atol=1e-5)


def axis_view(size=64, f=50.0, pp=(32.0, 32.0)):
    return CameraView(size, size, f, f, pp, np.eye(4))


def test_point_on_axis_maps_to_principal_point():
    p = project(gaussian([0, 0, 5.0]), axis_view(pp=(30.0, 35.0)))
    np.testing.assert_allclose(p.mean2d, [30.0, 35.0])


def test_behind_near_plane_is_culled():
    view = axis_view()
    assert project(gaussian([0, 0, 0.001]), view) is None
    assert project(gaussian([0, 0, -3.0]), view) is None
    assert project(gaussian([0, 0, 0.5]), view) is not None


def test_far_off_screen_is_culled():
    assert project(gaussian([100.0, 0, 5.0]), axis_view()) is None


@pytest.mark.parametrize("depth,scale,focal", [(5.0, 0.1, 50.0), (2.0, 0.05, 80.0), (10.0, 0.5, 30.0)])
def test_isotropic_on_axis_covariance(depth, scale, focal):
    p = project(gaussian([0, 0, depth], scale), axis_view(f=focal))
    expected = (focal * scale / depth) ** 2 + COV_FLOOR
    np.testing.assert_allclose(np.diag(p.cov2d), [expected, expected], rtol=0.05)
    assert abs(p.cov2d[0, 1]) < 1e-9


def numeric_jacobian_cov(view, position, sigma):
    """Independent check: finite-difference Jacobian of the pinhole map at the camera-space mean."""
    r, t = view.rotation, view.translation
    fx, fy = view.focal_x, view.focal_y

    def pix(pc):
        return np.array([fx * pc[0] / pc[2], fy * pc[1] / pc[2]])

    pc = r @ position + t
    jac = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        jac[:, k] = (pix(pc + e) - pix(pc - e)) / 2e-6
    cam_sigma = r @ sigma @ r.T
    return jac @ cam_sigma @ jac.T + COV_FLOOR * np.eye(2)


def test_covariance_matches_numeric_jacobian(rng):
    for _ in range(30):
        view = make_view(eye=rng.normal(size=3) * 0.5 + [0, 0, -5], size=48, focal=45.0)
        pos = rng.uniform(-0.6, 0.6, 3)
        q = rng.normal(size=4)
        s = rng.uniform(0.05, 0.4, 3)
        g = gaussian(pos, s, q)
        p = project(g, view)
        from slgs.scene import quat_to_rotmat
        sigma = build_covariance(quat_to_rotmat(q / np.linalg.norm(q)), s)
        np.testing.assert_allclose(p.cov2d, numeric_jacobian_cov(view, pos, sigma), rtol=1e-5, atol=1e-8)


@given(st.integers(0, 10_000))
def test_cov2d_symmetric_positive_definite(seed):
    rng = np.random.default_rng(seed)
    view = make_view(eye=rng.normal(size=3) + [0, 0, -6])
    n = 16
    q = rng.normal(size=(n, 4))
    res = project_arrays(rng.uniform(-2, 2, (n, 3)), q, rng.uniform(-5, 1, (n, 3)), rng.uniform(0, 1, n), view)
    a, b, c = res["cov2d"][res["visible"]].T
    assert np.all(a > 0) and np.all(a * c - b * b > 0)
    assert np.all(res["radius"] >= 0) and np.all(res["extent"] >= res["radius"])


def test_project_matches_project_arrays(rng):
    view = make_view()
    pos = rng.uniform(-1, 1, (10, 3))
    quats = rng.normal(size=(10, 4))
    ls = rng.uniform(-3, -1, (10, 3))
    res = project_arrays(pos, quats, ls, np.full(10, 0.5), view)
    for i in range(10):
        p = project(LatentGaussian(pos[i], 0.0, quats[i], ls[i], np.zeros(8), np.zeros(8)), view, index=i)
        assert (p is not None) == bool(res["visible"][i])
        if p is not None:
            np.testing.assert_allclose(p.mean2d, res["mean2d"][i])
            a, b, c = res["cov2d"][i]
            np.testing.assert_allclose(p.cov2d, [[a, b], [b, c]])


def fake(depth, idx):
    return ProjectedGaussian(np.zeros(2), np.eye(2), depth, 1.0, idx)


def test_sort_by_depth_examples():
    out = sort_by_depth([fake(3, 0), fake(1, 1), fake(2, 2)])
    assert [p.depth for p in out] == [1, 2, 3]
    ties = sort_by_depth([fake(1, 0), fake(1, 1), fake(1, 2)])
    assert [p.source_index for p in ties] == [0, 1, 2]
    assert sort_by_depth([]) == []


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=100))
def test_depth_order_sorted_and_stable(depths):
    order = depth_order(np.array(depths))
    d = np.array(depths)[order]
    assert np.all(np.diff(d) >= 0)
    for i in range(len(order) - 1):
        if d[i] == d[i + 1]:
            assert order[i] < order[i + 1]


def test_projection_gradients_twenty_instances():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        view = make_view(eye=rng.normal(size=3) * 0.5 + [0, 0, -4], size=32, focal=35.0)
        pos = rng.uniform(-0.8, 0.8, (3, 3))
        quats = rng.normal(size=(3, 4))
        ls = rng.uniform(-2.5, -0.8, (3, 3))

        def fn(p, q, s):
            return project_gaussians(p, q, s, view)

        res = check_gradients(fn, [pos, quats, ls], seed=seed)
        assert res, res.worst


def test_projection_gradient_through_frustum_clamp():
    # means far outside the clamp window exercise the clamped Jacobian branch
    view = make_view(size=16, focal=20.0)
    pos = np.array([[2.5, 0.3, 0.0], [-0.2, -3.0, 1.0]])
    res = check_gradients(lambda p, q, s: project_gaussians(p, q, s, view),
                          [pos, np.array([[0.9, 0.1, 0.2, 0.3], [0.5, -0.5, 0.5, 0.1]]), np.full((2, 3), -1.0)])
    assert res, res.worst
