import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from diffmesh.rotations import (
    GimbalSingularityError,
    angular_velocity_map,
    angular_velocity_map_derivatives,
    rotation_derivatives,
    rotation_matrix,
    vertex_jacobian,
    vertex_jacobians,
    vertex_world,
)

angles = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


def test_identity_at_zero():
    assert np.allclose(rotation_matrix((0.0, 0.0, 0.0)), np.eye(3), atol=1e-15)


def test_quarter_turn_about_z():
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(rotation_matrix((0.0, 0.0, np.pi / 2)), expected, atol=1e-15)


def test_quarter_turn_about_x():
    expected = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    assert np.allclose(rotation_matrix((np.pi / 2, 0.0, 0.0)), expected, atol=1e-15)


@given(angles, angles, angles)
@settings(max_examples=200, deadline=None)
def test_rotation_orthogonal_unit_determinant(phi, theta, psi):
    r = rotation_matrix((phi, theta, psi))
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


@given(angles, angles, angles)
@settings(max_examples=100, deadline=None)
def test_rotation_matches_quaternion_oracle(phi, theta, psi):
    # Z, then Y', then X'' intrinsic composition.
    oracle = Rotation.from_euler("ZYX", [psi, theta, phi]).as_matrix()
    assert np.abs(rotation_matrix((phi, theta, psi)) - oracle).max() < 1e-12


def test_vertex_world_identity_pose():
    assert np.allclose(vertex_world(np.zeros(6), (1.0, 2.0, 3.0)), (1.0, 2.0, 3.0))


def test_vertex_world_pure_translation():
    q = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    assert np.allclose(vertex_world(q, (0.0, 0.0, 0.0)), (1.0, 0.0, 0.0))


def test_vertex_world_quarter_turn():
    q = np.array([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
    assert np.allclose(vertex_world(q, (1.0, 0.0, 0.0)), (0.0, 1.0, 0.0), atol=1e-15)


def test_vertex_jacobian_translation_block_identity():
    rng = np.random.default_rng(3)
    for _ in range(5):
        q = rng.normal(size=6)
        jac = vertex_jacobian(q, rng.normal(size=3))
        assert np.allclose(jac[:, 3:], np.eye(3))


def test_vertex_jacobian_zero_angles_values():
    jac = vertex_jacobian(np.zeros(6), (1.0, 2.0, 3.0))
    assert np.allclose(jac[:, 2], (-2.0, 1.0, 0.0))   # d/dpsi
    assert np.allclose(jac[:, 1], (3.0, 0.0, -1.0))   # d/dtheta
    assert np.allclose(jac[:, 0], (0.0, -3.0, 2.0))   # d/dphi


def test_vertex_jacobian_origin_point_has_zero_rotation_block():
    q = np.array([0.3, -0.2, 0.9, 1.0, 2.0, 3.0])
    jac = vertex_jacobian(q, np.zeros(3))
    assert np.allclose(jac[:, :3], 0.0)


def test_vertex_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    eps = 1e-6
    worst = 0.0
    for _ in range(20):
        q = rng.normal(size=6)
        p0 = rng.normal(size=3)
        jac = vertex_jacobian(q, p0)
        for k in range(6):
            qp, qm = q.copy(), q.copy()
            qp[k] += eps
            qm[k] -= eps
            fd = (vertex_world(qp, p0) - vertex_world(qm, p0)) / (2 * eps)
            worst = max(worst, np.abs(fd - jac[:, k]).max() / max(1.0, np.abs(fd).max()))
    assert worst < 1e-6


def test_vertex_jacobians_batched_consistent():
    rng = np.random.default_rng(11)
    q = rng.normal(size=6)
    p0s = rng.normal(size=(5, 3))
    batched = vertex_jacobians(q, p0s)
    for k, p0 in enumerate(p0s):
        assert np.allclose(batched[k], vertex_jacobian(q, p0))


def test_angular_map_identity_at_zero():
    assert np.allclose(angular_velocity_map(np.zeros(3)), np.eye(3))


@given(angles, angles, angles)
@settings(max_examples=200, deadline=None)
def test_angular_map_determinant_is_cos_theta(phi, theta, psi):
    t = angular_velocity_map((phi, theta, psi), check_singular=False)
    assert abs(np.linalg.det(t) - np.cos(theta)) < 1e-12


def test_angular_map_gimbal_singularity():
    with pytest.raises(GimbalSingularityError):
        angular_velocity_map((0.0, np.pi / 2, 0.0))


def test_angular_map_consistent_with_rotation_rate():
    # omega given by Rdot R^T must equal T rdot for arbitrary rates.
    rng = np.random.default_rng(5)
    eps = 1e-7
    for _ in range(10):
        r = rng.uniform(-1.2, 1.2, size=3)
        rdot = rng.normal(size=3)
        rp = rotation_matrix(r + eps * rdot)
        rm = rotation_matrix(r - eps * rdot)
        wx = (rp - rm) / (2 * eps) @ rotation_matrix(r).T
        omega_fd = np.array([wx[2, 1], wx[0, 2], wx[1, 0]])
        omega = angular_velocity_map(r, check_singular=False) @ rdot
        assert np.abs(omega - omega_fd).max() < 1e-6


def test_rotation_and_angular_map_derivatives_match_fd():
    rng = np.random.default_rng(9)
    eps = 1e-6
    for _ in range(10):
        r = rng.uniform(-1.2, 1.2, size=3)
        db = rotation_derivatives(r)
        dt = angular_velocity_map_derivatives(r)
        for j in range(3):
            rp, rm = r.copy(), r.copy()
            rp[j] += eps
            rm[j] -= eps
            fd_r = (rotation_matrix(rp) - rotation_matrix(rm)) / (2 * eps)
            fd_t = (angular_velocity_map(rp, False) - angular_velocity_map(rm, False)) / (2 * eps)
            assert np.abs(fd_r - db[j]).max() < 1e-8
            assert np.abs(fd_t - dt[j]).max() < 1e-8
