"""Euler-angle kinematics for 6-DOF rigid coordinates.

Convention: a rotation r = (phi, theta, psi) acts as R = Rz(psi) @ Ry(theta) @ Rx(phi),
i.e. rotate about world Z by psi, then the new Y by theta, then the new X by phi.
Generalized rigid coordinates are q = [phi, theta, psi, tx, ty, tz].
"""

from __future__ import annotations

import numpy as np

GIMBAL_COS_TOL = 1e-6


class GimbalSingularityError(ValueError):
    """Raised when |cos(theta)| is too small for the angular-rate map to be inverted."""


def rotation_matrix(r) -> np.ndarray:
    """3x3 rotation matrix for Euler angles r = (phi, theta, psi)."""
    phi, theta, psi = r
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array([
        [ct * cp, -cf * sp + sf * st * cp, sf * sp + cf * st * cp],
        [ct * sp, cf * cp + sf * st * sp, -sf * cp + cf * st * sp],
        [-st, sf * ct, cf * ct],
    ])


def rotation_derivatives(r) -> np.ndarray:
    """Stack of dR/dphi, dR/dtheta, dR/dpsi, shape (3, 3, 3)."""
    phi, theta, psi = r
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cf, -sf], [0.0, sf, cf]])
    drz = np.array([[-sp, -cp, 0.0], [cp, -sp, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-st, 0.0, ct], [0.0, 0.0, 0.0], [-ct, 0.0, -st]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sf, -cf], [0.0, cf, -sf]])
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def angular_velocity_map(r, check_singular: bool = True) -> np.ndarray:
    """Matrix T with world angular velocity omega = T @ rdot.

    det T = cos(theta); raises GimbalSingularityError near theta = +-pi/2.
    """
    phi, theta, psi = r
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    if check_singular and abs(ct) < GIMBAL_COS_TOL:
        raise GimbalSingularityError(f"angular-rate map singular: |cos(theta)| = {abs(ct):.2e}")
    return np.array([
        [ct * cp, -sp, 0.0],
        [ct * sp, cp, 0.0],
        [-st, 0.0, 1.0],
    ])


def angular_velocity_map_derivatives(r) -> np.ndarray:
    """Stack of dT/dphi, dT/dtheta, dT/dpsi, shape (3, 3, 3)."""
    phi, theta, psi = r
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    dt_dtheta = np.array([
        [-st * cp, 0.0, 0.0],
        [-st * sp, 0.0, 0.0],
        [-ct, 0.0, 0.0],
    ])
    dt_dpsi = np.array([
        [-ct * sp, -cp, 0.0],
        [ct * cp, -sp, 0.0],
        [0.0, 0.0, 0.0],
    ])
    return np.stack([np.zeros((3, 3)), dt_dtheta, dt_dpsi])


def vertex_world(q, p0) -> np.ndarray:
    """World position of a body-frame point p0 under q = [phi, theta, psi, t]."""
    q = np.asarray(q, dtype=float)
    return rotation_matrix(q[:3]) @ np.asarray(p0, dtype=float) + q[3:6]


def vertex_jacobian(q, p0) -> np.ndarray:
    """3x6 Jacobian of vertex_world w.r.t. q; translation block is the identity."""
    q = np.asarray(q, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    jac = np.empty((3, 6))
    jac[:, :3] = (rotation_derivatives(q[:3]) @ p0).T  # columns d/dphi, d/dtheta, d/dpsi
    jac[:, 3:] = np.eye(3)
    return jac


def vertex_jacobians(q, p0s) -> np.ndarray:
    """Batched vertex_jacobian: p0s (k, 3) -> (k, 3, 6)."""
    p0s = np.atleast_2d(np.asarray(p0s, dtype=float))
    b = rotation_derivatives(np.asarray(q, dtype=float)[:3])
    out = np.empty((p0s.shape[0], 3, 6))
    out[:, :, :3] = np.einsum("jab,kb->kaj", b, p0s)
    out[:, :, 3:] = np.eye(3)
    return out


def transform_points(r, t, p0s) -> np.ndarray:
    """Batched vertex_world for an array of body-frame points."""
    return np.asarray(p0s, dtype=float) @ rotation_matrix(r).T + np.asarray(t, dtype=float)
