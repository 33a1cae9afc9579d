"""Implicit differentiation of the zone projection optimum.

Given the KKT point of a solved zone and an incoming gradient on the resolved
coordinates, both paths return the adjoint pair (d_z, d_lambda) and the
gradients with respect to the zone inputs: the pre-collision coordinates, the
constraint matrix G, and the offset h. The direct path solves the full dense
(n + m) adjoint system; the QR path factors the mass-whitened active
constraint Jacobian, costing O(n m^2) instead of O((n + m)^3).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .rotations import rotation_derivatives, rotation_matrix
from .zone_qp import ACTIVE_LAMBDA_EPS, ZoneSolution

RIDGE = 1e-10
RANK_TOL = 1e-12


@dataclass
class ZoneBackward:
    d_z: np.ndarray
    d_lambda: np.ndarray           # inactive entries are zero by convention
    grad_q: np.ndarray
    grad_G: np.ndarray             # (m, 3k)
    grad_h: np.ndarray             # (m,)
    ridge: bool = False
    dropped: list[int] = field(default_factory=list)


def _outputs(sol: ZoneSolution, d_z: np.ndarray, d_lambda: np.ndarray,
             ridge=False, dropped=()) -> ZoneBackward:
    lam = sol.lambda_star
    weighted = lam * d_lambda
    grad_q = sol.Mhat @ d_z
    grad_g = -np.outer(weighted, sol.f_star) - np.outer(lam, sol.grad_f @ d_z)
    grad_h = -weighted
    return ZoneBackward(d_z=d_z, d_lambda=d_lambda, grad_q=grad_q, grad_G=grad_g,
                        grad_h=grad_h, ridge=ridge, dropped=list(dropped))


def kkt_backward_direct(sol: ZoneSolution, grad_z: np.ndarray) -> ZoneBackward:
    """Dense adjoint of the KKT system, assembled over all constraints.

    Inactive rows are consistent because the multiplier diagonal zeroes them;
    their raw adjoint entries are mathematically irrelevant (every output
    multiplies them by the zero multiplier) and are returned as zeros.
    """
    n = len(sol.z_star)
    m = len(sol.h)
    if m == 0:
        d_z = np.linalg.solve(sol.Mhat, grad_z)
        return _outputs(sol, d_z, np.zeros(0))
    a = sol.G @ sol.grad_f                       # (m, n)
    k = np.zeros((n + m, n + m))
    k[:n, :n] = sol.Mhat
    k[:n, n:] = a.T * sol.lambda_star[None, :]
    k[n:, :n] = a
    k[n:, n:] = np.diag(sol.c_star)
    rhs = np.concatenate([grad_z, np.zeros(m)])
    ridge = False
    scale = max(1.0, float(np.abs(rhs).max()))
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            solu = sla.solve(k, rhs)
        except np.linalg.LinAlgError:
            solu = None
        if solu is None or not np.all(np.isfinite(solu)) or \
                np.abs(k @ solu - rhs).max() > 1e-6 * scale:
            ridge = True
            k[np.diag_indices_from(k)] += RIDGE
            solu = sla.solve(k, rhs)
    d_z = solu[:n]
    d_lambda = solu[n:]
    d_lambda[sol.lambda_star <= ACTIVE_LAMBDA_EPS] = 0.0
    return _outputs(sol, d_z, d_lambda, ridge=ridge)


def _sqrt_mass_inverse(sol: ZoneSolution) -> np.ndarray:
    w = getattr(sol, "_sqrt_minv", None)
    if w is None:
        evals, evecs = np.linalg.eigh(sol.Mhat)
        evals = np.maximum(evals, 1e-300)
        w = (evecs / np.sqrt(evals)) @ evecs.T
        sol._sqrt_minv = w
    return w


def attach_sqrt_mass_inverse(sol: ZoneSolution, blocks) -> None:
    """Blockwise Mhat^-1/2 (6x6 rigid blocks, diagonal nodes) cached on the solution."""
    n = len(sol.z_star)
    w = np.zeros((n, n))
    for blk in blocks:
        sub = sol.Mhat[blk.zone_dof, blk.zone_dof]
        if blk.kind == "node":
            w[blk.zone_dof, blk.zone_dof] = np.diag(1.0 / np.sqrt(np.diag(sub)))
        else:
            evals, evecs = np.linalg.eigh(sub)
            w[blk.zone_dof, blk.zone_dof] = (evecs / np.sqrt(np.maximum(evals, 1e-300))) @ evecs.T
    sol._sqrt_minv = w


def kkt_backward_qr(sol: ZoneSolution, grad_z: np.ndarray) -> ZoneBackward:
    """QR-accelerated adjoint restricted to strictly active constraints.

    Factors Mhat^-1/2 grad_f^T G_S^T = Q R; the projector I - Q Q^T gives d_z
    and a triangular solve gives the active multiplier adjoints. Dependent
    active rows (rank-deficient R) are dropped smallest-multiplier first.
    """
    lam = sol.lambda_star
    active = [int(i) for i in np.where(lam > ACTIVE_LAMBDA_EPS)[0]]
    w = _sqrt_mass_inverse(sol)
    wg = w @ grad_z
    m = len(sol.h)
    dropped: list[int] = []

    if not active:
        d_z = w @ wg
        return _outputs(sol, d_z, np.zeros(m))

    at_full = sol.grad_f.T @ sol.G.T             # (n, m)
    while True:
        a_tilde = w @ at_full[:, active]          # (n, s)
        q_fac, r_fac = np.linalg.qr(a_tilde, mode="reduced")
        diag = np.abs(np.diag(r_fac))
        if len(active) <= a_tilde.shape[0] and (
                diag.min(initial=np.inf) > RANK_TOL * max(diag.max(initial=1.0), 1.0)):
            break
        # drop the dependent row with the smallest multiplier
        drop = int(np.argmin(lam[active]))
        dropped.append(active.pop(drop))
        if not active:
            d_z = w @ wg
            return _outputs(sol, d_z, np.zeros(m), dropped=dropped)

    d_z = w @ (wg - q_fac @ (q_fac.T @ wg))
    rhs = q_fac.T @ wg
    lam_adj = sla.solve_triangular(r_fac, rhs, lower=False)
    d_lambda = np.zeros(m)
    d_lambda[active] = lam_adj / lam[active]
    return _outputs(sol, d_z, d_lambda, dropped=dropped)


# ---------------------------------------------------------------------------
# Parameter gradients through the zone optimum


@dataclass
class ZoneParamGrads:
    """Gradients w.r.t. quantities the zone treats as structure."""

    mass: dict[int, float] = field(default_factory=dict)       # rigid body index
    density: dict[int, float] = field(default_factory=dict)    # cloth body index
    rot_refs: dict[int, np.ndarray] = field(default_factory=dict)


def zone_parameter_gradients(scene, zone, sol: ZoneSolution, back: ZoneBackward) -> ZoneParamGrads:
    """Pull the Mhat- and vertex-map gradients of a zone back to parameters.

    Mhat enters the stationarity residual as Mhat (z - q); the rigid vertex
    map enters through f and grad_f with the reference-rotated rest vertices
    as coefficients, which chains into the accumulated rotation matrix.
    """
    out = ZoneParamGrads()
    d_z = back.d_z
    err = sol.z_star - sol.q_anchor
    lam = sol.lambda_star
    u = (sol.G.T @ lam).reshape(-1, 3)
    w_vec = (sol.G.T @ (lam * back.d_lambda)).reshape(-1, 3)

    for blk in zone.blocks:
        dzb = d_z[blk.zone_dof]
        eb = err[blk.zone_dof]
        s_blk = -np.outer(dzb, eb)
        body = scene.bodies[blk.body_index]
        if blk.kind == "node":
            a3 = body.node_area3[scene.local_vertex(int(zone.vert_ids[blk.vert_rows[0]]))]
            out.density[blk.body_index] = out.density.get(blk.body_index, 0.0) \
                + a3 * float(np.trace(s_blk))
            continue

        ref = blk.rot_ref
        s_ang = s_blk[:3, :3]
        s_lin = s_blk[3:, 3:]
        iw_unit = ref @ body.inertia_unit @ ref.T
        out.mass[blk.body_index] = out.mass.get(blk.body_index, 0.0) + float(
            np.sum(s_ang * iw_unit) + np.trace(s_lin))
        g_ref = (s_ang + s_ang.T) @ ref @ body.body_inertia

        # vertex-map path: f_k = R(r) p_tilde_k + t with p_tilde = R_ref p_rest
        r_z = sol.z_star[blk.zone_dof][:3]
        b_stack = rotation_derivatives(r_z)
        r_mat = rotation_matrix(r_z)
        bd = np.einsum("j,jab->ab", dzb[:3], b_stack)
        gp = -(u[blk.vert_rows] @ bd) - (w_vec[blk.vert_rows] @ r_mat)
        g_ref += gp.T @ blk.p_rest
        out.rot_refs[blk.body_index] = out.rot_refs.get(blk.body_index, np.zeros((3, 3))) + g_ref
    return out
