"""Mass-weighted impact-zone projection over generalized coordinates.

solve_zone minimizes 0.5 (q - z)^T Mhat (q - z) subject to G f(z) + h <= 0 by
sequential quadratic programming: constraints are linearized at the current
iterate (exactly linear for all-cloth zones, so a single QP suffices) and each
convex subproblem is solved with a primal active-set method that delivers the
exact multipliers required by the implicit differentiation of the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

SQP_STEP_TOL = 1e-10
SQP_MAX_ITERS = 20
ACTIVE_LAMBDA_EPS = 1e-10
FEAS_TOL = 1e-10
NEG_LAMBDA_TOL = 1e-12


@dataclass
class ZoneSolution:
    """Optimum of one zone projection with everything the backward pass needs."""

    z_star: np.ndarray
    lambda_star: np.ndarray
    active_set: np.ndarray           # indices with lambda > ACTIVE_LAMBDA_EPS
    grad_f: np.ndarray               # (3k, n) vertex Jacobian at z_star
    Mhat: np.ndarray                 # (n, n) zone mass matrix
    G: np.ndarray
    h: np.ndarray
    q_anchor: np.ndarray             # pre-collision zone coordinates
    f_star: np.ndarray               # (3k,) vertex positions at z_star
    c_star: np.ndarray               # (m,) constraint values G f_star + h
    converged: bool = True
    sqp_iters: int = 0
    relaxed: bool = False
    notes: list[str] = field(default_factory=list)

    def kkt_residuals(self) -> tuple[float, float, float]:
        """(stationarity, complementarity, feasibility) residual magnitudes."""
        stat = self.Mhat @ (self.z_star - self.q_anchor) \
            + self.grad_f.T @ (self.G.T @ self.lambda_star)
        comp = self.lambda_star * self.c_star
        feas = np.maximum(self.c_star, 0.0)
        return (float(np.abs(stat).max(initial=0.0)),
                float(np.abs(comp).max(initial=0.0)),
                float(feas.max(initial=0.0)))


class ZoneSolveError(RuntimeError):
    pass


def _solve_eqp(p_full: np.ndarray, q_unc_gap: np.ndarray, active: list[int]):
    """Equality-constrained projection for one active set.

    Returns multipliers on the active rows via the Schur system
    P = A Mhat^-1 A^T. Near-duplicate contact rows make P nearly singular;
    those need the minimum-norm solution, or the multipliers explode and the
    primal step goes wild.
    """
    if not active:
        return np.zeros(0)
    sub = p_full[np.ix_(active, active)]
    rhs = q_unc_gap[active]
    evals, evecs = np.linalg.eigh(sub)
    cutoff = 1e-10 * float(evals.max(initial=0.0))
    inv = np.where(evals > cutoff, 1.0 / np.where(evals > cutoff, evals, 1.0), 0.0)
    return evecs @ (inv * (evecs.T @ rhs))


def solve_inequality_qp(mhat: np.ndarray, q: np.ndarray, a_mat: np.ndarray,
                        b_vec: np.ndarray, warm_start=None):
    """min 0.5 (x - q)^T Mhat (x - q)  s.t.  a_mat x <= b_vec.

    Primal active-set iteration on the Schur complement; starts from the
    unconstrained optimum x = q and activates the most violated row. Returns
    (x, lambda, active_list, feasible_flag).
    """
    m = len(b_vec)
    if m == 0:
        return q.copy(), np.zeros(0), [], True

    minv_at = np.linalg.solve(mhat, a_mat.T)
    p_full = a_mat @ minv_at
    gap_unc = a_mat @ q - b_vec           # violation of each row at x = q

    scale = max(1.0, float(np.abs(b_vec).max()), float(np.abs(a_mat @ q).max()))
    feas_tol = FEAS_TOL * scale

    active: list[int] = sorted(set(int(i) for i in (warm_start or [])
                                   if 0 <= int(i) < m))
    seen: set = set()
    max_iters = 12 * (m + 2)
    best = None   # (worst_violation, x, lam, active) best feasible-ish fallback
    bland = False  # switch to lowest-index selection once a cycle is detected

    for _ in range(max_iters):
        lam_active = _solve_eqp(p_full, gap_unc, active)
        if len(active) and lam_active.min() < -NEG_LAMBDA_TOL:
            if bland:
                negs = np.where(lam_active < -NEG_LAMBDA_TOL)[0]
                drop_pos = int(negs[np.argmin([active[i] for i in negs])])
            else:
                drop_pos = int(np.argmin(lam_active))
            active.pop(drop_pos)
            continue
        # x = q - Mhat^-1 A_S^T lam
        x = q - (minv_at[:, active] @ lam_active if active else 0.0)
        viol = a_mat @ x - b_vec
        if bland:
            over = np.where(viol > feas_tol)[0]
            worst = int(over[0]) if len(over) else int(np.argmax(viol))
        else:
            worst = int(np.argmax(viol))
        if best is None or viol.max() < best[0]:
            lam = np.zeros(m)
            lam[active] = np.maximum(lam_active, 0.0)
            best = (viol.max(), x, lam, list(active))
        if viol[worst] <= feas_tol and viol.max() <= feas_tol:
            lam = np.zeros(m)
            lam[active] = np.maximum(lam_active, 0.0)
            return x, lam, list(active), True
        key = frozenset(active + [worst])
        if key in seen:
            if bland:
                break
            bland = True   # anti-cycling: deterministic lowest-index pivoting
            seen.clear()
            continue
        seen.add(key)
        active.append(worst)
        active.sort()

    # Fallback: exhaustive active-set enumeration (small m), else best effort.
    if m <= 16:
        result = _enumerate_qp(mhat, q, a_mat, b_vec, p_full, minv_at, gap_unc, feas_tol)
        if result is not None:
            return result
    return best[1], best[2], best[3], False


def _enumerate_qp(mhat, q, a_mat, b_vec, p_full, minv_at, gap_unc, feas_tol):
    m = len(b_vec)
    best = None
    for size in range(0, m + 1):
        for subset in combinations(range(m), size):
            active = list(subset)
            lam_a = _solve_eqp(p_full, gap_unc, active)
            if len(active) and lam_a.min() < -NEG_LAMBDA_TOL:
                continue
            x = q - (minv_at[:, active] @ lam_a if active else 0.0)
            viol = a_mat @ x - b_vec
            if viol.max(initial=0.0) > feas_tol:
                continue
            obj = 0.5 * (x - q) @ mhat @ (x - q)
            if best is None or obj < best[0] - 1e-15:
                lam = np.zeros(m)
                lam[active] = np.maximum(lam_a, 0.0)
                best = (obj, x, lam, active)
        if best is not None:
            break  # smallest sufficient active set wins
    if best is None:
        return None
    return best[1], best[2], best[3], True


def _sequential_projection(zone, q, mhat, passes=30):
    """Per-constraint mass-weighted projections (bounded fallback).

    Used when the joint QP is wedged by contradictory frozen constraints:
    each projection moves by at most the local violation, so corrections stay
    at physical scale. Multipliers are the accumulated projection impulses.
    """
    z = q.copy()
    m = len(zone.h)
    lam = np.zeros(m)
    best = (np.inf, z.copy(), lam.copy())
    for _ in range(passes):
        grad_f = zone.vertex_jacobian(z)
        a_mat = zone.G @ grad_f
        minv_at = np.linalg.solve(mhat, a_mat.T)
        row_norm = np.einsum("rn,nr->r", a_mat, minv_at)
        c_val = zone.G @ zone.vertex_positions(z) + zone.h
        worst = float(np.maximum(c_val, 0.0).max(initial=0.0))
        if worst < best[0]:
            best = (worst, z.copy(), lam.copy())
        if worst <= 1e-12:
            break
        for r in range(m):
            c_r = float(zone.G[r] @ zone.vertex_positions(z) + zone.h[r])
            if c_r <= 0.0 or row_norm[r] <= 1e-300:
                continue
            scale = c_r / row_norm[r]
            z = z - scale * minv_at[:, r]
            lam[r] += scale
    return best


def solve_zone(zone, q: np.ndarray, mhat: np.ndarray,
               warm_rows=None) -> ZoneSolution:
    """Resolve one impact zone: project q onto the feasible set under Mhat.

    zone provides vertex_positions / vertex_jacobian / G / h; for all-cloth
    zones the constraints are linear in z and one QP is exact. Pathological
    zones (wedged frozen constraints whose joint optimum is far outside the
    linearization's trust region) fall back to sequential projection.
    """
    q = np.asarray(q, dtype=float)
    mhat = np.asarray(mhat, dtype=float)
    n = len(q)
    linear = all(blk.kind == "node" for blk in zone.blocks)

    z = q.copy()
    lam = np.zeros(len(zone.h))
    active: list[int] = sorted(int(r) for r in (warm_rows or []))
    notes: list[str] = []
    converged = False
    feasible = True
    iters = 0

    def true_violation(zv):
        return float(np.maximum(zone.G @ zone.vertex_positions(zv) + zone.h, 0.0)
                     .max(initial=0.0))

    max_outer = 1 if linear else SQP_MAX_ITERS
    for iters in range(1, max_outer + 1):
        grad_f = zone.vertex_jacobian(z)
        f_val = zone.vertex_positions(z)
        c_val = zone.G @ f_val + zone.h
        a_mat = zone.G @ grad_f
        # linearized constraints: a_mat z_new <= a_mat z - c_val
        b_vec = a_mat @ z - c_val
        z_new, lam, active, feasible = solve_inequality_qp(mhat, q, a_mat, b_vec,
                                                           warm_start=active)
        if not linear:
            # the linearization is local: backtrack when the full step makes
            # the true constraint violation worse
            viol_old = true_violation(z)
            t = 1.0
            while t > 1.0 / 64.0 and true_violation(z + t * (z_new - z)) \
                    > max(viol_old, 1e-12) * 1.5 + 1e-12:
                t *= 0.5
            if t < 1.0:
                z_new = z + t * (z_new - z)
                notes.append(f"sqp backtracked to t={t:g} at iteration {iters}")
        step = float(np.linalg.norm(z_new - z))
        z = z_new
        if not feasible:
            notes.append("inner QP fell back without certified feasibility")
        if linear or step < SQP_STEP_TOL:
            converged = True
            break

    if not converged:
        notes.append(f"SQP stopped after {iters} iterations without meeting step tolerance")

    # trust check: a healthy correction has mass-norm comparable to the
    # per-constraint projection distances at the anchor
    grad_q = zone.vertex_jacobian(q)
    a_q = zone.G @ grad_q
    minv_atq = np.linalg.solve(mhat, a_q.T)
    row_norm = np.maximum(np.einsum("rn,nr->r", a_q, minv_atq), 1e-300)
    c_q = np.maximum(zone.G @ zone.vertex_positions(q) + zone.h, 0.0)
    ref_dist = float(np.sqrt((c_q * c_q / row_norm).sum()))
    corr_norm = float(np.sqrt(max((z - q) @ mhat @ (z - q), 0.0)))
    wedged = corr_norm > 100.0 * ref_dist + 1e-12
    if not converged or wedged:
        worst_gs, z_gs, lam_gs = _sequential_projection(zone, q, mhat)
        if wedged or worst_gs <= float(np.maximum(
                zone.G @ zone.vertex_positions(z) + zone.h, 0.0).max(initial=0.0)):
            z, lam = z_gs, lam_gs
            active = [int(i) for i in np.where(lam > ACTIVE_LAMBDA_EPS)[0]]
            notes.append(f"sequential-projection fallback (residual {worst_gs:.3e})")

    grad_f = zone.vertex_jacobian(z)
    f_star = zone.vertex_positions(z)
    c_star = zone.G @ f_star + zone.h

    relaxed = False
    worst = float(c_star.max(initial=0.0))
    if worst > 1e-7 * max(1.0, float(np.abs(zone.h).max(initial=0.0))):
        # infeasible linearization: keep the least-violating iterate, reported
        relaxed = True
        notes.append(f"constraint relaxation: residual violation {worst:.3e}")

    return ZoneSolution(
        z_star=z, lambda_star=lam,
        active_set=np.where(lam > ACTIVE_LAMBDA_EPS)[0],
        grad_f=grad_f, Mhat=mhat, G=zone.G, h=zone.h, q_anchor=q.copy(),
        f_star=f_star, c_star=c_star, converged=converged and feasible,
        sqp_iters=iters, relaxed=relaxed, notes=notes)
