"""Linearized implicit-Euler step and its adjoint.

One step solves (h^-1 M - df/dqdot - h df/dq) dv = f0 + h (df/dq) qdot0 for the
velocity increment, then advances q by h (qdot0 + dv). The system matrix is
block-diagonal across bodies because internal forces never couple bodies;
collision coupling is handled separately by the impact-zone solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bodies import ClothMesh, RigidBody
from .forces import ForceReport, assemble_forces
from .scene import GeneralizedState, Scene

DENSE_BLOCK_LIMIT = 300     # direct LU up to this many DOFs per body block
CG_TOL = 1e-10
RESIDUAL_TOL = 1e-8


class LinearSolveError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class _BodyBlock:
    """Factorized system block for one body."""

    kind: str                 # "lu" or "cg"
    dof: slice
    lu: tuple | None = None
    matrix: sp.csr_matrix | None = None
    precond: spla.LinearOperator | None = None
    pinned_local: np.ndarray | None = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.kind == "lu":
            return sla.lu_solve(self.lu, rhs)
        x, info = spla.cg(self.matrix, rhs, rtol=CG_TOL, atol=0.0,
                          maxiter=10 * self.matrix.shape[0], M=self.precond)
        if info != 0:
            res = np.linalg.norm(self.matrix @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
            raise LinearSolveError("conjugate gradient did not converge", res)
        return x

    @property
    def nbytes(self) -> int:
        if self.kind == "lu":
            return self.lu[0].nbytes + self.lu[1].nbytes
        return self.matrix.data.nbytes


@dataclass
class StepRecord:
    """Saved quantities of one implicit step, enough to replay the adjoint."""

    scene: Scene
    h: float
    q0: np.ndarray
    qdot0: np.ndarray
    control: np.ndarray
    report: ForceReport
    blocks: list[_BodyBlock | None]
    b: np.ndarray
    dqdot: np.ndarray
    rot_refs: tuple[np.ndarray, ...] = ()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rhs)
        for blk in self.blocks:
            if blk is not None:
                out[blk.dof] = blk.solve(rhs[blk.dof])
        return out

    @property
    def nbytes(self) -> int:
        total = self.q0.nbytes + self.qdot0.nbytes + self.control.nbytes
        total += self.b.nbytes + self.dqdot.nbytes + self.report.f.nbytes
        for blk in self.blocks:
            if blk is not None:
                total += blk.nbytes
        for pieces in self.report.cloth_pieces.values():
            total += pieces.jac_stretch_unit.nbytes + pieces.jac_bend_unit.nbytes
            total += pieces.f_stretch_unit.nbytes + pieces.f_bend_unit.nbytes
        return total


def implicit_step(scene: Scene, state: GeneralizedState, control=None, h: float | None = None):
    """One linearized implicit-Euler step; collision handling is not applied here.

    Returns the candidate state (q + h (qdot0 + dv), qdot0 + dv) and a StepRecord.
    """
    h = scene.dt if h is None else float(h)
    if h <= 0.0:
        raise ValueError("step size must be positive")
    report = assemble_forces(scene, state, control)
    control = np.zeros(scene.ndof) if control is None else np.asarray(control, dtype=float)

    b = report.f.copy()
    blocks: list[_BodyBlock | None] = []
    mass_blocks = scene.mass_blocks(state)

    for i, body in enumerate(scene.bodies):
        s = scene.dof_slices[i]
        if s.start == s.stop:
            blocks.append(None)
            continue
        if isinstance(body, RigidBody):
            a = mass_blocks[i] / h
            blocks.append(_BodyBlock(kind="lu", dof=s, lu=sla.lu_factor(a)))
        else:
            jq = report.jac_q_block(i)
            jv = report.jac_v_block(i)
            a = mass_blocks[i] / h - jv - h * jq
            b[s] += h * (jq @ state.qdot[s])
            pinned_local = 3 * np.repeat(body.pinned, 3) + np.tile([0, 1, 2], len(body.pinned)) \
                if len(body.pinned) else np.zeros(0, dtype=int)
            if len(pinned_local):
                a[pinned_local, :] = 0.0
                a[:, pinned_local] = 0.0
                a[pinned_local, pinned_local] = 1.0
                b[s.start + pinned_local] = 0.0
            if a.shape[0] <= DENSE_BLOCK_LIMIT:
                blocks.append(_BodyBlock(kind="lu", dof=s, lu=sla.lu_factor(a),
                                         pinned_local=pinned_local))
            else:
                spm = sp.csr_matrix(a)
                diag = a.diagonal().copy()
                diag[diag == 0.0] = 1.0
                pre = spla.LinearOperator(a.shape, matvec=lambda v, d=diag: v / d)
                blocks.append(_BodyBlock(kind="cg", dof=s, matrix=spm, precond=pre,
                                         pinned_local=pinned_local))

    record = StepRecord(scene=scene, h=h, q0=state.q.copy(), qdot0=state.qdot.copy(),
                        control=control.copy(), report=report, blocks=blocks, b=b,
                        dqdot=np.zeros(scene.ndof), rot_refs=state.rot_refs)
    dv = record.solve(b)

    # Verify the solve: the adjoint reuses these factorizations.
    for blk in blocks:
        if blk is None:
            continue
        s = blk.dof
        if blk.kind == "lu":
            a_dv = _apply_block(record, blk, dv[s])
            res = np.linalg.norm(a_dv - b[s]) / max(np.linalg.norm(b[s]), 1e-300)
            if not np.isfinite(res) or res > RESIDUAL_TOL:
                raise LinearSolveError("implicit step solve failed", res)
    record.dqdot = dv

    qdot_new = state.qdot + dv
    q_new = state.q + h * qdot_new
    return GeneralizedState(q_new, qdot_new, state.rot_refs, state.index_map), record


def _apply_block(record: StepRecord, blk: _BodyBlock, v: np.ndarray) -> np.ndarray:
    if blk.kind == "cg":
        return blk.matrix @ v
    return _reconstruct_apply(blk, v)


def _reconstruct_apply(blk: _BodyBlock, v: np.ndarray) -> np.ndarray:
    lu, piv = blk.lu
    l_fac = np.tril(lu, -1) + np.eye(lu.shape[0])
    u_fac = np.triu(lu)
    out = l_fac @ (u_fac @ v)
    # undo row pivoting: P A = L U  ->  A v = P^T (L U v)
    perm = np.arange(lu.shape[0])
    for i, p in enumerate(piv):
        perm[[i, p]] = perm[[p, i]]
    result = np.empty_like(out)
    result[perm] = out
    return result


@dataclass
class StepGradients:
    """Adjoint outputs of one implicit step."""

    q0: np.ndarray
    qdot0: np.ndarray
    control: np.ndarray
    mass: dict[int, float] = field(default_factory=dict)       # rigid body -> d/dmass
    density: dict[int, float] = field(default_factory=dict)    # cloth -> d/ddensity
    stretch: dict[int, float] = field(default_factory=dict)
    bend: dict[int, float] = field(default_factory=dict)
    damping: dict[int, float] = field(default_factory=dict)
    rot_refs: dict[int, np.ndarray] = field(default_factory=dict)  # rigid body -> 3x3


def implicit_step_backward(record: StepRecord, grad_q_new: np.ndarray,
                           grad_qdot_new: np.ndarray) -> StepGradients:
    """Adjoint of implicit_step via the transposed block solve.

    Incoming gradients are with respect to the candidate (q_new, qdot_new);
    outputs cover the pre-step state, the control vector, and physical
    parameters (rigid masses, cloth density/stiffness/damping, accumulated
    rotations through the mass matrix).
    """
    scene, h = record.scene, record.h
    g_dv = grad_qdot_new + h * grad_q_new
    grads = StepGradients(q0=grad_q_new.copy(), qdot0=g_dv.copy(), control=np.zeros(scene.ndof))

    if not np.any(g_dv):
        return grads

    y = record.solve(g_dv)  # A is symmetric, so A^T y = g
    for blk in record.blocks:
        if blk is not None and blk.pinned_local is not None and len(blk.pinned_local):
            y[blk.dof.start + blk.pinned_local] = 0.0

    grads.control = y.copy()
    report = record.report
    dv = record.dqdot

    hvp_term = report.hvp(y, record.qdot0 + dv)
    grads.q0 += h * hvp_term

    for i, body in enumerate(scene.bodies):
        s = scene.dof_slices[i]
        if s.start == s.stop:
            continue
        ys = y[s]
        dvs = dv[s]
        if isinstance(body, RigidBody):
            ref = record.rot_refs[scene.rigid_indices.index(i)]
            iw_unit = ref @ body.inertia_unit @ ref.T
            # d(b)/dm = gravity on linear DOFs; d(A)/dm = Mhat/(m h).
            gm = float(ys[3:] @ scene.gravity)
            gm -= (ys[:3] @ iw_unit @ dvs[:3] + ys[3:] @ dvs[3:]) / h
            grads.mass[i] = grads.mass.get(i, 0.0) + gm
            # d(A)/dR through the world inertia R I_body R^T.
            outer = np.outer(ys[:3], dvs[:3])
            grads.rot_refs[i] = grads.rot_refs.get(i, np.zeros((3, 3))) - (
                (outer + outer.T) @ ref @ body.body_inertia) / h
        else:
            jq = report.jac_q_block(i)
            jv = report.jac_v_block(i)
            grads.q0[s] += jq.T @ ys
            grads.qdot0[s] += jv.T @ ys + h * (jq.T @ ys)
            pieces = report.cloth_pieces[i]
            js_w = pieces.jac_stretch_unit @ (record.qdot0[s] + dvs)
            jb_w = pieces.jac_bend_unit @ (record.qdot0[s] + dvs)
            grads.stretch[i] = grads.stretch.get(i, 0.0) + float(
                ys @ pieces.f_stretch_unit + h * (ys @ js_w))
            grads.bend[i] = grads.bend.get(i, 0.0) + float(
                ys @ pieces.f_bend_unit + h * (ys @ jb_w))
            # damping: f has -c qdot0, A has +c I on cloth DOFs.
            grads.damping[i] = grads.damping.get(i, 0.0) + float(
                -(ys @ record.qdot0[s]) - ys @ dvs)
            # density: gravity mass term in b, lumped masses in A.
            area3 = np.repeat(body.node_area3, 3)
            gvec = np.tile(scene.gravity, body.n_nodes)
            grads.density[i] = grads.density.get(i, 0.0) + float(
                ys @ (area3 * gvec) - (ys @ (area3 * dvs)) / h)
    return grads
