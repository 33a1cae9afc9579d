"""Generalized force assembly with analytic first and directional second derivatives.

Forces: gravity, per-step control, cloth stretch springs, cloth dihedral
bending, and viscous cloth damping. Jacobians are exact; the hvp callback
returns the third-derivative contraction needed by exact step adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .bodies import ClothMesh, RigidBody
from .jets import Jet1, Jet2, jet1_atan2, jet2_atan2, vcross, vdot, vsub
from .scene import GeneralizedState, Scene


@dataclass
class ClothForcePieces:
    """Per-cloth unit-stiffness components, so stiffness is a linear parameter."""

    f_stretch_unit: np.ndarray       # force at stretch_stiffness = 1
    jac_stretch_unit: np.ndarray     # dense (3n, 3n) block at unit stiffness
    f_bend_unit: np.ndarray
    jac_bend_unit: np.ndarray
    f_damp_unit: np.ndarray          # -qdot (damping = 1)


@dataclass
class ForceReport:
    """Forces plus the derivative structure of one evaluation point."""

    f: np.ndarray
    scene: Scene
    state: GeneralizedState
    cloth_pieces: dict[int, ClothForcePieces]
    hvp: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(default=None, compare=False)

    def jac_q_block(self, body_index: int) -> np.ndarray | None:
        """Dense dfdq block for one body (None when identically zero)."""
        pieces = self.cloth_pieces.get(body_index)
        if pieces is None:
            return None
        cloth = self.scene.bodies[body_index]
        return (cloth.stretch_stiffness * pieces.jac_stretch_unit
                + cloth.bend_stiffness * pieces.jac_bend_unit)

    def jac_v_block(self, body_index: int) -> np.ndarray | None:
        pieces = self.cloth_pieces.get(body_index)
        if pieces is None:
            return None
        cloth = self.scene.bodies[body_index]
        diag = np.full(cloth.ndof, -cloth.damping)
        if len(cloth.pinned):
            pl = 3 * np.repeat(cloth.pinned, 3) + np.tile([0, 1, 2], len(cloth.pinned))
            diag[pl] = 0.0
        return np.diag(diag)

    @property
    def dfdq(self) -> sp.csr_matrix:
        return self._block_matrix(self.jac_q_block)

    @property
    def dfdqdot(self) -> sp.csr_matrix:
        return self._block_matrix(self.jac_v_block)

    def _block_matrix(self, block_fn) -> sp.csr_matrix:
        n = self.scene.ndof
        mat = sp.lil_matrix((n, n))
        for i in self.cloth_pieces:
            s = self.scene.dof_slices[i]
            blk = block_fn(i)
            if blk is not None:
                mat[s, s] = blk
        return mat.tocsr()


def assemble_forces(scene: Scene, state: GeneralizedState, control=None) -> ForceReport:
    """Generalized force vector and derivative structure at (q, qdot)."""
    n = scene.ndof
    if control is None:
        control = np.zeros(n)
    control = np.asarray(control, dtype=float)
    if control.shape != (n,):
        raise ValueError(f"control shape {control.shape} != ({n},)")
    if state.q.shape != (n,) or state.qdot.shape != (n,):
        raise ValueError("state dimensions do not match scene")

    f = control.copy()
    pieces: dict[int, ClothForcePieces] = {}

    for i, body in enumerate(scene.bodies):
        s = scene.dof_slices[i]
        if s.start == s.stop:
            continue
        if isinstance(body, RigidBody):
            f[s.start + 3:s.stop] += body.mass * scene.gravity
        else:
            x = state.q[s].reshape(-1, 3)
            v = state.qdot[s]
            fs, js = _stretch_forces_unit(x, body.edges, body.rest_lengths)
            fb, jb = _bend_forces_unit(x, body.dihedrals, body.rest_angles)
            if len(body.pinned):
                pl = 3 * np.repeat(body.pinned, 3) + np.tile([0, 1, 2], len(body.pinned))
                fs[pl] = 0.0
                fb[pl] = 0.0
                js[pl, :] = 0.0
                jb[pl, :] = 0.0
            pieces[i] = ClothForcePieces(
                f_stretch_unit=fs, jac_stretch_unit=js,
                f_bend_unit=fb, jac_bend_unit=jb, f_damp_unit=-v.copy())
            f[s] += (body.stretch_stiffness * fs + body.bend_stiffness * fb
                     - body.damping * v
                     + np.tile(scene.gravity, body.n_nodes) * np.repeat(body.node_masses, 3))

    if len(scene.pinned_dofs):
        f[scene.pinned_dofs] = 0.0

    def hvp(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        """sum_ij y_i w_j d2f_i / dq_j dq_k, as a vector over k.

        Pinned force rows carry no second derivatives: their y entries are
        masked to match the zeroed rows of the assembled force field.
        """
        out = np.zeros(n)
        if len(scene.pinned_dofs):
            y = y.copy()
            y[scene.pinned_dofs] = 0.0
        for ci in pieces:
            cloth = scene.bodies[ci]
            s = scene.dof_slices[ci]
            x = state.q[s].reshape(-1, 3)
            yl, wl = y[s], w[s]
            out[s] += cloth.stretch_stiffness * _stretch_hvp_unit(
                x, cloth.edges, cloth.rest_lengths, yl, wl)
            out[s] += cloth.bend_stiffness * _bend_hvp_unit(
                x, cloth.dihedrals, cloth.rest_angles, yl, wl)
        return out

    return ForceReport(f=f, scene=scene, state=state, cloth_pieces=pieces, hvp=hvp)


# ---------------------------------------------------------------------------
# Stretch springs (analytic)


def _stretch_forces_unit(x, edges, rest):
    """Spring force -(|e| - L0) e_hat per edge at unit stiffness, plus its Jacobian."""
    nn = len(x)
    f = np.zeros((nn, 3))
    jac = np.zeros((3 * nn, 3 * nn))
    if len(edges) == 0:
        return f.reshape(-1), jac
    e = x[edges[:, 1]] - x[edges[:, 0]]
    ln = np.linalg.norm(e, axis=1)
    ehat = e / ln[:, None]
    fj = -(ln - rest)[:, None] * ehat
    np.add.at(f, edges[:, 1], fj)
    np.add.at(f, edges[:, 0], -fj)

    # H = d f_j / d x_j = -[(1 - L0/L) I + (L0/L) e e^T]
    ratio = rest / ln
    outer = np.einsum("ei,ej->eij", ehat, ehat)
    h = -((1.0 - ratio)[:, None, None] * np.eye(3) + ratio[:, None, None] * outer)
    for k, (i, j) in enumerate(edges):
        ii, jj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
        jac[ii, ii] += h[k]
        jac[jj, jj] += h[k]
        jac[ii, jj] -= h[k]
        jac[jj, ii] -= h[k]
    return f.reshape(-1), jac


def _stretch_hvp_unit(x, edges, rest, y, w):
    """Third-derivative contraction of the stretch energy at unit stiffness."""
    nn = len(x)
    out = np.zeros((nn, 3))
    if len(edges) == 0:
        return out.reshape(-1)
    y = y.reshape(-1, 3)
    w = w.reshape(-1, 3)
    e = x[edges[:, 1]] - x[edges[:, 0]]
    ln = np.linalg.norm(e, axis=1)
    ehat = e / ln[:, None]
    yb = y[edges[:, 1]] - y[edges[:, 0]]
    wb = w[edges[:, 1]] - w[edges[:, 0]]
    a = np.einsum("ij,ij->i", yb, wb)
    u = np.einsum("ij,ij->i", yb, ehat)
    v = np.einsum("ij,ij->i", wb, ehat)
    proj_y = yb - u[:, None] * ehat
    proj_w = wb - v[:, None] * ehat
    grad = -(rest / ln ** 2)[:, None] * (
        (a - u * v)[:, None] * ehat + v[:, None] * proj_y + u[:, None] * proj_w)
    np.add.at(out, edges[:, 1], grad)
    np.add.at(out, edges[:, 0], -grad)
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# Dihedral bending: analytic gradient kernel, jets for higher derivatives


def _bend_kernel(xc, rest, sqrt_fn, atan2_fn):
    """Bending force at unit stiffness for hinge coordinates xc (12 scalars).

    xc is a list of 12 scalar-likes ordered (x0, x1, x2, x3) * (x, y, z);
    returns 12 force components. The scalars may be numpy arrays or jets.
    """
    x0, x1, x2, x3 = (xc[3 * k:3 * k + 3] for k in range(4))
    e = vsub(x1, x0)
    n1 = vcross(vsub(x1, x0), vsub(x2, x0))
    n2 = vcross(vsub(x3, x0), vsub(x1, x0))
    en2 = vdot(e, e)
    n1sq = vdot(n1, n1)
    n2sq = vdot(n2, n2)
    en = sqrt_fn(en2)
    n1n = sqrt_fn(n1sq)
    n2n = sqrt_fn(n2sq)
    cos = vdot(n1, n2) / (n1n * n2n)
    sin = vdot(vcross(n2, n1), e) / (en * n1n * n2n)
    theta = atan2_fn(sin, cos)

    c2 = en / n1sq
    c3 = en / n2sq
    c0a = vdot(vsub(x2, x1), e) / (en * n1sq)
    c0b = vdot(vsub(x3, x1), e) / (en * n2sq)
    c1a = vdot(vsub(x2, x0), e) / (en * n1sq)
    c1b = vdot(vsub(x3, x0), e) / (en * n2sq)

    scale = -(theta - rest)
    out = []
    for c in range(3):
        out.append(scale * (c0a * n1[c] + c0b * n2[c]))       # node 0
    for c in range(3):
        out.append(scale * (-(c1a * n1[c]) - c1b * n2[c]))    # node 1
    for c in range(3):
        out.append(scale * (c2 * n1[c]))                      # node 2
    for c in range(3):
        out.append(scale * (c3 * n2[c]))                      # node 3
    return out


def _gather_hinge_coords(x, quads):
    """(D, 12) array of hinge coordinates in kernel order."""
    cols = []
    for k in range(4):
        pts = x[quads[:, k]]
        cols.extend([pts[:, 0], pts[:, 1], pts[:, 2]])
    return cols  # list of 12 (D,) arrays


def _bend_forces_unit(x, quads, rest):
    nn = len(x)
    f = np.zeros((nn, 3))
    jac = np.zeros((3 * nn, 3 * nn))
    if len(quads) == 0:
        return f.reshape(-1), jac
    coords = _gather_hinge_coords(x, quads)
    vals = _bend_kernel(coords, rest, np.sqrt, np.arctan2)
    for slot in range(4):
        block = np.column_stack([vals[3 * slot], vals[3 * slot + 1], vals[3 * slot + 2]])
        np.add.at(f, quads[:, slot], block)

    # Jacobian: one Jet1 pass per local coordinate.
    d = len(quads)
    jloc = np.empty((d, 12, 12))
    for k in range(12):
        jet_coords = [Jet1(coords[a], np.ones(d) if a == k else np.zeros(d)) for a in range(12)]
        jf = _bend_kernel(jet_coords, rest, lambda t: t.sqrt(), jet1_atan2)
        for a in range(12):
            jloc[:, a, k] = jf[a].d
    _scatter_local_jacobian(jac, jloc, quads)
    return f.reshape(-1), jac


def _scatter_local_jacobian(jac, jloc, quads):
    idx = np.empty((len(quads), 12), dtype=int)
    for slot in range(4):
        for c in range(3):
            idx[:, 3 * slot + c] = 3 * quads[:, slot] + c
    for a in range(12):
        for b in range(12):
            np.add.at(jac, (idx[:, a], idx[:, b]), jloc[:, a, b])


def _bend_hvp_unit(x, quads, rest, y, w):
    """Contraction sum_ij y_i w_j d2f_i/dq_j dq_k via one Jet2 pass per coordinate."""
    nn = len(x)
    out = np.zeros(3 * nn)
    if len(quads) == 0:
        return out
    d = len(quads)
    coords = _gather_hinge_coords(x, quads)
    idx = np.empty((d, 12), dtype=int)
    for slot in range(4):
        for c in range(3):
            idx[:, 3 * slot + c] = 3 * quads[:, slot] + c
    wloc = w[idx]   # (D, 12)
    yloc = y[idx]
    zeros = np.zeros(d)
    for k in range(12):
        jet_coords = [Jet2(coords[a], wloc[:, a], np.ones(d) if a == k else zeros, zeros)
                      for a in range(12)]
        jf = _bend_kernel(jet_coords, rest, lambda t: t.sqrt(), jet2_atan2)
        # d12 of f_a = d/d e_k of (J w)_a; contract with y.
        contrib = np.zeros(d)
        for a in range(12):
            contrib += yloc[:, a] * jf[a].d12
        np.add.at(out, idx[:, k], contrib)
    return out
