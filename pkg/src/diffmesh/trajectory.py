"""Trajectory rollout and reverse-mode gradient propagation.

A step is integrate -> resolve collisions -> rebase: after collision handling
the incremental Euler angles of every free rigid body are folded into its
accumulated rotation matrix and the angular rates are mapped back through the
angular-velocity map, so each step starts at zero angles. The backward walk
chains those three stages in reverse, carrying (dL/dq, dL/dqdot, dL/dR_ref)
between steps and accumulating control and physical-parameter gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bodies import ClothMesh, RigidBody
from .contact import CollisionTape, collision_backward, resolve_collisions
from .integrator import StepRecord, implicit_step, implicit_step_backward
from .rotations import (
    angular_velocity_map,
    angular_velocity_map_derivatives,
    rotation_derivatives,
    rotation_matrix,
)
from .scene import GeneralizedState, Scene


@dataclass
class RebaseTape:
    """Per-step fold of incremental rotations into the accumulated references."""

    r_star: dict[int, np.ndarray]          # body index -> incremental angles
    qdot_rot_star: dict[int, np.ndarray]   # body index -> pre-rebase angular rates
    rot_ref_old: dict[int, np.ndarray]

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.r_star.values()) * 5


@dataclass
class StepTape:
    record: StepRecord
    collision: CollisionTape
    rebase: RebaseTape

    @property
    def nbytes(self) -> int:
        return self.record.nbytes + self.collision.nbytes + self.rebase.nbytes


@dataclass
class Trajectory:
    scene: Scene
    h: float
    states: list[GeneralizedState]
    tapes: list[StepTape]
    controls: np.ndarray                   # (T, ndof)
    step_times: list[float] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.tapes)

    @property
    def tape_bytes(self) -> int:
        return sum(t.nbytes for t in self.tapes)

    def counters(self):
        """Per-step (n_impacts, n_zones, zone_dof_total)."""
        return [(t.collision.n_impacts, t.collision.n_zones, t.collision.zone_dof_total)
                for t in self.tapes]


def _rebase(scene: Scene, state: GeneralizedState):
    q = state.q.copy()
    qdot = state.qdot.copy()
    refs = list(r.copy() for r in state.rot_refs)
    tape = RebaseTape(r_star={}, qdot_rot_star={}, rot_ref_old={})
    for pos, i in enumerate(scene.rigid_indices):
        body = scene.bodies[i]
        if body.static:
            continue
        s = scene.dof_slices[i]
        r_star = q[s][:3].copy()
        w_star = qdot[s][:3].copy()
        tape.r_star[i] = r_star
        tape.qdot_rot_star[i] = w_star
        tape.rot_ref_old[i] = refs[pos].copy()
        refs[pos] = rotation_matrix(r_star) @ refs[pos]
        q[s.start:s.start + 3] = 0.0
        qdot[s.start:s.start + 3] = angular_velocity_map(r_star) @ w_star
    return GeneralizedState(q, qdot, tuple(refs), state.index_map), tape


def canonicalize(scene: Scene, state: GeneralizedState) -> GeneralizedState:
    """Fold any nonzero rigid angles into rot_refs and zero pinned velocities."""
    state, _ = _rebase(scene, state)
    if len(scene.pinned_dofs):
        qdot = state.qdot.copy()
        qdot[scene.pinned_dofs] = 0.0
        state = GeneralizedState(state.q, qdot, state.rot_refs, state.index_map)
    return state


def simulate(scene: Scene, initial_state: GeneralizedState | None = None,
             controls=None, steps: int = 0, h: float | None = None) -> Trajectory:
    """Roll out steps of integrate -> resolve_collisions -> rebase."""
    h = scene.dt if h is None else float(h)
    state = scene.initial_state() if initial_state is None else initial_state
    state = canonicalize(scene, state)
    if controls is None:
        controls = np.zeros((steps, scene.ndof))
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (steps, scene.ndof):
        raise ValueError(f"controls shape {controls.shape} != ({steps}, {scene.ndof})")

    states = [state]
    tapes: list[StepTape] = []
    times: list[float] = []
    for k in range(steps):
        t0 = time.perf_counter()
        cand, record = implicit_step(scene, state, controls[k], h=h)
        corrected, coll = resolve_collisions(scene, state, cand, h)
        state, rebase_tape = _rebase(scene, corrected)
        times.append(time.perf_counter() - t0)
        states.append(state)
        tapes.append(StepTape(record=record, collision=coll, rebase=rebase_tape))
    return Trajectory(scene=scene, h=h, states=states, tapes=tapes,
                      controls=controls.copy(), step_times=times)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossSpec:
    """Scalar objective over a trajectory.

    kinds: target_position (body COM to target at a frame),
    target_momentum (total linear momentum to target at a frame),
    control_effort (0.5 * weight * sum of squared controls),
    weighted_sum (combine components).
    """

    kind: str
    target: np.ndarray | None = None
    weight: float = 1.0
    frame: int | str = "final"
    body: int = 0
    components: list = field(default_factory=list)

    @staticmethod
    def weighted_sum(components) -> "LossSpec":
        return LossSpec(kind="weighted_sum", components=list(components))


def _loss_frame(spec: LossSpec, n_steps: int) -> int:
    return n_steps if spec.frame == "final" else int(spec.frame)


def evaluate_loss(traj: Trajectory, spec: LossSpec) -> float:
    return _loss_eval(traj, spec, seeds=None, grads=None)


def _loss_eval(traj, spec, seeds, grads) -> float:
    """Loss value; when seeds/grads are given, also accumulate adjoint seeds."""
    scene = traj.scene
    if spec.kind == "weighted_sum":
        return sum(_loss_eval(traj, c, seeds, grads) for c in spec.components)

    if spec.kind == "control_effort":
        val = 0.5 * spec.weight * float((traj.controls ** 2).sum())
        if grads is not None:
            grads.controls += spec.weight * traj.controls
        return val

    frame = _loss_frame(spec, traj.n_steps)
    state = traj.states[frame]
    if spec.kind == "target_position":
        body = scene.bodies[spec.body]
        s = scene.dof_slices[spec.body]
        com = scene.body_com(state, spec.body)
        diff = spec.weight * (com - np.asarray(spec.target, dtype=float))
        if seeds is not None:
            gq, gqd = seeds.setdefault(frame, _zero_seed(scene))[:2]
            if isinstance(body, RigidBody):
                gq[s.start + 3:s.stop] += diff
            else:
                w = body.node_area3 / body.node_area3.sum()
                gq[s] += np.repeat(w, 3) * np.tile(diff, body.n_nodes)
        return 0.5 / spec.weight * float(diff @ diff) if spec.weight else 0.0

    if spec.kind == "target_momentum":
        p = scene.linear_momentum(state)
        diff = spec.weight * (p - np.asarray(spec.target, dtype=float))
        if seeds is not None:
            gq, gqd = seeds.setdefault(frame, _zero_seed(scene))[:2]
            for i, body in enumerate(scene.bodies):
                s = scene.dof_slices[i]
                if s.start == s.stop:
                    continue
                if isinstance(body, RigidBody):
                    gqd[s.start + 3:s.stop] += body.mass * diff
                    if grads is not None:
                        grads.mass[i] = grads.mass.get(i, 0.0) + float(
                            diff @ state.qdot[s][3:])
                else:
                    gqd[s] += np.repeat(body.node_area3 * body.density, 3) * np.tile(
                        diff, body.n_nodes)
                    if grads is not None:
                        vel = state.qdot[s].reshape(-1, 3)
                        grads.density[i] = grads.density.get(i, 0.0) + float(
                            diff @ (body.node_area3 @ vel))
        return 0.5 / spec.weight * float(diff @ diff) if spec.weight else 0.0

    raise ValueError(f"unknown loss kind {spec.kind!r}")


def _zero_seed(scene: Scene):
    return [np.zeros(scene.ndof), np.zeros(scene.ndof)]


# ---------------------------------------------------------------------------
# Backward


@dataclass
class TrajectoryGradients:
    controls: np.ndarray
    init_q: np.ndarray
    init_qdot: np.ndarray
    mass: dict[int, float] = field(default_factory=dict)
    density: dict[int, float] = field(default_factory=dict)
    stretch: dict[int, float] = field(default_factory=dict)
    bend: dict[int, float] = field(default_factory=dict)
    damping: dict[int, float] = field(default_factory=dict)
    thickness: float | None = None

    def by_name(self, name: str):
        return getattr(self, name)


def backward(traj: Trajectory, loss: LossSpec, use_qr: bool = True,
             track_thickness: bool = False):
    """Loss value and gradients w.r.t. controls, initial state, and parameters.

    Walks the tape in reverse: rebase adjoint, zone KKT adjoint (QR path by
    default), then the implicit-step adjoint. Rotation-reference gradients are
    carried as 3x3 matrix adjoints between steps and folded into the initial
    incremental-rotation gradient at the end.
    """
    scene = traj.scene
    n = scene.ndof
    t_steps = traj.n_steps
    grads = TrajectoryGradients(controls=np.zeros((t_steps, n)),
                                init_q=np.zeros(n), init_qdot=np.zeros(n),
                                thickness=0.0 if track_thickness else None)
    seeds: dict[int, list[np.ndarray]] = {}
    value = _loss_eval(traj, loss, seeds, grads)

    gq = np.zeros(n)
    gqd = np.zeros(n)
    g_ref = {i: np.zeros((3, 3)) for i in scene.free_rigid_indices}

    for k in range(t_steps - 1, -1, -1):
        if k + 1 in seeds:
            gq += seeds[k + 1][0]
            gqd += seeds[k + 1][1]
        tape = traj.tapes[k]

        # rebase adjoint: angles were zeroed, rates mapped by T(r*), and
        # R_new = R(r*) R_old; incoming gq rotation entries refer to the
        # zeroed angles and are constants, so they are replaced, not chained.
        for i, r_star in tape.rebase.r_star.items():
            s = scene.dof_slices[i]
            rot = slice(s.start, s.start + 3)
            t_map = angular_velocity_map(r_star)
            dt_stack = angular_velocity_map_derivatives(r_star)
            b_stack = rotation_derivatives(r_star)
            w_star = tape.rebase.qdot_rot_star[i]
            ref_old = tape.rebase.rot_ref_old[i]
            g_rot_next = gqd[rot].copy()
            g_rstar = np.array([g_rot_next @ (dt_stack[j] @ w_star) for j in range(3)])
            g_rstar += np.array([float(np.sum(g_ref[i] * (b_stack[j] @ ref_old)))
                                 for j in range(3)])
            gq[rot] = g_rstar
            gqd[rot] = t_map.T @ g_rot_next
            g_ref[i] = rotation_matrix(r_star).T @ g_ref[i]

        cg = collision_backward(scene, tape.collision, gq, gqd, traj.h,
                                use_qr=use_qr, track_thickness=track_thickness)
        for i, val in cg.params.mass.items():
            grads.mass[i] = grads.mass.get(i, 0.0) + val
        for i, val in cg.params.density.items():
            grads.density[i] = grads.density.get(i, 0.0) + val
        for i, val in cg.params.rot_refs.items():
            g_ref[i] += val
        if track_thickness:
            grads.thickness += cg.thickness

        sg = implicit_step_backward(tape.record, cg.q_candidate, cg.qdot_candidate)
        grads.controls[k] += sg.control
        for container, name in ((sg.mass, "mass"), (sg.density, "density"),
                                (sg.stretch, "stretch"), (sg.bend, "bend"),
                                (sg.damping, "damping")):
            target = getattr(grads, name)
            for i, val in container.items():
                target[i] = target.get(i, 0.0) + val
        for i, val in sg.rot_refs.items():
            g_ref[i] += val
        gq = sg.q0
        gqd = sg.qdot0

    if 0 in seeds:
        gq += seeds[0][0]
        gqd += seeds[0][1]

    grads.init_q = gq
    grads.init_qdot = gqd
    # initial rotational sensitivity: derivative along incremental rotations
    # of the initial orientation (the canonical initial angles are zero).
    b0 = rotation_derivatives(np.zeros(3))
    for i in scene.free_rigid_indices:
        s = scene.dof_slices[i]
        ref0 = traj.states[0].rot_refs[scene.rigid_indices.index(i)]
        grads.init_q[s.start:s.start + 3] = [
            float(np.sum(g_ref[i] * (b0[j] @ ref0))) for j in range(3)]
    if len(scene.pinned_dofs):
        grads.init_qdot[scene.pinned_dofs] = 0.0
    return value, grads
