"""Scene container: bodies, DOF layout, vertex registry, world-space queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bodies import ClothMesh, RigidBody
from .rotations import rotation_matrix, transform_points


@dataclass(frozen=True)
class GroundPlane:
    """Static half-space n . x >= offset (n unit, pointing out of the ground)."""

    normal: np.ndarray
    offset: float

    @staticmethod
    def at_height(height: float, normal=(0.0, 0.0, 1.0)) -> "GroundPlane":
        """Plane through the point height * n, i.e. offset = height for unit n."""
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return GroundPlane(normal=n, offset=float(height))


@dataclass(frozen=True)
class GeneralizedState:
    """Flat coordinates and velocities plus per-rigid-body accumulated rotations.

    Rigid angular entries in q are incremental Euler angles relative to the
    body's rot_refs matrix; they are zero at the start of every step.
    """

    q: np.ndarray
    qdot: np.ndarray
    rot_refs: tuple[np.ndarray, ...]
    index_map: dict[int, slice] = field(default_factory=dict, compare=False)

    def copy(self) -> "GeneralizedState":
        return GeneralizedState(self.q.copy(), self.qdot.copy(),
                                tuple(r.copy() for r in self.rot_refs), self.index_map)


class Scene:
    """Immutable simulation setup: bodies in DOF order plus global parameters.

    Static rigid bodies carry no DOFs; their vertices only feed constraints.
    """

    def __init__(self, bodies, gravity=(0.0, 0.0, -9.8), dt=1.0 / 150.0,
                 thickness=1e-3, ground: GroundPlane | None = None):
        self.bodies = list(bodies)
        self.gravity = np.asarray(gravity, dtype=float)
        self.dt = float(dt)
        self.thickness = float(thickness)
        self.ground = ground

        self.dof_slices: list[slice] = []
        offset = 0
        for body in self.bodies:
            n = 0 if getattr(body, "static", False) else body.ndof
            self.dof_slices.append(slice(offset, offset + n))
            offset += n
        self.ndof = offset
        self.index_map = {i: s for i, s in enumerate(self.dof_slices)}

        # Global vertex registry: every mesh vertex gets one id, including
        # vertices of static bodies (their positions are constants).
        self.vert_offsets: list[int] = []
        voff = 0
        for body in self.bodies:
            self.vert_offsets.append(voff)
            voff += body.n_vertices if isinstance(body, RigidBody) else body.n_nodes
        self.n_vertices = voff
        self._vert_body = np.empty(voff, dtype=int)
        for i, body in enumerate(self.bodies):
            n = body.n_vertices if isinstance(body, RigidBody) else body.n_nodes
            self._vert_body[self.vert_offsets[i]:self.vert_offsets[i] + n] = i

        self.rigid_indices = [i for i, b in enumerate(self.bodies) if isinstance(b, RigidBody)]
        self.cloth_indices = [i for i, b in enumerate(self.bodies) if isinstance(b, ClothMesh)]
        self.free_rigid_indices = [i for i in self.rigid_indices if not self.bodies[i].static]

        self._masses = self._assemble_masses()
        self._pinned_dofs = self._assemble_pinned()

    # -- layout ------------------------------------------------------------

    def body_of_vertex(self, vid: int) -> int:
        return int(self._vert_body[vid])

    def local_vertex(self, vid: int) -> int:
        return vid - self.vert_offsets[self.body_of_vertex(vid)]

    def _assemble_masses(self) -> np.ndarray:
        m = np.zeros(self.ndof)
        for i, body in enumerate(self.bodies):
            s = self.dof_slices[i]
            if s.start == s.stop:
                continue
            if isinstance(body, RigidBody):
                m[s] = body.mass  # angular part replaced by the inertia block in solvers
            else:
                m[s] = np.repeat(body.node_masses, 3)
        return m

    def _assemble_pinned(self) -> np.ndarray:
        pins = []
        for i, body in enumerate(self.bodies):
            if isinstance(body, ClothMesh) and len(body.pinned):
                base = self.dof_slices[i].start
                for nid in body.pinned:
                    pins.extend(range(base + 3 * nid, base + 3 * nid + 3))
        return np.array(sorted(pins), dtype=int)

    @property
    def pinned_dofs(self) -> np.ndarray:
        return self._pinned_dofs

    def is_vertex_movable(self, vid: int) -> bool:
        """Vertices of static bodies and pinned cloth nodes do not carry DOFs."""
        bi = self.body_of_vertex(vid)
        body = self.bodies[bi]
        if getattr(body, "static", False):
            return False
        if isinstance(body, ClothMesh):
            return self.local_vertex(vid) not in set(int(k) for k in body.pinned)
        return True

    # -- state construction -------------------------------------------------

    def initial_state(self) -> GeneralizedState:
        """Canonical initial state: rigid Euler angles folded into rot_refs."""
        q = np.zeros(self.ndof)
        qdot = np.zeros(self.ndof)
        refs = []
        for i, body in enumerate(self.bodies):
            s = self.dof_slices[i]
            if isinstance(body, RigidBody):
                refs.append(rotation_matrix(body.initial_pose[:3]))
                if s.start != s.stop:
                    q[s.start + 3:s.stop] = body.initial_pose[3:]
                    qdot[s] = body.initial_velocity
            else:
                q[s] = body.nodes0.reshape(-1)
                if body.initial_velocity is not None:
                    qdot[s] = np.asarray(body.initial_velocity, dtype=float).reshape(-1)
        if len(self._pinned_dofs):
            qdot[self._pinned_dofs] = 0.0
        return GeneralizedState(q, qdot, tuple(refs), self.index_map)

    def rot_ref_of(self, state: GeneralizedState, body_index: int) -> np.ndarray:
        return state.rot_refs[self.rigid_indices.index(body_index)]

    # -- world-space queries -------------------------------------------------

    def world_positions(self, state: GeneralizedState) -> np.ndarray:
        """(n_vertices, 3) world positions for all bodies, static included."""
        out = np.empty((self.n_vertices, 3))
        for i, body in enumerate(self.bodies):
            base = self.vert_offsets[i]
            s = self.dof_slices[i]
            if isinstance(body, RigidBody):
                if body.static:
                    r = rotation_matrix(body.initial_pose[:3])
                    out[base:base + body.n_vertices] = body.rest_vertices @ r.T + body.initial_pose[3:]
                else:
                    ref = self.rot_ref_of(state, i)
                    pts = body.rest_vertices @ ref.T
                    out[base:base + body.n_vertices] = transform_points(
                        state.q[s][:3], state.q[s][3:], pts)
            else:
                out[base:base + body.n_nodes] = state.q[s].reshape(-1, 3)
        return out

    def body_com(self, state: GeneralizedState, body_index: int) -> np.ndarray:
        body = self.bodies[body_index]
        s = self.dof_slices[body_index]
        if isinstance(body, RigidBody):
            if body.static:
                return body.initial_pose[3:].copy()
            return state.q[s][3:].copy()
        x = state.q[s].reshape(-1, 3)
        w = body.node_area3 / body.node_area3.sum()
        return w @ x

    def linear_momentum(self, state: GeneralizedState) -> np.ndarray:
        p = np.zeros(3)
        for i, body in enumerate(self.bodies):
            s = self.dof_slices[i]
            if s.start == s.stop:
                continue
            if isinstance(body, RigidBody):
                p += body.mass * state.qdot[s][3:]
            else:
                p += body.node_masses @ state.qdot[s].reshape(-1, 3)
        return p

    def mass_blocks(self, state: GeneralizedState) -> list[np.ndarray | None]:
        """Per-body generalized mass block at the step start (None for static)."""
        blocks: list[np.ndarray | None] = []
        for i, body in enumerate(self.bodies):
            if getattr(body, "static", False):
                blocks.append(None)
            elif isinstance(body, RigidBody):
                blocks.append(body.mass_matrix(self.rot_ref_of(state, i)))
            else:
                blocks.append(np.diag(np.repeat(body.node_masses, 3)))
        return blocks
