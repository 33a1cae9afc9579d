"""Body definitions: rigid meshes, cloth meshes, inertia and mass matrices."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .rotations import angular_velocity_map, rotation_matrix


def body_inertia(vertices, masses) -> np.ndarray:
    """Inertia about the origin for point masses: sum m_i (p_i.p_i I - p_i p_i^T)."""
    p = np.asarray(vertices, dtype=float)
    m = np.asarray(masses, dtype=float)
    sq = np.einsum("i,ij,ik->jk", m, p, p)
    return np.eye(3) * np.trace(sq) - sq


@dataclass(frozen=True)
class RigidBody:
    """Rigid mesh with COM-centered rest vertices and 6-DOF generalized coordinates.

    Coordinates are [phi, theta, psi, tx, ty, tz]; the angular inertia is carried
    per unit mass so the total mass can be treated as a scalar parameter.
    """

    name: str
    rest_vertices: np.ndarray        # (V, 3), COM-centered
    faces: np.ndarray                # (F, 3) int
    mass: float
    inertia_unit: np.ndarray         # (3, 3) body-frame inertia per unit mass
    static: bool = False
    initial_pose: np.ndarray = field(default_factory=lambda: np.zeros(6))      # [r, t]
    initial_velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))  # [omega, v]

    @property
    def ndof(self) -> int:
        return 6

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def body_inertia(self) -> np.ndarray:
        return self.mass * self.inertia_unit

    def world_inertia(self, rot_ref: np.ndarray) -> np.ndarray:
        return rot_ref @ self.body_inertia @ rot_ref.T

    def mass_matrix(self, rot_ref: np.ndarray, incremental: np.ndarray | None = None) -> np.ndarray:
        """6x6 generalized mass matrix at the given accumulated rotation.

        The angular block is T^T I_world T with T evaluated at the incremental
        angles (identity at the start of a step); the linear block is m I.
        """
        iw = self.world_inertia(rot_ref)
        m = np.zeros((6, 6))
        if incremental is None or not np.any(incremental):
            m[:3, :3] = iw
        else:
            t = angular_velocity_map(incremental)
            m[:3, :3] = t.T @ iw @ t
        m[3:, 3:] = self.mass * np.eye(3)
        return m

    @staticmethod
    def from_mesh(name, vertices, faces, mass=None, density=None, static=False,
                  pose=None, velocity=None) -> "RigidBody":
        """Build a body from a raw mesh: recenter on the COM of uniform vertex masses."""
        v = np.array(vertices, dtype=float)
        f = np.array(faces, dtype=int)
        if len(v) == 0:
            raise ValueError("empty mesh")
        if mass is None:
            if density is None:
                raise ValueError("need mass or density")
            mass = float(density) * _mesh_volume_estimate(v, f)
        com = v.mean(axis=0)
        v = v - com
        unit_masses = np.full(len(v), 1.0 / len(v))
        inertia_unit = body_inertia(v, unit_masses)
        pose = np.zeros(6) if pose is None else np.asarray(pose, dtype=float).copy()
        pose[3:] = pose[3:] + com
        velocity = np.zeros(6) if velocity is None else np.asarray(velocity, dtype=float)
        return RigidBody(name=name, rest_vertices=v, faces=f, mass=float(mass),
                         inertia_unit=inertia_unit, static=static,
                         initial_pose=pose, initial_velocity=np.array(velocity, dtype=float))


def _mesh_volume_estimate(vertices, faces) -> float:
    """Signed tetrahedron volume sum; falls back to bbox volume for open meshes."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    if len(f) == 0:
        return 0.0
    vol = abs(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)
    if vol < 1e-12:
        ext = v.max(axis=0) - v.min(axis=0)
        vol = float(np.prod(np.maximum(ext, 1e-9)))
    return float(vol)


@dataclass(frozen=True)
class ClothMesh:
    """Triangle-mesh cloth with 3-DOF nodes and lumped masses.

    node_masses = density * node_area3 where node_area3 is one third of the
    incident triangle area per node, so density acts as the mass parameter.
    """

    name: str
    nodes0: np.ndarray               # (N, 3) initial positions
    triangles: np.ndarray            # (F, 3) int
    density: float                   # kg / m^2
    node_area3: np.ndarray           # (N,) one third of incident triangle area
    edges: np.ndarray                # (E, 2) int
    rest_lengths: np.ndarray         # (E,)
    dihedrals: np.ndarray            # (D, 4) int: hinge a, hinge b, opposite in tri1, tri2
    rest_angles: np.ndarray          # (D,)
    stretch_stiffness: float
    bend_stiffness: float
    damping: float = 0.0
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    initial_velocity: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes0)

    @property
    def ndof(self) -> int:
        return 3 * self.n_nodes

    @property
    def node_masses(self) -> np.ndarray:
        return self.density * self.node_area3

    @staticmethod
    def from_mesh(name, nodes, triangles, density, stretch_stiffness, bend_stiffness,
                  damping=0.0, pinned=(), velocity=None) -> "ClothMesh":
        nodes = np.array(nodes, dtype=float)
        tris = np.array(triangles, dtype=int)
        area3 = _node_area_thirds(nodes, tris)
        edges, rest_lengths = _unique_edges(nodes, tris)
        dihedrals, rest_angles = _dihedral_pairs(nodes, tris)
        return ClothMesh(
            name=name, nodes0=nodes, triangles=tris, density=float(density),
            node_area3=area3, edges=edges, rest_lengths=rest_lengths,
            dihedrals=dihedrals, rest_angles=rest_angles,
            stretch_stiffness=float(stretch_stiffness),
            bend_stiffness=float(bend_stiffness), damping=float(damping),
            pinned=np.array(sorted(set(int(i) for i in pinned)), dtype=int),
            initial_velocity=None if velocity is None else np.array(velocity, dtype=float),
        )


def _node_area_thirds(nodes, tris) -> np.ndarray:
    a3 = np.zeros(len(nodes))
    areas = 0.5 * np.linalg.norm(
        np.cross(nodes[tris[:, 1]] - nodes[tris[:, 0]], nodes[tris[:, 2]] - nodes[tris[:, 0]]), axis=1)
    for k in range(3):
        np.add.at(a3, tris[:, k], areas / 3.0)
    return a3


def _unique_edges(nodes, tris):
    raw = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    edges = np.unique(raw, axis=0)
    rest = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    return edges, rest


def _dihedral_pairs(nodes, tris):
    """One hinge per interior edge: (a, b, opposite in first tri, opposite in second)."""
    owner: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for t, (i, j, k) in enumerate(tris):
        for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
            key = (min(int(a), int(b)), max(int(a), int(b)))
            owner.setdefault(key, []).append((t, int(c)))
    quads = []
    for (a, b), tl in sorted(owner.items()):
        if len(tl) == 2:
            quads.append((a, b, tl[0][1], tl[1][1]))
        elif len(tl) > 2:
            raise ValueError(f"non-manifold edge {(a, b)} shared by {len(tl)} triangles")
    if not quads:
        return np.zeros((0, 4), dtype=int), np.zeros(0)
    quads = np.array(quads, dtype=int)
    angles = dihedral_angles(nodes, quads)
    return quads, angles


def dihedral_angles(x, quads) -> np.ndarray:
    """Signed hinge angles for quads (a, b, c, d): hinge a->b, wings c and d."""
    x0, x1, x2, x3 = (x[quads[:, k]] for k in range(4))
    e = x1 - x0
    n1 = np.cross(x1 - x0, x2 - x0)
    n2 = np.cross(x3 - x0, x1 - x0)
    en = np.linalg.norm(e, axis=1)
    n1n = np.linalg.norm(n1, axis=1)
    n2n = np.linalg.norm(n2, axis=1)
    scale = np.maximum(en * n1n * n2n, 1e-300)
    cos = np.einsum("ij,ij->i", n1, n2) / np.maximum(n1n * n2n, 1e-300)
    sin = np.einsum("ij,ij->i", np.cross(n2, n1), e) / scale
    return np.arctan2(sin, cos)


# ---------------------------------------------------------------------------
# Primitive meshes and OBJ I/O


def cube_mesh(size: float):
    """Axis-aligned cube centered at the origin."""
    s = 0.5 * float(size)
    verts = np.array([[x, y, z] for x in (-s, s) for y in (-s, s) for z in (-s, s)], dtype=float)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # x = -s
        [4, 6, 7], [4, 7, 5],  # x = +s
        [0, 4, 5], [0, 5, 1],  # y = -s
        [2, 3, 7], [2, 7, 6],  # y = +s
        [0, 2, 6], [0, 6, 4],  # z = -s
        [1, 5, 7], [1, 7, 3],  # z = +s
    ], dtype=int)
    return verts, faces


def plane_mesh(size: float):
    """Flat square quad in the XY plane (two triangles)."""
    s = 0.5 * float(size)
    verts = np.array([[-s, -s, 0.0], [s, -s, 0.0], [s, s, 0.0], [-s, s, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=int)
    return verts, faces


def sphere_mesh(diameter: float, subdivisions: int = 1):
    """Icosphere of the given diameter."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=int)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                v = verts_list[a] + verts_list[b]
                v = v / np.linalg.norm(v)
                edge_mid[key] = len(verts_list)
                verts_list.append(v)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=int)
    return verts * (0.5 * float(diameter)), faces


def cloth_grid(nx: int, ny: int, spacing: float, origin=(0.0, 0.0, 0.0)):
    """Regular (nx x ny)-node grid in the XY plane with alternating diagonals."""
    ox, oy, oz = origin
    xs = np.arange(nx) * spacing + ox
    ys = np.arange(ny) * spacing + oy
    nodes = np.array([[x, y, oz] for y in ys for x in xs], dtype=float)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            d = c + 1
            if (i + j) % 2 == 0:
                tris.append([a, b, d])
                tris.append([a, d, c])
            else:
                tris.append([a, b, c])
                tris.append([b, d, c])
    return nodes, np.array(tris, dtype=int)


def load_obj(path: str):
    """Minimal OBJ reader: v and f records, faces triangulated as fans."""
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{os.path.basename(path)}:{ln}: short vertex record")
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ValueError(f"{path}: no vertices")
    return np.array(verts, dtype=float), np.array(faces, dtype=int)


def save_obj(path: str, vertices, faces) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=float):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in np.asarray(faces, dtype=int):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def euler_pose_matrix(pose) -> np.ndarray:
    """Fold a [r, t] pose into its rotation matrix (for state canonicalization)."""
    return rotation_matrix(np.asarray(pose, dtype=float)[:3])
