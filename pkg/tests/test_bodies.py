import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmesh.bodies import (
    ClothMesh,
    RigidBody,
    body_inertia,
    cloth_grid,
    cube_mesh,
    load_obj,
    save_obj,
)
from diffmesh.rotations import angular_velocity_map, rotation_matrix

angles = st.floats(min_value=-1.4, max_value=1.4, allow_nan=False)


def test_inertia_single_particle_at_origin():
    assert np.allclose(body_inertia([[0.0, 0.0, 0.0]], [2.0]), np.zeros((3, 3)))


def test_inertia_two_particles_on_x_axis():
    inertia = body_inertia([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], [1.0, 1.0])
    assert np.allclose(inertia, np.diag([0.0, 2.0, 2.0]))


@given(angles, angles, angles)
@settings(max_examples=50, deadline=None)
def test_inertia_rotation_equivariance(phi, theta, psi):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(6, 3))
    masses = rng.uniform(0.5, 2.0, size=6)
    rot = rotation_matrix((phi, theta, psi))
    direct = body_inertia(pts @ rot.T, masses)
    transformed = rot @ body_inertia(pts, masses) @ rot.T
    assert np.abs(direct - transformed).max() < 1e-10


def test_inertia_symmetric_psd():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(10, 3))
    masses = rng.uniform(0.1, 1.0, size=10)
    inertia = body_inertia(pts, masses)
    assert np.allclose(inertia, inertia.T)
    assert np.linalg.eigvalsh(inertia).min() >= -1e-12


def _cube_body(mass=2.0, size=1.0):
    verts, faces = cube_mesh(size)
    return RigidBody.from_mesh("cube", verts, faces, mass=mass)


def test_cube_com_centered():
    body = _cube_body()
    diag = np.linalg.norm(body.rest_vertices.max(0) - body.rest_vertices.min(0))
    com = (body.rest_vertices * (body.mass / body.n_vertices)).sum(axis=0)
    assert np.abs(com).max() < 1e-9 * body.mass * diag


def test_cube_vertex_inertia_value():
    # 8 corner particles at distance (s/2, s/2, s/2): I = m s^2 / 2 per axis.
    body = _cube_body(mass=2.0, size=1.0)
    assert np.allclose(body.body_inertia, np.eye(3) * 2.0 * 0.5)


def test_mass_matrix_zero_angles_blocks():
    body = _cube_body(mass=3.0)
    ref = rotation_matrix((0.4, -0.2, 0.8))
    m = body.mass_matrix(ref)
    assert np.allclose(m[:3, :3], ref @ body.body_inertia @ ref.T)
    assert np.allclose(m[3:, 3:], 3.0 * np.eye(3))
    assert np.allclose(m[:3, 3:], 0.0)


@given(angles, angles, angles)
@settings(max_examples=50, deadline=None)
def test_mass_matrix_linear_block_always_mass_identity(phi, theta, psi):
    body = _cube_body(mass=2.5)
    m = body.mass_matrix(np.eye(3), incremental=np.array([phi, theta, psi]))
    assert np.allclose(m[3:, 3:], 2.5 * np.eye(3))


def test_mass_matrix_symmetric_positive_definite():
    body = _cube_body(mass=1.7)
    r = np.array([0.3, 0.5, -0.7])
    m = body.mass_matrix(rotation_matrix((0.1, 0.2, 0.3)), incremental=r)
    assert np.allclose(m, m.T)
    assert np.linalg.eigvalsh(m).min() > 0.0


def test_mass_matrix_kinetic_energy_consistency():
    rng = np.random.default_rng(4)
    body = _cube_body(mass=2.2)
    ref = rotation_matrix((0.2, -0.5, 1.1))
    for _ in range(10):
        r = rng.uniform(-1.0, 1.0, size=3)
        qdot = rng.normal(size=6)
        m = body.mass_matrix(ref, incremental=r)
        lhs = 0.5 * qdot @ m @ qdot
        t = angular_velocity_map(r, check_singular=False)
        omega = t @ qdot[:3]
        iw = ref @ body.body_inertia @ ref.T
        rhs = 0.5 * body.mass * qdot[3:] @ qdot[3:] + 0.5 * omega @ iw @ omega
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def _small_cloth():
    nodes, tris = cloth_grid(4, 4, 0.25)
    return ClothMesh.from_mesh("cloth", nodes, tris, density=0.3,
                               stretch_stiffness=50.0, bend_stiffness=1e-3)


def test_cloth_masses_and_rest_lengths_positive():
    cloth = _small_cloth()
    assert (cloth.node_masses > 0).all()
    assert (cloth.rest_lengths > 0).all()


def test_cloth_total_mass_matches_area():
    cloth = _small_cloth()
    area = (3 * 0.25) ** 2
    assert abs(cloth.node_masses.sum() - 0.3 * area) < 1e-12


def test_cloth_interior_edges_have_one_dihedral():
    cloth = _small_cloth()
    edge_count: dict = {}
    for tri in cloth.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1
    interior = {k for k, c in edge_count.items() if c == 2}
    hinge_keys = {(min(a, b), max(a, b)) for a, b, _, _ in cloth.dihedrals}
    assert hinge_keys == interior


def test_flat_grid_rest_angles_zero():
    cloth = _small_cloth()
    assert np.abs(cloth.rest_angles).max() < 1e-12


def test_obj_round_trip(tmp_path):
    verts, faces = cube_mesh(1.0)
    path = tmp_path / "cube.obj"
    save_obj(path, verts, faces)
    verts2, faces2 = load_obj(str(path))
    assert np.allclose(verts, verts2)
    assert (faces == faces2).all()


def test_obj_polygon_triangulation(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    verts, faces = load_obj(str(path))
    assert len(verts) == 4
    assert len(faces) == 2
