import numpy as np
import pytest

from diffmesh.bodies import RigidBody, cube_mesh
from diffmesh.contact import FailSafeError, resolve_collisions
from diffmesh.impacts import build_zones, find_impacts, impact_gaps
from diffmesh.integrator import implicit_step
from diffmesh.scene import GeneralizedState, GroundPlane, Scene


def _cube_scene(z0=1.0, vel=(0, 0, 0, 0, 0, 0), mass=2.0, gravity=(0.0, 0.0, -9.8),
                ground=True):
    verts, faces = cube_mesh(1.0)
    body = RigidBody.from_mesh("cube", verts, faces, mass=mass,
                               pose=[0, 0, 0, 0, 0, z0], velocity=vel)
    return Scene([body], gravity=gravity, dt=1 / 150, thickness=1e-3,
                 ground=GroundPlane.at_height(0.0) if ground else None)


def _two_cube_scene(gap=0.2, speed=1.0, m1=1.0, m2=1.0):
    verts, faces = cube_mesh(1.0)
    b1 = RigidBody.from_mesh("left", verts, faces, mass=m1,
                             pose=[0, 0, 0, -(0.5 + gap / 2), 0, 0],
                             velocity=[0, 0, 0, speed, 0, 0])
    b2 = RigidBody.from_mesh("right", verts, faces, mass=m2,
                             pose=[0, 0, 0, +(0.5 + gap / 2), 0, 0],
                             velocity=[0, 0, 0, -speed, 0, 0])
    return Scene([b1, b2], gravity=(0, 0, 0), dt=1 / 150, thickness=1e-3)


def test_collision_free_step_unchanged():
    scene = _cube_scene(z0=5.0)
    state = scene.initial_state()
    cand, _ = implicit_step(scene, state, h=scene.dt)
    corrected, tape = resolve_collisions(scene, state, cand, scene.dt)
    assert np.array_equal(corrected.q, cand.q)
    assert np.array_equal(corrected.qdot, cand.qdot)
    assert tape.n_zones == 0
    assert tape.n_impacts == 0


def test_cube_drop_resolves_to_clearance():
    scene = _cube_scene(z0=0.5005, vel=[0, 0, 0, 0, 0, -1.0])
    state = scene.initial_state()
    cand, _ = implicit_step(scene, state, h=scene.dt)
    assert cand.q[5] < 0.5  # candidate penetrates
    corrected, tape = resolve_collisions(scene, state, cand, scene.dt)
    assert tape.n_impacts >= 4
    x1 = scene.world_positions(corrected)
    gaps = x1[:, 2]  # vertex heights above the plane
    assert gaps.min() >= 1e-3 - 1e-9
    # velocity update reflects the position correction
    assert np.allclose(corrected.qdot, cand.qdot + (corrected.q - cand.q) / scene.dt)


def test_resolution_is_fail_safe_on_redetection():
    scene = _cube_scene(z0=0.52, vel=[0.2, 0.1, 0.3, 0, 0, -3.0])
    state = scene.initial_state()
    cand, _ = implicit_step(scene, state, h=scene.dt)
    corrected, _ = resolve_collisions(scene, state, cand, scene.dt)
    x0 = scene.world_positions(state)
    x1 = scene.world_positions(corrected)
    residual = find_impacts(scene, x0, x1)
    gaps = impact_gaps(scene, residual, x1)
    assert gaps.min(initial=1.0) > -1e-6


def test_two_cubes_head_on_momentum_conserved():
    scene = _two_cube_scene(gap=0.004, speed=1.0, m1=3.0, m2=1.0)
    state = scene.initial_state()
    p0 = scene.linear_momentum(state)
    cand, _ = implicit_step(scene, state, h=scene.dt)
    corrected, tape = resolve_collisions(scene, state, cand, scene.dt)
    assert tape.n_impacts > 0
    p1 = scene.linear_momentum(corrected)
    assert np.abs(p1 - p0).max() <= 1e-9 * max(1.0, np.abs(p0).max())


def test_momentum_conserved_over_full_contact():
    scene = _two_cube_scene(gap=0.05, speed=2.0, m1=2.0, m2=1.0)
    state = scene.initial_state()
    p0 = scene.linear_momentum(state)
    from diffmesh.trajectory import simulate
    traj = simulate(scene, steps=20)
    assert any(t.collision.n_impacts for t in traj.tapes)
    p1 = scene.linear_momentum(traj.states[-1])
    assert np.abs(p1 - p0).max() <= 1e-9 * max(1.0, np.abs(p0).max())


def test_zone_partition_disjoint_vertices():
    scene = _two_cube_scene(gap=0.004)
    state = scene.initial_state()
    cand, _ = implicit_step(scene, state, h=scene.dt)
    x0 = scene.world_positions(state)
    x1 = scene.world_positions(cand)
    impacts = find_impacts(scene, x0, x1)
    zones = build_zones(scene, state, impacts)
    assert sum(len(z.impacts) for z in zones) == len(impacts)
    seen = set()
    for z in zones:
        ids = set(int(v) for v in z.vert_ids)
        assert not (ids & seen)
        seen |= ids


def test_fail_safe_error_lists_residual_penetrations():
    # with the iteration budget exhausted before any projection, the deep
    # candidate penetration must surface as a hard error
    scene = _cube_scene(z0=0.5005, vel=[0, 0, 0, 0, 0, -2.0])
    state = scene.initial_state()
    cand, _ = implicit_step(scene, state, h=scene.dt)
    assert cand.q[5] < 0.49  # candidate truly penetrates
    with pytest.raises(FailSafeError) as err:
        resolve_collisions(scene, state, cand, scene.dt, max_iterations=0)
    assert len(err.value.gaps) > 0
    assert min(err.value.gaps) < -1e-4
