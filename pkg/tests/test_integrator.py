import dataclasses

import numpy as np

from diffmesh.bodies import ClothMesh, RigidBody, cloth_grid, cube_mesh
from diffmesh.forces import assemble_forces
from diffmesh.integrator import implicit_step, implicit_step_backward
from diffmesh.scene import GeneralizedState, Scene


def _cube_scene(mass=2.0, gravity=(0.0, 0.0, -9.8)):
    verts, faces = cube_mesh(1.0)
    return Scene([RigidBody.from_mesh("cube", verts, faces, mass=mass)], gravity=gravity)


def _spring_scene(damping=0.0, gravity=(0.0, 0.0, 0.0), stretch=25.0):
    nodes = np.array([[0.0, 0.0, 0.0], [1.3, 0.0, 0.0]])
    cloth = ClothMesh(
        name="pair", nodes0=nodes, triangles=np.zeros((0, 3), dtype=int),
        density=2.0, node_area3=np.array([0.5, 0.5]),
        edges=np.array([[0, 1]]), rest_lengths=np.array([1.0]),
        dihedrals=np.zeros((0, 4), dtype=int), rest_angles=np.zeros(0),
        stretch_stiffness=stretch, bend_stiffness=0.0, damping=damping)
    return Scene([cloth], gravity=gravity)


def _sheet_scene(pinned=(0,), gravity=(0.0, 0.0, -9.8)):
    nodes, tris = cloth_grid(3, 3, 0.3)
    cloth = ClothMesh.from_mesh("sheet", nodes, tris, density=0.4,
                                stretch_stiffness=30.0, bend_stiffness=0.01,
                                damping=0.2, pinned=pinned)
    return Scene([cloth], gravity=gravity)


def test_free_fall_velocity_increment():
    scene = _cube_scene()
    h = 0.01
    new, rec = implicit_step(scene, scene.initial_state(), h=h)
    assert np.allclose(rec.dqdot, [0, 0, 0, 0, 0, -9.8 * h], atol=1e-14)
    assert np.allclose(new.qdot, rec.dqdot)
    assert np.allclose(new.q[3:], h * new.qdot[3:])


def test_zero_force_advection():
    scene = _cube_scene(gravity=(0.0, 0.0, 0.0))
    state = scene.initial_state()
    state.qdot[:] = [0.1, -0.2, 0.3, 1.0, 2.0, 3.0]
    new, _ = implicit_step(scene, state, h=0.02)
    assert np.allclose(new.qdot, state.qdot)
    assert np.allclose(new.q, state.q + 0.02 * state.qdot)


def test_spring_step_matches_dense_oracle():
    scene = _spring_scene(damping=0.3)
    state = scene.initial_state()
    state.qdot[:] = np.arange(6) * 0.1
    h = 0.01
    new, rec = implicit_step(scene, state, h=h)
    report = assemble_forces(scene, state)
    m = np.diag(np.repeat(scene.bodies[0].node_masses, 3))
    jq = report.dfdq.toarray()
    jv = report.dfdqdot.toarray()
    a = m / h - jv - h * jq
    b = report.f + h * (jq @ state.qdot)
    dv = np.linalg.solve(a, b)
    assert np.abs(dv - rec.dqdot).max() < 1e-10


def test_small_step_limit_is_explicit_euler():
    # || dv - h M^-1 f0 || should vanish quadratically in h.
    scene = _spring_scene()
    state = scene.initial_state()
    state.qdot[:] = [0.0, 0.1, 0.0, -0.2, 0.0, 0.3]
    minv = 1.0 / np.repeat(scene.bodies[0].node_masses, 3)
    errs, hs = [], []
    for h in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
        _, rec = implicit_step(scene, state, h=h)
        f0 = assemble_forces(scene, state).f
        errs.append(np.linalg.norm(rec.dqdot - h * minv * f0))
        hs.append(h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.9


def test_pinned_nodes_never_move():
    scene = _sheet_scene(pinned=(0, 2))
    state = scene.initial_state()
    q0 = state.q.copy()
    for _ in range(20):
        state, _ = implicit_step(scene, state, h=1.0 / 150.0)
    assert np.abs(state.q[scene.pinned_dofs] - q0[scene.pinned_dofs]).max() == 0.0


def test_energy_non_increasing_without_damping():
    scene = _spring_scene(damping=0.0, gravity=(0.0, 0.0, 0.0))
    state = scene.initial_state()
    state.qdot[:] = [0.5, 0, 0, -0.5, 0, 0]
    cloth = scene.bodies[0]
    masses = np.repeat(cloth.node_masses, 3)

    def energy(s):
        ln = np.linalg.norm(s.q[3:6] - s.q[:3])
        return 0.5 * masses @ (s.qdot ** 2) + 0.5 * cloth.stretch_stiffness * (ln - 1.0) ** 2

    for _ in range(50):
        new, _ = implicit_step(scene, state, h=0.005)
        assert energy(new) <= energy(state) + 1e-8
        state = new


def test_backward_zero_gradients():
    scene = _cube_scene()
    _, rec = implicit_step(scene, scene.initial_state(), h=0.01)
    grads = implicit_step_backward(rec, np.zeros(6), np.zeros(6))
    assert np.abs(grads.q0).max() == 0.0
    assert np.abs(grads.qdot0).max() == 0.0
    assert np.abs(grads.control).max() == 0.0


def test_backward_free_fall_hand_chain():
    # L = q_z(t0 + h): dL/dqdot0_z = h, dL/dq0_z = 1.
    scene = _cube_scene()
    h = 0.01
    _, rec = implicit_step(scene, scene.initial_state(), h=h)
    gq = np.zeros(6)
    gq[5] = 1.0
    grads = implicit_step_backward(rec, gq, np.zeros(6))
    assert abs(grads.qdot0[5] - h) < 1e-14
    assert abs(grads.q0[5] - 1.0) < 1e-14


def _loss_and_grads(scene, state, control, h, gq, gv):
    new, rec = implicit_step(scene, state, control, h=h)
    loss = gq @ new.q + gv @ new.qdot
    return loss, implicit_step_backward(rec, gq, gv)


def test_backward_matches_finite_differences_spring_scene():
    scene = _sheet_scene(pinned=(0,))
    state = scene.initial_state()
    rng = np.random.default_rng(12)
    state.qdot[:] = rng.normal(scale=0.2, size=scene.ndof)
    state.qdot[scene.pinned_dofs] = 0.0
    control = rng.normal(scale=0.1, size=scene.ndof)
    h = 1.0 / 150.0
    gq = rng.normal(size=scene.ndof)
    gv = rng.normal(size=scene.ndof)
    _, grads = _loss_and_grads(scene, state, control, h, gq, gv)

    eps = 1e-6

    def fd_vs(analytic, apply):
        worst = 0.0
        for k in rng.choice(scene.ndof, size=12, replace=False):
            lp = apply(k, +eps)
            lm = apply(k, -eps)
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - analytic[k]) / max(1.0, abs(fd)))
        return worst

    def perturb_q(k, d):
        s = state.copy()
        s.q[k] += d
        new, _ = implicit_step(scene, s, control, h=h)
        return gq @ new.q + gv @ new.qdot

    def perturb_v(k, d):
        s = state.copy()
        s.qdot[k] += d
        new, _ = implicit_step(scene, s, control, h=h)
        return gq @ new.q + gv @ new.qdot

    def perturb_u(k, d):
        u = control.copy()
        u[k] += d
        new, _ = implicit_step(scene, state, u, h=h)
        return gq @ new.q + gv @ new.qdot

    assert fd_vs(grads.q0, perturb_q) < 1e-6
    assert fd_vs(grads.qdot0, perturb_v) < 1e-6
    assert fd_vs(grads.control, perturb_u) < 1e-6

    # scalar parameters: stretch, bend, damping, density
    cloth = scene.bodies[0]

    def param_loss(**kw):
        body = dataclasses.replace(cloth, **kw)
        sc = Scene([body], gravity=scene.gravity, dt=scene.dt, thickness=scene.thickness)
        new, _ = implicit_step(sc, state, control, h=h)
        return gq @ new.q + gv @ new.qdot

    for name, key, val in (
        ("stretch_stiffness", "stretch", cloth.stretch_stiffness),
        ("bend_stiffness", "bend", cloth.bend_stiffness),
        ("damping", "damping", cloth.damping),
        ("density", "density", cloth.density),
    ):
        d = 1e-6 * max(1.0, abs(val))
        fd = (param_loss(**{name: val + d}) - param_loss(**{name: val - d})) / (2 * d)
        got = getattr(grads, key)[0]
        assert abs(got - fd) < 1e-5 * max(1.0, abs(fd)), name


def test_backward_rigid_mass_and_rotation_reference():
    verts, faces = cube_mesh(1.0)
    body = RigidBody.from_mesh("cube", verts, faces, mass=2.0)
    scene = Scene([body], gravity=(0.0, 0.0, -9.8))
    state = scene.initial_state()
    rng = np.random.default_rng(3)
    state.qdot[:] = rng.normal(size=6)
    ref = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    if np.linalg.det(ref) < 0:
        ref[:, 0] *= -1
    state = GeneralizedState(state.q, state.qdot, (ref,), state.index_map)
    control = rng.normal(size=6)
    h = 0.01
    gq = rng.normal(size=6)
    gv = rng.normal(size=6)
    new, rec = implicit_step(scene, state, control, h=h)
    grads = implicit_step_backward(rec, gq, gv)

    def loss_with(mass=None, refmat=None):
        b = body if mass is None else dataclasses.replace(body, mass=mass)
        sc = Scene([b], gravity=scene.gravity)
        st = GeneralizedState(state.q, state.qdot, (ref if refmat is None else refmat,), {})
        nw, _ = implicit_step(sc, st, control, h=h)
        return gq @ nw.q + gv @ nw.qdot

    d = 1e-6
    fd_mass = (loss_with(mass=2.0 + d) - loss_with(mass=2.0 - d)) / (2 * d)
    assert abs(grads.mass[0] - fd_mass) < 1e-6 * max(1.0, abs(fd_mass))

    worst = 0.0
    for a in range(3):
        for b_ in range(3):
            rp, rm = ref.copy(), ref.copy()
            rp[a, b_] += d
            rm[a, b_] -= d
            fd = (loss_with(refmat=rp) - loss_with(refmat=rm)) / (2 * d)
            worst = max(worst, abs(grads.rot_refs[0][a, b_] - fd) / max(1.0, abs(fd)))
    assert worst < 1e-5
