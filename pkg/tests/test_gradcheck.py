import numpy as np

from diffmesh.bodies import RigidBody, cube_mesh
from diffmesh.gradcheck import active_set_signature, gradient_check
from diffmesh.scene import GroundPlane, Scene
from diffmesh.trajectory import LossSpec, simulate


def _cube_scene(z0=0.52, ground=True):
    verts, faces = cube_mesh(1.0)
    body = RigidBody.from_mesh("cube", verts, faces, mass=2.0,
                               pose=[0, 0, 0, 0, 0, z0])
    return Scene([body], gravity=(0, 0, -9.8), dt=1 / 150, thickness=1e-3,
                 ground=GroundPlane.at_height(0.0) if ground else None)


def test_free_fall_scene_passes_tightly():
    scene = _cube_scene(z0=30.0, ground=False)
    loss = LossSpec(kind="target_position", target=[0.0, 0.2, 29.0], body=0)
    report = gradient_check(scene, loss, steps=10, wrt=("controls", "init", "mass"),
                            max_probes_per_group=8)
    assert report.passed
    # closed-form dynamics: analytic and FD agree to FD roundoff
    for row in report.rows:
        assert abs(row.analytic - row.fd) <= 1e-8 * (1.0 + abs(row.fd))


def test_contact_scene_passes_at_default_tolerance():
    scene = _cube_scene(z0=0.52)
    loss = LossSpec(kind="target_position", target=[0.3, -0.1, 0.501], body=0)
    report = gradient_check(scene, loss, steps=15, wrt=("controls", "init", "mass"),
                            max_probes_per_group=10)
    assert report.passed, report.format_table()


def test_corrupted_gradients_fail():
    scene = _cube_scene(z0=0.52)
    loss = LossSpec(kind="target_position", target=[0.3, -0.1, 0.501], body=0)
    report = gradient_check(scene, loss, steps=10, wrt=("controls", "init"),
                            max_probes_per_group=6, corrupt_gradients=True)
    assert not report.passed


def test_active_set_signature_stability():
    scene = _cube_scene(z0=0.52)
    t1 = simulate(scene, steps=12)
    t2 = simulate(scene, steps=12)
    assert active_set_signature(t1) == active_set_signature(t2)
    t3 = simulate(scene, steps=11)
    assert active_set_signature(t1) != active_set_signature(t3)


def test_report_table_format():
    scene = _cube_scene(z0=5.0, ground=False)
    loss = LossSpec(kind="target_position", target=[0.0, 0.0, 4.0], body=0)
    report = gradient_check(scene, loss, steps=5, wrt=("controls",),
                            max_probes_per_group=3)
    table = report.format_table()
    assert "max rel err" in table
    assert "PASS" in table
