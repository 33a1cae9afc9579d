import numpy as np

from diffmesh.bodies import RigidBody, cube_mesh
from diffmesh.optimize import (
    AdamState,
    optimize_estimate_mass,
    optimize_inverse_force,
    random_search,
)
from diffmesh.scene import Scene
from diffmesh.trajectory import LossSpec


def test_adam_reduces_quadratic():
    adam = AdamState.like(np.zeros(3))
    x = np.array([5.0, -3.0, 2.0])
    for _ in range(400):
        x = x - adam.update(2.0 * x, lr=0.05)
    assert np.abs(x).max() < 1e-3


def _two_cube_scene(m1=1.0):
    verts, faces = cube_mesh(1.0)
    b1 = RigidBody.from_mesh("left", verts, faces, mass=m1,
                             pose=[0, 0, 0, -0.53, 0, 0], velocity=[0, 0, 0, 1.0, 0, 0])
    b2 = RigidBody.from_mesh("right", verts, faces, mass=1.0,
                             pose=[0, 0, 0, 0.53, 0, 0], velocity=[0, 0, 0, -1.0, 0, 0])
    return Scene([b1, b2], gravity=(0, 0, 0), dt=1 / 150, thickness=1e-3)


def test_estimate_mass_converges_to_conservation_value():
    # momentum (m1 - m2) v must equal 3 => m1 = 4 for m2 = 1, v = 1
    scene = _two_cube_scene(m1=1.0)
    result = optimize_estimate_mass(scene, [3.0, 0.0, 0.0], steps=20, iters=200, lr=0.1)
    assert abs(result.best_params - 4.0) <= 0.05 * 4.0
    assert result.best_loss < 1e-6


def test_free_space_force_optimization_improves():
    # light box so the force-effort penalty stays negligible at the optimum
    verts, faces = cube_mesh(0.4)
    body = RigidBody.from_mesh("box", verts, faces, mass=0.05, pose=[0, 0, 0, 0, 0, 0])
    scene = Scene([body], gravity=(0, 0, 0), dt=1 / 150, thickness=1e-3)
    result = optimize_inverse_force(scene, [0.3, -0.2, 0.0], steps=20, iters=60,
                                    body=0, seed=0, horizontal_only=True, lr=0.25)
    first = result.history[0]["loss"]
    assert result.best_loss < 0.1 * first
    assert result.best_loss < result.baseline_best


def test_random_search_keep_best_monotone():
    verts, faces = cube_mesh(0.4)
    body = RigidBody.from_mesh("box", verts, faces, mass=1.0, pose=[0, 0, 0, 0, 0, 0])
    scene = Scene([body], gravity=(0, 0, 0), dt=1 / 150, thickness=1e-3)
    loss = LossSpec(kind="target_position", target=[0.2, 0.0, 0.0], body=0)
    mask = np.zeros(scene.ndof)
    mask[3:5] = 1.0
    best, controls, history = random_search(scene, loss, steps=10, evaluations=30,
                                            mask=mask, seed=1)
    assert history == sorted(history, reverse=True)
    assert best <= history[0]
