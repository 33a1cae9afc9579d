"""Gradient-based optimization drivers and a derivative-free baseline.

Two tasks mirror the shipped inverse problems: open-loop force sequences that
drive a body to a target position, and estimating one body's mass from an
observed post-collision momentum. The baseline is uniform random perturbation
with keep-best, run at the same simulation-evaluation budget.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .bodies import RigidBody
from .contact import FailSafeError
from .scene import Scene
from .trajectory import LossSpec, backward, evaluate_loss, simulate

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(x) -> "AdamState":
        return AdamState(m=np.zeros_like(x), v=np.zeros_like(x))

    def update(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1 - ADAM_BETA1 ** self.t)
        vhat = self.v / (1 - ADAM_BETA2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


@dataclass
class OptimizeResult:
    history: list[dict] = field(default_factory=list)   # per-iteration records
    best_loss: float = np.inf
    best_params: object = None
    baseline_best: float = np.inf
    diverged: bool = False


class DivergenceError(RuntimeError):
    pass


def _control_mask(scene: Scene, body: int, horizontal_only: bool) -> np.ndarray:
    mask = np.zeros(scene.ndof)
    s = scene.dof_slices[body]
    if isinstance(scene.bodies[body], RigidBody):
        mask[s.start + 3:s.stop] = 1.0
        if horizontal_only:
            mask[s.stop - 1] = 0.0       # no vertical force: go through the contact
    else:
        mask[s] = 1.0
        if horizontal_only:
            mask[s.start + 2:s.stop:3] = 0.0
    return mask


def optimize_inverse_force(scene: Scene, target, steps: int, iters: int = 50,
                           lr: float = 0.05, force_penalty: float = 1e-5,
                           body: int = 0, seed: int = 0, use_qr: bool = True,
                           horizontal_only: bool = True) -> OptimizeResult:
    """Find per-step forces driving a body's COM to the target position.

    Gradient path: Adam on the masked control sequence. Baseline: uniform
    random perturbation with keep-best at one simulation per iteration.
    """
    target = np.asarray(target, dtype=float)
    loss = LossSpec.weighted_sum([
        LossSpec(kind="target_position", target=target, body=body),
        LossSpec(kind="control_effort", weight=force_penalty),
    ])
    mask = _control_mask(scene, body, horizontal_only)
    controls = np.zeros((steps, scene.ndof))
    adam = AdamState.like(controls)
    result = OptimizeResult()

    rng = np.random.default_rng(seed)
    rs_best = np.inf
    rs_controls = np.zeros_like(controls)
    rs_scale = 0.5

    prev_feasible = controls.copy()
    for it in range(iters):
        traj = None
        for _ in range(6):
            try:
                traj = simulate(scene, controls=controls, steps=steps)
                break
            except FailSafeError:
                # step back toward the last simulable control sequence
                controls = 0.5 * (controls + prev_feasible)
        if traj is None:
            raise DivergenceError(f"no simulable iterate at iteration {it}")
        prev_feasible = controls.copy()
        value, grads = backward(traj, loss, use_qr=use_qr)
        if not np.isfinite(value):
            raise DivergenceError(f"loss diverged at iteration {it}")
        if value < result.best_loss:
            result.best_loss = value
            result.best_params = controls.copy()
        step = adam.update(grads.controls * mask, lr)
        controls = controls - step * mask

        cand = rs_controls + rng.uniform(-rs_scale, rs_scale, size=controls.shape) * mask
        rs_val = _safe_eval(scene, cand, steps, loss)
        if rs_val < rs_best:
            rs_best = rs_val
            rs_controls = cand
        result.history.append({"iter": it, "loss": value, "baseline_best": rs_best})

    result.baseline_best = rs_best
    return result


def optimize_estimate_mass(scene: Scene, target_momentum, steps: int,
                           iters: int = 200, lr: float = 0.1, body: int = 0,
                           seed: int = 0, use_qr: bool = True,
                           tol: float = 1e-10) -> OptimizeResult:
    """Estimate one rigid body's mass from a target post-collision momentum."""
    target = np.asarray(target_momentum, dtype=float)
    loss = LossSpec(kind="target_momentum", target=target)
    mass = float(scene.bodies[body].mass)
    adam = AdamState.like(np.zeros(1))
    result = OptimizeResult()
    rng = np.random.default_rng(seed)
    rs_best = np.inf
    rs_mass = mass
    rs_scale = 1.0

    for it in range(iters):
        sc = _with_mass(scene, body, mass)
        traj = simulate(sc, steps=steps)
        value, grads = backward(traj, loss, use_qr=use_qr)
        if not np.isfinite(value):
            raise DivergenceError(f"loss diverged at iteration {it}")
        if value < result.best_loss:
            result.best_loss = value
            result.best_params = mass
        grad = grads.mass.get(body, 0.0)
        mass = float(max(1e-3, mass - adam.update(np.array([grad]), lr)[0]))

        cand = max(1e-3, rs_mass + rng.uniform(-rs_scale, rs_scale))
        try:
            rs_val = evaluate_loss(simulate(_with_mass(scene, body, cand), steps=steps), loss)
        except FailSafeError:
            rs_val = np.inf
        if rs_val < rs_best:
            rs_best = rs_val
            rs_mass = cand
        result.history.append({"iter": it, "loss": value, "mass": mass,
                               "baseline_best": rs_best})
        if value < tol:
            break

    result.baseline_best = rs_best
    return result


def _safe_eval(scene, controls, steps, loss) -> float:
    """Candidate evaluation for derivative-free search; infeasible rollouts
    (fail-safe violations under violent forces) score infinitely bad."""
    try:
        return evaluate_loss(simulate(scene, controls=controls, steps=steps), loss)
    except FailSafeError:
        return float(np.inf)


def _with_mass(scene: Scene, body: int, mass: float) -> Scene:
    bodies = list(scene.bodies)
    bodies[body] = dataclasses.replace(bodies[body], mass=float(mass))
    return Scene(bodies, gravity=scene.gravity, dt=scene.dt,
                 thickness=scene.thickness, ground=scene.ground)


def random_search(scene: Scene, loss: LossSpec, steps: int, evaluations: int,
                  mask: np.ndarray, seed: int = 0, scale: float = 1.0):
    """Keep-best uniform search over control sequences at a fixed budget."""
    rng = np.random.default_rng(seed)
    best = np.inf
    best_controls = np.zeros((steps, scene.ndof))
    current = best_controls.copy()
    history = []
    for it in range(evaluations):
        cand = current + rng.uniform(-scale, scale, size=current.shape) * mask
        val = evaluate_loss(simulate(scene, controls=cand, steps=steps), loss)
        if val < best:
            best = val
            best_controls = cand
            current = cand
        history.append(best)
    return best, best_controls, history
