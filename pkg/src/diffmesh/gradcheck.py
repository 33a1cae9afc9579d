"""Finite-difference verification harness for trajectory gradients.

Central differences re-simulate the scene around each probed input. Probes
whose +/- perturbations land on different contact active sets straddle a
subgradient point of the piecewise-smooth dynamics; they are skipped and
reported instead of asserted.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bodies import ClothMesh, RigidBody
from .scene import Scene
from .trajectory import LossSpec, backward, evaluate_loss, simulate

DEFAULT_TOL = 1e-3
DEFAULT_EPS = 1e-5


def sim_threads() -> int:
    try:
        return max(1, int(os.environ.get("SIM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ProbeResult:
    group: str
    label: str
    analytic: float
    fd: float
    rel_err: float
    skipped: bool = False


@dataclass
class GradCheckReport:
    rows: list[ProbeResult] = field(default_factory=list)
    tol: float = DEFAULT_TOL
    loss_value: float = 0.0

    @property
    def n_skipped(self) -> int:
        return sum(r.skipped for r in self.rows)

    @property
    def max_rel_err(self) -> float:
        errs = [r.rel_err for r in self.rows if not r.skipped]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(r.skipped or r.rel_err <= self.tol for r in self.rows)

    def group_summary(self):
        groups: dict[str, list[ProbeResult]] = {}
        for r in self.rows:
            groups.setdefault(r.group, []).append(r)
        out = []
        for g, rows in groups.items():
            errs = [r.rel_err for r in rows if not r.skipped]
            out.append((g, max(errs) if errs else 0.0, len(rows),
                        sum(r.skipped for r in rows)))
        return out

    def format_table(self) -> str:
        lines = [f"{'group':<12} {'probe':<24} {'analytic':>14} {'fd':>14} "
                 f"{'rel_err':>10} {'status':>8}"]
        for r in self.rows:
            status = "SKIP" if r.skipped else ("ok" if r.rel_err <= self.tol else "FAIL")
            lines.append(f"{r.group:<12} {r.label:<24} {r.analytic:>14.6e} "
                         f"{r.fd:>14.6e} {r.rel_err:>10.2e} {status:>8}")
        lines.append(f"max rel err = {self.max_rel_err:.3e}  "
                     f"(tol {self.tol:g}, {self.n_skipped} active-set flips skipped)")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def active_set_signature(traj) -> tuple:
    """Structural contact state of a trajectory: active impacts per step."""
    sig = []
    for tape in traj.tapes:
        step_sig = []
        for zt in tape.collision.zone_tapes:
            keys = tuple(sorted(repr(imp.key) for imp in zt.zone.impacts))
            active = tuple(sorted(repr(zt.zone.impacts[r].key)
                                  for r in zt.solution.active_set))
            step_sig.append((keys, active))
        sig.append(tuple(sorted(step_sig)))
    return tuple(sig)


def _rebuild_scene(scene: Scene, body_index: int, **replacements) -> Scene:
    bodies = list(scene.bodies)
    bodies[body_index] = dataclasses.replace(bodies[body_index], **replacements)
    return Scene(bodies, gravity=scene.gravity, dt=scene.dt,
                 thickness=scene.thickness, ground=scene.ground)


def gradient_check(scene: Scene, loss: LossSpec, steps: int, controls=None,
                   wrt=("controls", "init", "mass", "stiffness"),
                   eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL,
                   max_probes_per_group: int = 16, seed: int = 0,
                   use_qr: bool = True, corrupt_gradients: bool = False) -> GradCheckReport:
    """Compare backward() against central finite differences on sampled inputs.

    Large input groups are subsampled with a seeded generator; the report
    states which coordinates were checked. corrupt_gradients is a self-test
    hook that biases the analytic gradients so the harness must fail.
    """
    rng = np.random.default_rng(seed)
    if controls is None:
        controls = np.zeros((steps, scene.ndof))
    controls = np.asarray(controls, dtype=float)

    base_traj = simulate(scene, controls=controls, steps=steps)
    loss_value, grads = backward(base_traj, loss, use_qr=use_qr)
    if corrupt_gradients:
        grads.controls = -grads.controls + 1e-3
        grads.init_qdot = grads.init_qdot + 1.0
        for key in list(grads.mass):
            grads.mass[key] += 0.5

    report = GradCheckReport(tol=tol, loss_value=loss_value)
    floor = 1e-8 * (1.0 + abs(loss_value))

    probes = []  # (group, label, analytic_value, run(delta) -> loss, traj_signatures)

    def add_probe(group, label, analytic, runner):
        probes.append((group, label, analytic, runner))

    def pick(indices, count):
        indices = list(indices)
        if len(indices) <= count:
            return indices
        sel = rng.choice(len(indices), size=count, replace=False)
        return [indices[int(i)] for i in sorted(sel)]

    if "controls" in wrt and steps > 0:
        coords = [(t, d) for t in range(steps) for d in range(scene.ndof)]
        for t, d in pick(coords, max_probes_per_group):
            def runner(delta, t=t, d=d):
                c = controls.copy()
                c[t, d] += delta
                return simulate(scene, controls=c, steps=steps)
            add_probe("controls", f"u[{t},{d}]", grads.controls[t, d], runner)

    if "init" in wrt:
        free = [d for d in range(scene.ndof) if d not in set(scene.pinned_dofs)]
        for d in pick(free, max_probes_per_group // 2):
            def runner(delta, d=d):
                st = scene.initial_state()
                st.q[d] += delta
                return simulate(scene, initial_state=st, controls=controls, steps=steps)
            add_probe("init", f"q0[{d}]", grads.init_q[d], runner)
        for d in pick(free, max_probes_per_group // 2):
            def runner(delta, d=d):
                st = scene.initial_state()
                st.qdot[d] += delta
                return simulate(scene, initial_state=st, controls=controls, steps=steps)
            add_probe("init", f"qdot0[{d}]", grads.init_qdot[d], runner)

    if "mass" in wrt:
        for i, body in enumerate(scene.bodies):
            if isinstance(body, RigidBody) and not body.static:
                def runner(delta, i=i, m=body.mass):
                    sc = _rebuild_scene(scene, i, mass=m + delta)
                    return simulate(sc, controls=controls, steps=steps)
                add_probe("mass", f"mass[{i}]", grads.mass.get(i, 0.0), runner)
            elif isinstance(body, ClothMesh):
                def runner(delta, i=i, d=body.density):
                    sc = _rebuild_scene(scene, i, density=d + delta)
                    return simulate(sc, controls=controls, steps=steps)
                add_probe("mass", f"density[{i}]", grads.density.get(i, 0.0), runner)

    if "stiffness" in wrt:
        for i, body in enumerate(scene.bodies):
            if not isinstance(body, ClothMesh):
                continue
            for attr, key in (("stretch_stiffness", "stretch"), ("bend_stiffness", "bend")):
                def runner(delta, i=i, attr=attr, v=getattr(body, attr)):
                    sc = _rebuild_scene(scene, i, **{attr: v + delta})
                    return simulate(sc, controls=controls, steps=steps)
                add_probe("stiffness", f"{key}[{i}]",
                          grads.by_name(key).get(i, 0.0), runner)

    def evaluate(probe):
        group, label, analytic, runner = probe
        tp = runner(+eps)
        tm = runner(-eps)
        lp = evaluate_loss(tp, loss)
        lm = evaluate_loss(tm, loss)
        fd = (lp - lm) / (2 * eps)
        skipped = active_set_signature(tp) != active_set_signature(tm)
        rel = abs(analytic - fd) / max(abs(fd), abs(analytic), floor)
        return ProbeResult(group=group, label=label, analytic=float(analytic),
                           fd=float(fd), rel_err=float(rel), skipped=skipped)

    workers = sim_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.rows = list(pool.map(evaluate, probes))
    else:
        report.rows = [evaluate(p) for p in probes]
    return report
