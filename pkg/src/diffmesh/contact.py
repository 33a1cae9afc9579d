"""Fail-safe collision resolution and its backward pass.

The resolve loop alternates detection and per-zone projection until no new
impacts appear. Every zone solve is anchored at the original post-dynamics
candidate, so the final state depends only on that candidate and the last
constraint set per zone; the backward pass therefore differentiates exactly
one solve per zone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bodies import ClothMesh, RigidBody
from .impacts import (ImpactZone, build_zones, end_state_gaps, find_impacts,
                      impact_gaps, refresh_impact)
from .scene import GeneralizedState, Scene
from .zone_backward import (
    ZoneParamGrads,
    attach_sqrt_mass_inverse,
    kkt_backward_direct,
    kkt_backward_qr,
    zone_parameter_gradients,
)
from .zone_qp import ZoneSolution, solve_zone

MAX_FAILSAFE_ITERATIONS = 10
PENETRATION_TOL = 1e-6
# Pinched frozen-constraint configurations (sharp features caught in cloth
# creases) cannot always reach the strict tolerance; the loop keeps iterating
# toward PENETRATION_TOL but only hard-errors beyond this thickness fraction.
HARD_PENETRATION_FRACTION = 0.25


class FailSafeError(RuntimeError):
    def __init__(self, gaps):
        worst = min(gaps) if len(gaps) else 0.0
        super().__init__(
            f"collision fail-safe exhausted with {len(gaps)} residual penetrations "
            f"(worst gap {worst:.3e})")
        self.gaps = gaps


@dataclass
class ZoneTape:
    zone: ImpactZone
    solution: ZoneSolution

    @property
    def nbytes(self) -> int:
        s = self.solution
        total = (s.z_star.nbytes + s.lambda_star.nbytes + s.grad_f.nbytes
                 + s.Mhat.nbytes + s.G.nbytes + s.h.nbytes + s.q_anchor.nbytes
                 + s.f_star.nbytes + s.c_star.nbytes)
        w = getattr(s, "_sqrt_minv", None)
        if w is not None:
            total += w.nbytes
        return total


@dataclass
class CollisionTape:
    zone_tapes: list[ZoneTape] = field(default_factory=list)
    n_impacts: int = 0
    iterations: int = 0

    @property
    def n_zones(self) -> int:
        return len(self.zone_tapes)

    @property
    def zone_dof_total(self) -> int:
        return sum(t.zone.n_dof for t in self.zone_tapes)

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.zone_tapes)


def zone_mass_matrix(scene: Scene, state: GeneralizedState, zone: ImpactZone) -> np.ndarray:
    """Block-diagonal zone mass matrix at the step-start configuration."""
    mhat = np.zeros((zone.n_dof, zone.n_dof))
    for blk in zone.blocks:
        body = scene.bodies[blk.body_index]
        if blk.kind == "rigid":
            mhat[blk.zone_dof, blk.zone_dof] = body.mass_matrix(blk.rot_ref)
        else:
            nid = scene.local_vertex(int(zone.vert_ids[blk.vert_rows[0]]))
            mhat[blk.zone_dof, blk.zone_dof] = body.node_masses[nid] * np.eye(3)
    return mhat


def resolve_collisions(scene: Scene, pre_state: GeneralizedState,
                       candidate: GeneralizedState, h: float,
                       max_iterations: int = MAX_FAILSAFE_ITERATIONS):
    """Detect-and-project loop; returns the corrected state and zone tapes.

    Velocities are updated by the position correction over h. Raises
    FailSafeError when impacts remain violated after max_iterations.
    """
    x0 = scene.world_positions(pre_state)
    q_cand = candidate.q
    known: dict = {}
    current_q = q_cand.copy()
    zones: list[ImpactZone] = []
    sols: list[ZoneSolution] = []
    iterations = 0

    verified_clean = False
    warm_keys: set = set()
    for it in range(max_iterations):
        cur_state = GeneralizedState(current_q, candidate.qdot, candidate.rot_refs,
                                     candidate.index_map)
        x1 = scene.world_positions(cur_state)
        found = find_impacts(scene, x0, x1)
        if not found:
            verified_clean = True
            break
        # re-solve while genuine penetrations remain, or while newly detected
        # contacts sit below the margin (enforce once, then only penetrations
        # keep the loop alive; known sub-margin contacts were already traded
        # off by their zone solve)
        gaps = end_state_gaps(scene, found, x1)
        penetrating = gaps.min(initial=0.0) < -PENETRATION_TOL
        new_submargin = any(imp.key not in known and g < 0.999 * scene.thickness
                            for imp, g in zip(found, gaps))
        if not penetrating and not new_submargin:
            verified_clean = True
            break
        iterations = it + 1
        if not penetrating:
            # margin maintenance only: keep the rows actively carrying the
            # resolution (positive multipliers) plus the fresh detections;
            # inactive grazing history would only accumulate and wedge zones
            known = {key: imp for key, imp in known.items() if key in warm_keys}
        fresh_keys = set()
        for imp in found:
            known[imp.key] = imp   # fresh detection wins: re-linearized weights
            fresh_keys.add(imp.key)
        for key in list(known.keys() - fresh_keys):
            refreshed = refresh_impact(scene, known[key], x1)
            if refreshed is None:
                del known[key]      # pair left the contact region
            else:
                known[key] = refreshed
        impacts = [known[k] for k in sorted(known.keys())]
        zones = build_zones(scene, pre_state, impacts)
        current_q = q_cand.copy()
        sols = []
        for zone in zones:
            qz = q_cand[zone.global_index]
            mhat = zone_mass_matrix(scene, pre_state, zone)
            warm = [r for r, imp in enumerate(zone.impacts) if imp.key in warm_keys]
            sol = solve_zone(zone, qz, mhat, warm_rows=warm)
            attach_sqrt_mass_inverse(sol, zone.blocks)
            sols.append(sol)
            current_q[zone.global_index] = sol.z_star
        warm_keys = {zone.impacts[r].key
                     for zone, sol in zip(zones, sols)
                     for r in sol.active_set}

    # authoritative fail-safe verification when the loop did not already verify
    if not verified_clean:
        cur_state = GeneralizedState(current_q, candidate.qdot, candidate.rot_refs,
                                     candidate.index_map)
        x1 = scene.world_positions(cur_state)
        residual = find_impacts(scene, x0, x1)
        if residual:
            gaps = end_state_gaps(scene, residual, x1)
            hard = max(PENETRATION_TOL, HARD_PENETRATION_FRACTION * scene.thickness)
            bad = gaps[gaps < -hard]
            if len(bad):
                raise FailSafeError(list(bad))

    qdot_new = candidate.qdot + (current_q - q_cand) / h
    corrected = GeneralizedState(current_q, qdot_new, candidate.rot_refs,
                                 candidate.index_map)
    tape = CollisionTape(zone_tapes=[ZoneTape(z, s) for z, s in zip(zones, sols)],
                         n_impacts=len(known), iterations=iterations)
    return corrected, tape


@dataclass
class CollisionGradients:
    q_candidate: np.ndarray
    qdot_candidate: np.ndarray
    params: ZoneParamGrads
    thickness: float = 0.0


def collision_backward(scene: Scene, tape: CollisionTape, grad_q: np.ndarray,
                       grad_qdot: np.ndarray, h: float, use_qr: bool = True,
                       track_thickness: bool = False) -> CollisionGradients:
    """Adjoint of resolve_collisions.

    Chains the velocity update, then runs the KKT backward (QR path by
    default) on every zone; constraint weights and normals are frozen, so
    G and h carry no upstream gradient unless thickness tracking is on.
    """
    g_total = grad_q + grad_qdot / h
    gq_cand = g_total.copy()
    gqd_cand = grad_qdot.copy()
    params = ZoneParamGrads()
    thickness_grad = 0.0
    backward = kkt_backward_qr if use_qr else kkt_backward_direct

    for zt in tape.zone_tapes:
        idx = zt.zone.global_index
        out = backward(zt.solution, g_total[idx])
        gq_cand[idx] = out.grad_q
        zone_params = zone_parameter_gradients(scene, zt.zone, zt.solution, out)
        for key, val in zone_params.mass.items():
            params.mass[key] = params.mass.get(key, 0.0) + val
        for key, val in zone_params.density.items():
            params.density[key] = params.density.get(key, 0.0) + val
        for key, val in zone_params.rot_refs.items():
            params.rot_refs[key] = params.rot_refs.get(key, np.zeros((3, 3))) + val
        if track_thickness:
            thickness_grad += float(out.grad_h.sum())

    # velocity update: qdot* = qdot_cand + (q* - q_cand) / h
    gq_cand -= grad_qdot / h
    return CollisionGradients(q_candidate=gq_cand, qdot_candidate=gqd_cand,
                              params=params, thickness=thickness_grad)
