"""Procedural benchmark scenes and the forward/backward timing harness.

falling: cubes on an XY grid with a fixed stride drop onto the ground, so
contact work stays local per cube. stacked: two layers of brick-packed cubes
in resting contact, so every step's impacts form one large connected zone and
the backward solve is dominated by the zone adjoint.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .bodies import RigidBody, cube_mesh
from .scene import GroundPlane, Scene
from .trajectory import LossSpec, backward, simulate


def falling_scene(n: int, stride: float = 1.4, size: float = 1.0, mass: float = 1.0,
                  base_height: float = 0.8, stagger: float = 0.0) -> Scene:
    """n cubes on a grid with fixed stride, dropped from base_height (+ stagger)."""
    verts, faces = cube_mesh(size)
    cols = int(np.ceil(np.sqrt(n)))
    bodies = []
    for k in range(n):
        i, j = k % cols, k // cols
        z = base_height + stagger * k
        bodies.append(RigidBody.from_mesh(
            f"cube{k}", verts, faces, mass=mass,
            pose=[0, 0, 0, i * stride, j * stride, z]))
    return Scene(bodies, gravity=(0, 0, -9.8), dt=1 / 150, thickness=1e-3,
                 ground=GroundPlane.at_height(0.0))


def stacked_scene(n: int, size: float = 1.0, mass: float = 1.0) -> Scene:
    """Two layers of touching columns leaning against a wall.

    Gravity is tilted toward a static wall, so every side interface carries
    the accumulated lateral load of the cubes behind it: all contacts stay
    active and chain the packing into one connected impact zone, where the
    motion of one cube affects all others through the shared zone solve.
    """
    verts, faces = cube_mesh(size)
    delta = 1e-3
    n1 = (n + 1) // 2
    bodies = []
    stride = size + 0.95 * delta
    for k in range(n1):
        bodies.append(RigidBody.from_mesh(
            f"base{k}", verts, faces, mass=mass,
            pose=[0, 0, 0, k * stride, 0.0, size / 2 + delta]))
    for k in range(n - n1):
        bodies.append(RigidBody.from_mesh(
            f"top{k}", verts, faces, mass=mass,
            pose=[0, 0, 0, k * stride, 0.0, 1.5 * size + 1.95 * delta]))
    wall_x = (n1 - 1) * stride + size / 2 + 0.95 * delta + size / 2
    bodies.append(RigidBody.from_mesh(
        "wall", verts * np.array([1.0, 3.0, 3.0]), faces, mass=1.0, static=True,
        pose=[0, 0, 0, wall_x, 0.0, 1.5 * size]))
    return Scene(bodies, gravity=(0.3, 0, -9.8), dt=1 / 150, thickness=delta,
                 ground=GroundPlane.at_height(0.0))


@dataclass
class BenchmarkRow:
    n: int
    fwd_ms: float
    bwd_qr_ms: float
    bwd_direct_ms: float
    peak_bytes: int

    def as_dict(self):
        return {"N": self.n, "fwd_ms": f"{self.fwd_ms:.9g}",
                "bwd_qr_ms": f"{self.bwd_qr_ms:.9g}",
                "bwd_direct_ms": f"{self.bwd_direct_ms:.9g}",
                "peak_bytes": self.peak_bytes}


def _make_scene(kind: str, n: int) -> tuple[Scene, int]:
    if kind == "falling":
        return falling_scene(n), 40
    if kind == "stacked":
        # the settling transient of the packed layout forms the full
        # connected zone; early steps are the representative workload
        return stacked_scene(n), 2
    raise ValueError(f"unknown benchmark kind {kind!r}")


def measure(kind: str, n: int, repetitions: int = 5, steps: int | None = None):
    """Median per-step forward and backward times over repetitions.

    Only the simulation region is timed; scene construction and I/O are
    excluded. The backward pass is timed twice per repetition, once per
    differentiation path, replaying the same retained tape.
    """
    scene, default_steps = _make_scene(kind, n)
    steps = default_steps if steps is None else steps
    loss = LossSpec(kind="target_position", target=[0.0, 0.0, 0.0], body=0)
    fwd, bwd_qr, bwd_direct, peak = [], [], [], 0
    for _ in range(repetitions):
        t0 = time.perf_counter()
        traj = simulate(scene, steps=steps)
        fwd.append((time.perf_counter() - t0) / steps)
        peak = max(peak, traj.tape_bytes)
        t0 = time.perf_counter()
        backward(traj, loss, use_qr=True)
        bwd_qr.append((time.perf_counter() - t0) / steps)
        t0 = time.perf_counter()
        backward(traj, loss, use_qr=False)
        bwd_direct.append((time.perf_counter() - t0) / steps)
    return BenchmarkRow(n=n, fwd_ms=1e3 * float(np.median(fwd)),
                        bwd_qr_ms=1e3 * float(np.median(bwd_qr)),
                        bwd_direct_ms=1e3 * float(np.median(bwd_direct)),
                        peak_bytes=int(peak))


def run_benchmark(kind: str, sizes, out_csv: str | None = None,
                  repetitions: int = 5, steps: int | None = None):
    rows = [measure(kind, int(n), repetitions=repetitions, steps=steps) for n in sizes]
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["N", "fwd_ms", "bwd_qr_ms",
                                                    "bwd_direct_ms", "peak_bytes"])
            writer.writeheader()
            for row in rows:
                writer.writerow(row.as_dict())
    return rows
