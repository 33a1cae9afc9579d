"""Command line interface: simulate, gradcheck, optimize, benchmark.

SIM_THREADS caps the harness's own thread pools (finite-difference probes);
--fast-diff toggles the QR-accelerated zone adjoint globally.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .benchmarks import run_benchmark
from .bodies import RigidBody
from .contact import FailSafeError
from .gradcheck import gradient_check
from .optimize import DivergenceError, optimize_estimate_mass, optimize_inverse_force
from .scenefile import SceneFormatError, load_scene
from .trajectory import LossSpec, backward, simulate


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def parse_loss_spec(text: str) -> LossSpec:
    """Loss grammar: kind[:key=value]*, e.g. target_position:body=0:target=1,0,0.5."""
    parts = text.split(":")
    kind = parts[0]
    kwargs = {}
    for part in parts[1:]:
        if "=" not in part:
            raise ValueError(f"bad loss option {part!r} (expected key=value)")
        key, value = part.split("=", 1)
        if key == "target":
            kwargs["target"] = np.array([float(v) for v in value.split(",")])
        elif key == "weight":
            kwargs["weight"] = float(value)
        elif key == "frame":
            kwargs["frame"] = value if value == "final" else int(value)
        elif key == "body":
            kwargs["body"] = int(value)
        else:
            raise ValueError(f"unknown loss option {key!r}")
    if kind not in ("target_position", "target_momentum", "control_effort"):
        raise ValueError(f"unknown loss kind {kind!r}")
    return LossSpec(kind=kind, **kwargs)


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    os.makedirs(args.out, exist_ok=True)
    try:
        traj = simulate(scene, steps=args.steps)
    except FailSafeError as exc:
        print(f"fail-safe violation: {exc}", file=sys.stderr)
        return 3

    frames_path = os.path.join(args.out, "frames.csv")
    with open(frames_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "body", "com_x", "com_y", "com_z",
                         "vel_x", "vel_y", "vel_z", "n_impacts", "n_zones",
                         "zone_dof_total"])
        counters = traj.counters()
        for frame in range(1, traj.n_steps + 1):
            state = traj.states[frame]
            n_imp, n_zones, zone_dof = counters[frame - 1]
            for b, body in enumerate(scene.bodies):
                com = scene.body_com(state, b)
                s = scene.dof_slices[b]
                if isinstance(body, RigidBody):
                    vel = state.qdot[s][3:] if s.stop > s.start else np.zeros(3)
                else:
                    vel = state.qdot[s].reshape(-1, 3).mean(axis=0)
                writer.writerow([frame, b] + [_fmt(v) for v in com]
                                + [_fmt(v) for v in vel]
                                + [n_imp, n_zones, zone_dof])

    report = {
        "steps": traj.n_steps,
        "dt": traj.h,
        "forward_ms_per_step": [1e3 * t for t in traj.step_times],
        "forward_ms_median": 1e3 * float(np.median(traj.step_times)) if traj.step_times else 0.0,
        "peak_tape_bytes": traj.tape_bytes,
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)

    if args.obj:
        for frame, state in enumerate(traj.states):
            _write_frame_obj(scene, state, os.path.join(args.out, f"frame_{frame:05d}.obj"))
    print(f"wrote {frames_path} ({traj.n_steps} steps, "
          f"{1e3 * sum(traj.step_times):.1f} ms simulated region)")
    return 0


def _write_frame_obj(scene, state, path) -> None:
    x = scene.world_positions(state)
    with open(path, "w") as fh:
        for v in x:
            fh.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for i, body in enumerate(scene.bodies):
            base = scene.vert_offsets[i]
            faces = body.faces if isinstance(body, RigidBody) else body.triangles
            for f in faces:
                fh.write(f"f {f[0] + base + 1} {f[1] + base + 1} {f[2] + base + 1}\n")


def cmd_gradcheck(args) -> int:
    scene = load_scene(args.scene)
    loss = parse_loss_spec(args.loss)
    wrt = tuple(args.wrt.split(","))
    report = gradient_check(scene, loss, steps=args.steps, wrt=wrt, eps=args.eps,
                            max_probes_per_group=args.probes, seed=args.seed,
                            use_qr=args.fast_diff, corrupt_gradients=args.selftest_corrupt)
    print(report.format_table())
    return 0 if report.passed else 1


def cmd_optimize(args) -> int:
    scene = load_scene(args.scene)
    target = np.array([float(v) for v in args.target.split(",")])
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    try:
        if args.task == "inverse_force":
            result = optimize_inverse_force(scene, target, steps=args.steps,
                                            iters=args.iters, seed=args.seed,
                                            lr=args.lr if args.lr else 0.05,
                                            body=args.body, use_qr=args.fast_diff)
        elif args.task == "estimate_mass":
            result = optimize_estimate_mass(scene, target, steps=args.steps,
                                            iters=args.iters, seed=args.seed,
                                            lr=args.lr if args.lr else 0.1,
                                            body=args.body, use_qr=args.fast_diff)
        else:
            raise ValueError(f"unknown task {args.task!r}")
    except DivergenceError as exc:
        print(f"optimization diverged: {exc}", file=sys.stderr)
        return 4

    with open(args.out, "w", newline="") as fh:
        fields = sorted({k for row in result.history for k in row})
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in result.history:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    print(f"best loss {result.best_loss:.6e} "
          f"(random-search baseline best {result.baseline_best:.6e})")
    if args.task == "estimate_mass":
        print(f"estimated mass: {result.best_params:.6g}")
    return 0


def cmd_benchmark(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = run_benchmark(args.kind, sizes, out_csv=args.out, repetitions=args.reps)
    print(f"{'N':>6} {'fwd_ms':>12} {'bwd_qr_ms':>12} {'bwd_direct_ms':>14} {'peak_bytes':>12}")
    for row in rows:
        print(f"{row.n:>6} {row.fwd_ms:>12.3f} {row.bwd_qr_ms:>12.3f} "
              f"{row.bwd_direct_ms:>14.3f} {row.peak_bytes:>12}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sim", description="Differentiable mesh simulation toolkit")
    parser.add_argument("--fast-diff", choices=("on", "off"), default="on",
                        help="use the QR-accelerated zone adjoint (default on)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="roll a scene forward and export CSV/OBJ")
    p.add_argument("--scene", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--obj", action="store_true", help="write per-frame OBJ files")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="compare gradients against finite differences")
    p.add_argument("--scene", required=True)
    p.add_argument("--loss", required=True)
    p.add_argument("--wrt", default="controls,init,mass,stiffness")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--selftest-corrupt", action="store_true",
                   help=argparse.SUPPRESS)  # harness self-test: must FAIL
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("optimize", help="gradient-based task optimization")
    p.add_argument("--scene", required=True)
    p.add_argument("--task", choices=("inverse_force", "estimate_mass"), required=True)
    p.add_argument("--target", required=True, help="comma separated 3-vector")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--body", type=int, default=0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", default="convergence.csv")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("benchmark", help="scaling and differentiation-path timing")
    p.add_argument("--kind", choices=("falling", "stacked"), required=True)
    p.add_argument("--sizes", required=True, help="comma separated object counts")
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.fast_diff = args.fast_diff == "on"
    try:
        return args.func(args)
    except SceneFormatError as exc:
        print(f"scene error: {exc}", file=sys.stderr)
        return 2
    except FailSafeError as exc:
        print(f"fail-safe violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
