#!/usr/bin/env python3
"""Estimate the left cube's mass from the observed post-collision momentum."""

import argparse
import os

from diffmesh.optimize import optimize_estimate_mass
from diffmesh.scenefile import load_scene

SCENES = os.path.join(os.path.dirname(__file__), "..", "scenes")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--target", default="3,0,0")
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()
    scene = load_scene(os.path.join(SCENES, "two_cubes.json"))
    target = [float(v) for v in args.target.split(",")]
    result = optimize_estimate_mass(scene, target, steps=args.steps, iters=args.iters)
    print(f"estimated mass: {result.best_params:.4f} (loss {result.best_loss:.3e}, "
          f"{len(result.history)} iterations)")
    print("momentum conservation predicts (m1 - m2) v = target_x "
          "=> m1 = 4 for the shipped scene")


if __name__ == "__main__":
    main()
