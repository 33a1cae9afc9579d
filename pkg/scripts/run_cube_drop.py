#!/usr/bin/env python3
"""Drop a cube onto the ground and print the settling trace."""

import os
import sys

from diffmesh.scenefile import load_scene
from diffmesh.trajectory import simulate

SCENES = os.path.join(os.path.dirname(__file__), "..", "scenes")


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120
    scene = load_scene(os.path.join(SCENES, "cube_drop.json"))
    traj = simulate(scene, steps=steps)
    for k in range(0, steps + 1, max(1, steps // 12)):
        state = traj.states[k]
        print(f"frame {k:4d}  z = {state.q[5]:+.6f}  vz = {state.qdot[5]:+.6f}")
    print(f"resting height: {traj.states[-1].q[5]:.6f} "
          f"(ground + half extent + thickness = {0.5 + scene.thickness})")


if __name__ == "__main__":
    main()
