"""Scene JSON format: strict schema, canonical serialization, procedural builds.

A scene document holds global parameters, rigid bodies (primitive or OBJ
meshes), cloths (grids or OBJ meshes), and an optional ground plane. Unknown
keys are rejected; writing is canonical (defaults filled, keys sorted) so a
parse/write round trip is stable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .bodies import (ClothMesh, RigidBody, cloth_grid, cube_mesh, load_obj,
                     plane_mesh, sphere_mesh)
from .scene import GroundPlane, Scene


class SceneFormatError(ValueError):
    pass


_TOP_KEYS = {"gravity", "dt", "thickness", "ground", "rigid_bodies", "cloths"}
_BODY_KEYS = {"name", "mesh", "size", "mass", "density", "pose", "velocity", "static"}
_CLOTH_KEYS = {"name", "grid", "spacing", "origin", "mesh", "density",
               "stretch_stiffness", "bend_stiffness", "damping", "pinned", "velocity"}
_GROUND_KEYS = {"height", "normal"}

_DEFAULTS = {"gravity": [0.0, 0.0, -9.8], "dt": 1.0 / 150.0, "thickness": 1e-3}


def _require(cond, msg):
    if not cond:
        raise SceneFormatError(msg)


def _check_keys(obj, allowed, where):
    unknown = set(obj) - allowed
    _require(not unknown, f"{where}: unknown keys {sorted(unknown)}")


def _vec3(value, where):
    arr = np.asarray(value, dtype=float)
    _require(arr.shape == (3,), f"{where}: expected a 3-vector, got {value!r}")
    return arr


def parse_scene_text(text: str, base_dir: str = ".") -> dict:
    """Parse and validate scene JSON text into a normalized document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(
            f"scene parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    _require(isinstance(doc, dict), "top level must be an object")
    _check_keys(doc, _TOP_KEYS, "scene")

    out = {
        "gravity": list(_vec3(doc.get("gravity", _DEFAULTS["gravity"]), "gravity")),
        "dt": float(doc.get("dt", _DEFAULTS["dt"])),
        "thickness": float(doc.get("thickness", _DEFAULTS["thickness"])),
        "rigid_bodies": [],
        "cloths": [],
    }
    _require(out["dt"] > 0, "dt must be positive")
    _require(out["thickness"] > 0, "thickness must be positive")

    if "ground" in doc and doc["ground"] is not None:
        g = doc["ground"]
        _check_keys(g, _GROUND_KEYS, "ground")
        out["ground"] = {"height": float(g.get("height", 0.0)),
                         "normal": list(_vec3(g.get("normal", [0, 0, 1]), "ground.normal"))}

    for k, body in enumerate(doc.get("rigid_bodies", []) or []):
        where = f"rigid_bodies[{k}]"
        _check_keys(body, _BODY_KEYS, where)
        mesh = body.get("mesh", "cube")
        _require(isinstance(mesh, str), f"{where}.mesh must be a string")
        if mesh not in ("cube", "plane", "sphere"):
            path = os.path.join(base_dir, mesh)
            _require(os.path.exists(path), f"{where}: mesh file not found: {mesh}")
        _require("mass" in body or "density" in body, f"{where}: need mass or density")
        pose = body.get("pose", {})
        _check_keys(pose, {"rotation", "translation"}, f"{where}.pose")
        vel = body.get("velocity", {})
        _check_keys(vel, {"angular", "linear"}, f"{where}.velocity")
        out["rigid_bodies"].append({
            "name": str(body.get("name", f"body{k}")),
            "mesh": mesh,
            "size": float(body.get("size", 1.0)),
            **({"mass": float(body["mass"])} if "mass" in body else {}),
            **({"density": float(body["density"])} if "density" in body else {}),
            "pose": {
                "rotation": list(_vec3(pose.get("rotation", [0, 0, 0]), f"{where}.pose.rotation")),
                "translation": list(_vec3(pose.get("translation", [0, 0, 0]),
                                          f"{where}.pose.translation")),
            },
            "velocity": {
                "angular": list(_vec3(vel.get("angular", [0, 0, 0]), f"{where}.velocity.angular")),
                "linear": list(_vec3(vel.get("linear", [0, 0, 0]), f"{where}.velocity.linear")),
            },
            "static": bool(body.get("static", False)),
        })

    for k, cloth in enumerate(doc.get("cloths", []) or []):
        where = f"cloths[{k}]"
        _check_keys(cloth, _CLOTH_KEYS, where)
        _require(("grid" in cloth) != ("mesh" in cloth),
                 f"{where}: exactly one of grid or mesh")
        entry = {
            "name": str(cloth.get("name", f"cloth{k}")),
            "density": float(cloth.get("density", 0.3)),
            "stretch_stiffness": float(cloth.get("stretch_stiffness", 50.0)),
            "bend_stiffness": float(cloth.get("bend_stiffness", 1e-3)),
            "damping": float(cloth.get("damping", 0.0)),
            "pinned": sorted(int(i) for i in cloth.get("pinned", [])),
            "origin": list(_vec3(cloth.get("origin", [0, 0, 0]), f"{where}.origin")),
        }
        if "grid" in cloth:
            grid = cloth["grid"]
            _require(len(grid) == 2 and all(int(g) >= 2 for g in grid),
                     f"{where}.grid must be [nx>=2, ny>=2]")
            entry["grid"] = [int(grid[0]), int(grid[1])]
            entry["spacing"] = float(cloth.get("spacing", 0.1))
        else:
            path = os.path.join(base_dir, cloth["mesh"])
            _require(os.path.exists(path), f"{where}: mesh file not found: {cloth['mesh']}")
            entry["mesh"] = cloth["mesh"]
        if "velocity" in cloth:
            entry["velocity"] = list(_vec3(cloth["velocity"], f"{where}.velocity"))
        out["cloths"].append(entry)

    _require(out["rigid_bodies"] or out["cloths"] or "ground" in out,
             "scene has no bodies and no ground")
    return out


def write_scene_text(doc: dict) -> str:
    """Canonical JSON for a normalized document."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def load_scene(path: str) -> Scene:
    with open(path) as fh:
        doc = parse_scene_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))
    return scene_from_doc(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def scene_from_doc(doc: dict, base_dir: str = ".") -> Scene:
    bodies = []
    for spec in doc["rigid_bodies"]:
        if spec["mesh"] == "cube":
            verts, faces = cube_mesh(spec["size"])
        elif spec["mesh"] == "plane":
            verts, faces = plane_mesh(spec["size"])
        elif spec["mesh"] == "sphere":
            verts, faces = sphere_mesh(spec["size"])
        else:
            verts, faces = load_obj(os.path.join(base_dir, spec["mesh"]))
            verts = verts * spec["size"]
        pose = np.concatenate([spec["pose"]["rotation"], spec["pose"]["translation"]])
        vel = np.concatenate([spec["velocity"]["angular"], spec["velocity"]["linear"]])
        bodies.append(RigidBody.from_mesh(
            spec["name"], verts, faces, mass=spec.get("mass"),
            density=spec.get("density"), static=spec["static"], pose=pose, velocity=vel))
    for spec in doc["cloths"]:
        if "grid" in spec:
            nodes, tris = cloth_grid(spec["grid"][0], spec["grid"][1], spec["spacing"],
                                     origin=spec["origin"])
        else:
            nodes, tris = load_obj(os.path.join(base_dir, spec["mesh"]))
            nodes = nodes + np.asarray(spec["origin"])
        vel = None
        if "velocity" in spec:
            vel = np.tile(spec["velocity"], (len(nodes), 1))
        bodies.append(ClothMesh.from_mesh(
            spec["name"], nodes, tris, density=spec["density"],
            stretch_stiffness=spec["stretch_stiffness"],
            bend_stiffness=spec["bend_stiffness"], damping=spec["damping"],
            pinned=spec["pinned"], velocity=vel))

    ground = None
    if "ground" in doc:
        ground = GroundPlane.at_height(doc["ground"]["height"], doc["ground"]["normal"])
    return Scene(bodies, gravity=doc["gravity"], dt=doc["dt"],
                 thickness=doc["thickness"], ground=ground)
