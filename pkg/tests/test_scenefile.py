import json
import os

import numpy as np
import pytest

from diffmesh.bodies import ClothMesh, RigidBody
from diffmesh.scenefile import (
    SceneFormatError,
    load_scene,
    parse_scene_text,
    scene_from_doc,
    write_scene_text,
)

SCENES_DIR = os.path.join(os.path.dirname(__file__), "..", "scenes")

MINIMAL = """
{
  "gravity": [0, 0, -9.8],
  "rigid_bodies": [
    {"name": "c", "mesh": "cube", "size": 0.5, "mass": 1.0,
     "pose": {"translation": [0, 0, 1.0]}}
  ],
  "ground": {"height": 0.0}
}
"""


def test_parse_minimal_scene():
    doc = parse_scene_text(MINIMAL)
    scene = scene_from_doc(doc)
    assert len(scene.bodies) == 1
    assert isinstance(scene.bodies[0], RigidBody)
    assert scene.ground is not None
    assert scene.ndof == 6


def test_round_trip_canonical_form():
    doc = parse_scene_text(MINIMAL)
    text = write_scene_text(doc)
    doc2 = parse_scene_text(text)
    assert doc == doc2
    assert write_scene_text(doc2) == text


def test_unknown_top_level_key_rejected():
    bad = json.loads(MINIMAL)
    bad["wind"] = [1, 0, 0]
    with pytest.raises(SceneFormatError, match="unknown keys"):
        parse_scene_text(json.dumps(bad))


def test_unknown_body_key_rejected():
    bad = json.loads(MINIMAL)
    bad["rigid_bodies"][0]["friction"] = 0.5
    with pytest.raises(SceneFormatError, match="unknown keys"):
        parse_scene_text(json.dumps(bad))


def test_parse_error_reports_line_and_column():
    with pytest.raises(SceneFormatError, match="line"):
        parse_scene_text("{\n  \"gravity\": [0, 0,\n}")


def test_missing_mass_rejected():
    bad = json.loads(MINIMAL)
    del bad["rigid_bodies"][0]["mass"]
    with pytest.raises(SceneFormatError, match="mass or density"):
        parse_scene_text(json.dumps(bad))


def test_missing_mesh_file_rejected(tmp_path):
    bad = json.loads(MINIMAL)
    bad["rigid_bodies"][0]["mesh"] = "nonexistent.obj"
    with pytest.raises(SceneFormatError, match="not found"):
        parse_scene_text(json.dumps(bad), base_dir=str(tmp_path))


def test_cloth_grid_and_pinning():
    text = json.dumps({
        "cloths": [{"grid": [4, 3], "spacing": 0.2, "density": 0.3,
                    "stretch_stiffness": 10, "bend_stiffness": 0.001,
                    "pinned": [0, 3]}],
    })
    scene = scene_from_doc(parse_scene_text(text))
    cloth = scene.bodies[0]
    assert isinstance(cloth, ClothMesh)
    assert cloth.n_nodes == 12
    assert list(cloth.pinned) == [0, 3]
    assert scene.ndof == 36


def test_cloth_requires_grid_xor_mesh():
    with pytest.raises(SceneFormatError, match="exactly one"):
        parse_scene_text(json.dumps({"cloths": [{"density": 1.0}]}))


def test_obj_mesh_body(tmp_path):
    obj = tmp_path / "tri.obj"
    obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
                   "f 1 2 3\nf 1 2 4\nf 2 3 4\nf 1 3 4\n")
    doc = {"rigid_bodies": [{"mesh": "tri.obj", "mass": 1.0}]}
    scene = scene_from_doc(parse_scene_text(json.dumps(doc), base_dir=str(tmp_path)),
                           base_dir=str(tmp_path))
    assert scene.bodies[0].n_vertices == 4


def test_sphere_primitive():
    doc = {"rigid_bodies": [{"mesh": "sphere", "size": 0.5, "mass": 1.0}]}
    scene = scene_from_doc(parse_scene_text(json.dumps(doc)))
    verts = scene.bodies[0].rest_vertices
    radii = np.linalg.norm(verts, axis=1)
    assert np.abs(radii - 0.25).max() < 1e-12


def test_all_shipped_scenes_parse():
    for name in os.listdir(SCENES_DIR):
        if name.endswith(".json"):
            scene = load_scene(os.path.join(SCENES_DIR, name))
            assert scene.ndof > 0


def test_initial_velocity_and_pose_round_trip():
    doc = parse_scene_text(json.dumps({
        "rigid_bodies": [{"mesh": "cube", "mass": 2.0,
                          "pose": {"rotation": [0.1, 0.2, 0.3],
                                   "translation": [1, 2, 3]},
                          "velocity": {"angular": [0.5, 0, 0],
                                       "linear": [0, 0, -1]}}]}))
    scene = scene_from_doc(doc)
    state = scene.initial_state()
    assert np.allclose(state.q[3:], [1, 2, 3])
    assert np.allclose(state.qdot, [0.5, 0, 0, 0, 0, -1])
