import csv
import json
import os

import numpy as np
import pytest

from diffmesh.cli import main, parse_loss_spec

SCENES = os.path.join(os.path.dirname(__file__), "..", "scenes")


def scene(name):
    return os.path.join(SCENES, name)


def test_parse_loss_spec_position():
    spec = parse_loss_spec("target_position:body=1:target=0.3,0,0.5:weight=2.0:frame=final")
    assert spec.kind == "target_position"
    assert spec.body == 1
    assert np.allclose(spec.target, [0.3, 0.0, 0.5])
    assert spec.weight == 2.0


def test_parse_loss_spec_rejects_unknown():
    with pytest.raises(ValueError):
        parse_loss_spec("target_position:foo=1")
    with pytest.raises(ValueError):
        parse_loss_spec("bogus_kind")


def test_simulate_writes_frames_and_report(tmp_path):
    out = tmp_path / "run"
    rc = main(["simulate", "--scene", scene("cube_drop.json"), "--steps", "30",
               "--out", str(out)])
    assert rc == 0
    with open(out / "frames.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30  # steps x one body
    assert rows[0]["frame"] == "1"
    final = rows[-1]
    assert abs(float(final["com_z"]) - 0.501) < 1e-4
    report = json.loads((out / "report.json").read_text())
    assert report["steps"] == 30
    assert report["peak_tape_bytes"] > 0


def test_simulate_frames_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["simulate", "--scene", scene("two_cubes.json"), "--steps", "15",
                     "--out", str(out)]) == 0
    assert (out1 / "frames.csv").read_text() == (out2 / "frames.csv").read_text()


def test_simulate_obj_export(tmp_path):
    out = tmp_path / "objrun"
    rc = main(["simulate", "--scene", scene("cube_drop.json"), "--steps", "3",
               "--out", str(out), "--obj"])
    assert rc == 0
    objs = sorted(p for p in os.listdir(out) if p.endswith(".obj"))
    assert objs == [f"frame_{k:05d}.obj" for k in range(4)]
    text = (out / objs[0]).read_text()
    assert text.count("v ") == 8
    assert text.count("f ") == 12


def test_simulate_empty_scene_header_only(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"ground": {"height": 0.0}}))
    out = tmp_path / "run"
    rc = main(["simulate", "--scene", str(empty), "--steps", "10", "--out", str(out)])
    assert rc == 0
    lines = (out / "frames.csv").read_text().strip().splitlines()
    assert len(lines) == 1  # header only

def test_scene_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"gravity\": [0, 0")
    rc = main(["simulate", "--scene", str(bad), "--steps", "1", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_gradcheck_pass_and_selftest_fail(tmp_path, capsys):
    args = ["gradcheck", "--scene", scene("cube_drop.json"),
            "--loss", "target_position:body=0:target=0.3,0,0.501",
            "--wrt", "controls,init,mass", "--steps", "12", "--probes", "6"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert main(args + ["--selftest-corrupt"]) == 1


def test_optimize_estimate_mass_cli(tmp_path, capsys):
    out = tmp_path / "conv.csv"
    rc = main(["optimize", "--scene", scene("two_cubes.json"), "--task", "estimate_mass",
               "--target", "3,0,0", "--iters", "60", "--steps", "18",
               "--out", str(out)])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) >= 1
    assert "mass" in rows[0]
    printed = capsys.readouterr().out
    assert "estimated mass" in printed


def test_benchmark_cli(tmp_path):
    out = tmp_path / "bench.csv"
    rc = main(["benchmark", "--kind", "falling", "--sizes", "1,2", "--out", str(out),
               "--reps", "1"])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["N"] for r in rows] == ["1", "2"]
    assert all(float(r["fwd_ms"]) > 0 for r in rows)
