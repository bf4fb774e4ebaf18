import copy
import json
import os

import numpy as np
import pytest

from semslam.association import LandmarkRegistry
from semslam.cli import main
from semslam.geometry import Pose
from semslam.scenario import (
    ConfigError,
    format_tum,
    load_config,
    loop_script,
    parse_config,
    read_tum,
    write_tum,
)

PACKAGED = load_config(None).raw


def _doc(**changes):
    doc = copy.deepcopy(PACKAGED)
    doc["database"] = None
    for path, value in changes.items():
        node = doc
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        if value is _DELETE:
            del node[keys[-1]]
        else:
            node[keys[-1]] = value
    if doc["database"] is None:
        del doc["database"]
    return doc


_DELETE = object()


# -- TUM files --------------------------------------------------------------------


def test_tum_format_is_fixed_precision():
    text = format_tum([0.1], [Pose(np.eye(3), [1.0, -2.0, 0.5])])
    assert text == "0.100000000 1.000000000 -2.000000000 0.500000000 0.000000000 0.000000000 0.000000000 1.000000000\n"
    assert format_tum([], []) == ""


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [Pose.exp(rng.normal(size=6)) for _ in range(10)]
    ts = [0.1 * k for k in range(10)]
    path = tmp_path / "t.tum"
    write_tum(path, ts, poses)
    ts2, poses2 = read_tum(path)
    assert np.allclose(ts, ts2)
    for a, b in zip(poses, poses2):
        assert np.allclose(a.as_matrix(), b.as_matrix(), atol=1e-8)
    # a second write of what was read back gives identical bytes
    write_tum(tmp_path / "u.tum", ts2, poses2)
    assert (tmp_path / "u.tum").read_bytes() == path.read_bytes()


def test_tum_quaternion_sign_is_canonical():
    half_turn = Pose(np.diag([-1.0, -1.0, 1.0]))  # w = 0 exactly
    line = format_tum([0.0], [half_turn])
    assert line.split()[4:] == ["0.000000000", "0.000000000", "1.000000000", "0.000000000"]
    assert "-0.000000000" not in format_tum([0.0], [Pose(np.eye(3), [-1e-17, 0.0, 0.0])])


def test_tum_rejects_short_lines(tmp_path):
    path = tmp_path / "bad.tum"
    path.write_text("# comment\n0.0 1 2 3\n")
    with pytest.raises(ValueError, match=":2:"):
        read_tum(path)


# -- configuration ------------------------------------------------------------------


def test_packaged_config_loads():
    cfg = load_config(None)
    assert cfg.trajectory["frames"] == 200 and len(cfg.objects) == 6
    assert load_config(None, seed=3).seed == 3


@pytest.mark.parametrize(
    "changes, location",
    [
        ({"schema_version": 2}, "schema_version"),
        ({"seed": -1}, "seed"),
        ({"camera__fx": "wide"}, "camera.fx"),
        ({"camera__cx": 9000.0}, "camera"),
        ({"world__objects": [{"label": "piano", "position": [0, 0]}]}, "world.objects[0].label"),
        ({"world__objects": [{"label": "chair", "position": [0]}]}, "world.objects[0].position"),
        ({"trajectory__frames": 1}, "trajectory.frames"),
        ({"trajectory__type": "figure8"}, "trajectory.type"),
        ({"trajectory__radii": _DELETE}, "trajectory.radii"),
        ({"noise__bbox_sigma": -1.0}, "noise"),
        ({"noise__wobble": 1.0}, "noise.wobble"),
        ({"crf__window": 0}, "crf.window"),
    ],
)
def test_config_errors_name_the_field(changes, location):
    with pytest.raises(ConfigError) as info:
        parse_config(_doc(**changes))
    assert info.value.location == location


def test_config_must_be_object():
    with pytest.raises(ConfigError):
        parse_config([1, 2])


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"seed": 1,\n  oops}')
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.location.endswith(":2:3")


def test_loop_script_closes():
    script = loop_script(load_config(None).trajectory)
    assert len(script) == 200
    step = np.linalg.norm(script[1].translation - script[0].translation)
    assert np.linalg.norm(script[-1].translation - script[0].translation) < 2 * step


# -- CLI -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    path = d / "tiny.json"
    path.write_text(json.dumps(_doc(trajectory__frames=12)))
    return str(path)


def test_cli_simulate(tiny_config, tmp_path, capsys):
    assert main(["simulate", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    assert {"frames.json", "groundtruth.tum", "odometry.tum", "world.json"} <= set(os.listdir(tmp_path))
    assert len(read_tum(tmp_path / "groundtruth.tum")[1]) == 12
    assert "12 frames" in capsys.readouterr().out


def test_cli_run_and_eval(tiny_config, tmp_path, capsys):
    assert main(["run", "--config", tiny_config, "--seed", "5", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["frames"] == 12 and summary["mode"] == "full"
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["seed"] == 5 and report["schema_version"] == 1
    assert main(["eval", str(tmp_path / "estimated.tum"), str(tmp_path / "groundtruth.tum")]) == 0
    assert json.loads(capsys.readouterr().out)["ate_rmse"] == pytest.approx(report["ate_rmse"], abs=1e-6)


def test_cli_export_map(tiny_config, tmp_path, capsys):
    out = tmp_path / "maps" / "m.json"
    assert main(["export-map", "--config", tiny_config, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == 1 and isinstance(doc["landmarks"], list)
    assert "landmarks" in capsys.readouterr().out


def test_cli_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(_doc(trajectory__frames=0)))
    assert main(["run", "--config", str(path)]) == 2
    assert "trajectory.frames" in capsys.readouterr().err


def test_cli_eval_length_mismatch(tmp_path, capsys):
    write_tum(tmp_path / "a.tum", [0, 1], [Pose.identity()] * 2)
    write_tum(tmp_path / "b.tum", [0], [Pose.identity()])
    assert main(["eval", str(tmp_path / "a.tum"), str(tmp_path / "b.tum")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_rejects_negative_seed():
    with pytest.raises(SystemExit):
        main(["run", "--seed", "-4"])


# -- pipeline outputs (shared short runs) ------------------------------------------------------


def test_landmarks_do_not_hurt_accuracy(short_runs):
    full = short_runs["full_a"]["report"]["ate_rmse"]
    off = short_runs["disabled"]["report"]["ate_rmse"]
    assert full <= 1.05 * off
    assert full < off


def test_disabled_mode_has_no_landmarks(short_runs):
    rep = short_runs["disabled"]["report"]
    assert rep["mode"] == "odometry_points_only"
    assert rep["landmarks"] == [] and "bbox" not in rep["optimization"]["cost_breakdown"]


def test_emitted_files_parse_back(short_runs):
    d = short_runs["full_a"]["dir"]
    for name in ("estimated.tum", "groundtruth.tum", "dead_reckoning.tum"):
        text = open(os.path.join(d, name)).read()
        ts, poses = read_tum(os.path.join(d, name))
        # re-normalising a 9-digit quaternion may move its last digit
        again = np.loadtxt(format_tum(ts, poses).splitlines())
        assert np.abs(again - np.loadtxt(text.splitlines())).max() <= 1.5e-9
    reg = LandmarkRegistry.load(os.path.join(d, "map.json"))
    assert json.loads(open(os.path.join(d, "map.json")).read()) == json.loads(json.dumps(reg.to_dict()))
    report_text = open(os.path.join(d, "report.json")).read()
    assert json.dumps(json.loads(report_text), indent=2, sort_keys=True) + "\n" == report_text
    timing = json.load(open(os.path.join(d, "timing.json")))
    assert timing["total"] > 0


def test_report_metrics_finite_and_non_negative(short_runs):
    rep = short_runs["full_a"]["report"]
    vals = [rep["ate_rmse"], rep["ate_rmse_dead_reckoning"], rep["association"]["precision"], rep["association"]["recall"]]
    vals += [lm["error"] for lm in rep["landmarks"] if lm["error"] is not None]
    assert all(np.isfinite(v) and v >= 0 for v in vals)
