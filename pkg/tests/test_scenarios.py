import json
import subprocess
import sys

import numpy as np
import pytest

from collisional import cli
from collisional.linalg import kron
from collisional.oscillator import momentum, position
from collisional.scenarios import (
    EXIT_CHECK_FAILED, EXIT_INVALID, PRESETS, ConfigError, apply_overrides, build_cycle,
    build_operator, build_state, export_config, list_presets, load_config, preset_config,
    run_scenario, validate_config,
)


def test_catalog_size():
    assert len(list_presets()) >= 11
    assert all(desc for _, desc in list_presets())


@pytest.mark.parametrize("name", list(PRESETS))
def test_preset_round_trip(name, tmp_path):
    cfg = validate_config(preset_config(name))
    path = tmp_path / "cfg.json"
    path.write_text(export_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert build_cycle(again) == build_cycle(cfg)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_config("no-such-preset")


def test_operator_builders():
    x = build_operator({"op": "position", "dim": 6})
    assert np.allclose(x, position(6))
    assert np.allclose(build_operator({"op": "momentum", "dim": 6}), momentum(6))
    assert np.allclose(build_operator({"op": "kron", "factors": [{"op": "pauli_x"}, {"op": "pauli_z"}]}),
                       kron(np.array([[0, 1], [1, 0]]), np.diag([1, -1])))
    m = build_operator({"op": "matrix", "re": [[1, 0], [0, 0]], "im": [[0, 1], [-1, 0]]})
    assert np.allclose(m, [[1, 1j], [-1j, 0]])
    p2 = build_operator({"op": "power", "of": {"op": "pauli_y"}, "n": 2})
    assert np.allclose(p2, np.eye(2))
    e = build_operator({"op": "embed", "of": {"op": "pauli_z"}, "index": 1, "dims": [3, 2]})
    assert np.allclose(e, kron(np.eye(3), np.diag([1, -1])))
    s = build_operator({"op": "sum", "terms": [{"op": "identity", "dim": 2}, {"op": "scale", "factor": 2, "of": {"op": "pauli_z"}}]})
    assert np.allclose(s, np.diag([3, -1]))


def test_state_builders():
    psi = build_state({"kind": "ket", "re": [1, 1]})
    assert np.allclose(psi, 0.5 * np.ones((2, 2)))
    assert np.allclose(build_state({"kind": "fock", "dim": 3, "level": 2}), np.diag([0, 0, 1]))
    prod = build_state({"kind": "product", "factors": [{"kind": "maximally_mixed", "dim": 2}, {"kind": "fock", "dim": 2, "level": 0}]})
    assert np.allclose(prod, np.diag([0.5, 0, 0.5, 0]))


def test_newton_pair_assignments():
    cyc = build_cycle(preset_config("newton-pair"))
    assert cyc.p == 2 and len(cyc.ancillae) == 2
    x = position(8)
    x1, x2 = kron(x, np.eye(8)), kron(np.eye(8), x)
    (s1, s2), (s3, s4) = cyc.substeps
    assert (s1.ancilla, s1.m_op) == (0, "p") and np.allclose(s1.s_op, x1)
    assert (s2.ancilla, s2.m_op) == (1, "p") and np.allclose(s2.s_op, x2)
    assert (s3.ancilla, s3.m_op) == (1, "x") and np.allclose(s3.s_op, x1)
    assert (s4.ancilla, s4.m_op) == (0, "x") and np.allclose(s4.s_op, x2)


def _write(tmp_path, text):
    p = tmp_path / "c.json"
    p.write_text(text)
    return str(p)


def test_invalid_json_reports_line(tmp_path, capsys):
    path = _write(tmp_path, '{\n  "name": "x",\n  "hbar": ,\n}')
    assert cli.main(["validate", path]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "line 3" in err


def test_schema_violation_reports_field(tmp_path, capsys):
    cfg = preset_config("weak-potential")
    cfg["sweep"]["T"] = -1
    path = _write(tmp_path, json.dumps(cfg, indent=2))
    assert cli.main(["run", path]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "sweep/T" in err and "line" in err


def test_structural_violation_rejected(tmp_path, capsys):
    cfg = preset_config("weak-potential")
    cfg["initial_state"] = {"kind": "ket", "re": [1, 0, 0]}
    assert cli.main(["run", _write(tmp_path, json.dumps(cfg))]) == EXIT_INVALID
    cfg = preset_config("weak-potential")
    cfg["substeps"][0][0]["ancilla"] = 3
    assert cli.main(["validate", _write(tmp_path, json.dumps(cfg))]) == EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path):
    cfg = preset_config("weak-potential")
    cfg["analysis"]["ratio_range"] = [0.0, 0.1]
    cfg["sweep"]["n"] = [32, 64, 128]
    assert cli.main(["run", _write(tmp_path, json.dumps(cfg)), "--out", str(tmp_path / "o")]) == EXIT_CHECK_FAILED


def test_preset_outputs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["preset", "filtering-ensemble", "--ntraj", "64", "--seed", "3", "--out", str(a)]) == 0
    assert cli.main(["preset", "filtering-ensemble", "--ntraj", "64", "--seed", "3", "--out", str(b)]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert "manifest.json" in files and "ensemble_distance.csv" in files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["passed"]
    assert set(manifest["outputs"]) | {"manifest.json"} == set(files)


def test_overrides():
    cfg = apply_overrides(preset_config("weak-potential"), tau_points=3, hbar=2.0)
    assert cfg["sweep"]["n"] == [32, 64, 128] and cfg["hbar"] == 2.0
    assert preset_config("weak-potential")["sweep"]["n"][:3] == [32, 64, 128]


def test_csv_round_trips_floats(tmp_path):
    res = run_scenario(preset_config("zeno-qubit"), tmp_path)
    series = {s.name: s for s in res.series}["coherence"]
    rows = (tmp_path / "coherence.csv").read_text().splitlines()
    assert rows[0] == "time,value"
    assert [float(r.split(",")[1]) for r in rows[1:]] == list(series.y)


def test_list_and_export(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in PRESETS)
    assert cli.main(["preset", "weak-potential", "--export"]) == 0
    assert json.loads(capsys.readouterr().out) == preset_config("weak-potential")


def test_console_script_module():
    out = subprocess.run([sys.executable, "-m", "collisional.cli", "list"], capture_output=True, text=True)
    assert out.returncode == 0 and "zeno-qubit" in out.stdout
