import json
import subprocess
import sys

import numpy as np
import pytest

from kpbc import cli

ZETA_BOX = {"lower": [-0.5, -0.5, -0.5, -0.5, 0.0], "upper": [1.5, 1.5, 1.5, 1.5, 1.0]}


def write(tmp_path, data, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def kpbc_scenario(**kw):
    data = {"schema_version": 1, "id": "zeta-kpbc", "model": {"id": "zeta"},
            "controller": {"kind": "kpbc", "gains": {"K1": 1, "K2": 1, "K3": 1}},
            "initial_state": "origin", "integrator": {"t_final": 60}}
    data.update(kw)
    return data


def test_simulate_kpbc(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--scenario", write(tmp_path, kpbc_scenario()), "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"] is True
    assert summary["oscillation_count"] is not None
    cols = cli.read_csv(out / "trajectory.csv")
    assert list(cols)[:7] == ["t", "x1", "x2", "x3", "x4", "u1", "uK1"]
    assert {"y1", "S1"} <= set(cols)
    script = (out / "plot_trajectory.py").read_text()
    assert "trajectory.csv" in script
    compile(script, "plot_trajectory.py", "exec")


def test_csv_round_trip(tmp_path):
    from kpbc.simulation import IntegratorConfig, simulate

    data = kpbc_scenario(integrator={"t_final": 2.0, "record_stride": 7})
    out = tmp_path / "o"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 0
    _, cl = cli.build_closed_loop(data)
    traj = simulate(cl, np.zeros(6), IntegratorConfig(t_final=2.0, record_stride=7))
    parsed = cli.read_csv(out / "trajectory.csv")
    for name, col in traj.columns():
        np.testing.assert_array_equal(parsed[name], col)


def test_simulate_identical_artifacts(tmp_path):
    path = write(tmp_path, kpbc_scenario(integrator={"t_final": 5.0}))
    for d in ("a", "b"):
        assert cli.main(["simulate", "--scenario", path, "--out", str(tmp_path / d)]) == 0
    for f in ("trajectory.csv", "summary.json", "plot_trajectory.py"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_equilibrium_flat(tmp_path):
    data = kpbc_scenario(initial_state="anchor", integrator={"t_final": 10.0})
    out = tmp_path / "eq"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 0
    cols = cli.read_csv(out / "trajectory.csv")
    for name in ("x1", "x2", "x3", "x4", "u1", "uK1", "S1"):
        assert np.ptp(cols[name]) < 1e-12


def test_simulate_spbc_multiple_states(tmp_path):
    data = {"schema_version": 1, "id": "zeta-spbc", "model": {"id": "zeta"},
            "controller": {"kind": "spbc"},
            "initial_state": ["origin", [1, 1, 1, 1, 0]], "integrator": {"t_final": 5.0}}
    out = tmp_path / "s"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["csv"] for r in summary["runs"]] == ["trajectory_1.csv", "trajectory_2.csv"]
    cols = cli.read_csv(out / "trajectory_2.csv")
    assert "v1" in cols and "S2" in cols


def test_overrides(tmp_path):
    out = tmp_path / "ov"
    path = write(tmp_path, kpbc_scenario())
    assert cli.main(["simulate", "--scenario", path, "--out", str(out), "--dt", "0.01",
                     "--t-final", "1.0"]) == 0
    cols = cli.read_csv(out / "trajectory.csv")
    assert cols["t"][-1] == pytest.approx(1.0)
    assert cols["t"][1] == pytest.approx(0.1)


@pytest.mark.parametrize("data", [
    {"schema_version": 1, "id": "x", "model": {"id": "zeta"}, "bogus": 1},
    {"schema_version": 2, "id": "x", "model": {"id": "zeta"}},
    {"schema_version": 1, "id": "x", "model": {"id": "nope"}},
    {"schema_version": 1, "id": "x", "model": {"id": "zeta"},
     "controller": {"kind": "kpbc", "gains": {"K4": 1}}},
    {"schema_version": 1, "id": "x", "model": {"id": "zeta"},
     "controller": {"kind": "kpbc", "gains": {"K1": 0}}},
    {"schema_version": 1, "id": "x", "model": {"id": "zeta"}, "initial_state": [0, 0]},
])
def test_simulate_invalid(tmp_path, data, capsys):
    out = tmp_path / "bad"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 3
    assert not out.exists()
    assert capsys.readouterr().err.startswith("kpbc:")


def test_simulate_not_json(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{not json")
    assert cli.main(["simulate", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 3


def test_simulate_integration_failure(tmp_path):
    data = kpbc_scenario(controller={"kind": "kpbc", "gains": {"K1": 1e-6, "K2": 0, "K3": 0}},
                         initial_state=[5, 5, 5, 5, 50, 50],
                         integrator={"dt": 0.5, "t_final": 200})
    out = tmp_path / "fail"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["error"].startswith("IntegrationError")


def test_verify_zeta(tmp_path):
    data = {"schema_version": 1, "id": "v", "model": {"id": "zeta"},
            "verification": [{"property": "krasovskii", "box": ZETA_BOX, "samples": 20000},
                             {"property": "differential", "box": ZETA_BOX, "samples": 5000},
                             {"property": "shifted", "samples": 5000,
                              "box": {"lower": [0] * 5, "upper": [1] * 5}}]}
    out = tmp_path / "v"
    assert cli.main(["verify", "--scenario", write(tmp_path, data), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and [b["violations"] for b in report["blocks"]] == [0, 0, 0]
    assert report["blocks"][0]["seed"] == 42


def test_verify_cuberoot_violation(tmp_path):
    data = {"schema_version": 1, "id": "cr", "model": {"id": "cuberoot"},
            "verification": [{"property": "differential", "metric": [[1, 0], [0, 1]],
                              "box": {"lower": [0.05, 0.05, -1], "upper": [1, 1, 1]},
                              "samples": 2000}]}
    out = tmp_path / "cr"
    assert cli.main(["verify", "--scenario", write(tmp_path, data), "--out", str(out),
                     "--seed", "9"]) == 4
    block = json.loads((out / "report.json").read_text())["blocks"][0]
    assert block["violations"] > 0 and len(block["witnesses"]) == 10 and block["seed"] == 9


def test_verify_linear_blocks(tmp_path):
    box = {"lower": [-1, -1], "upper": [1, 1]}
    data = {"schema_version": 1, "id": "lin", "model": {"id": "linear:scalar"},
            "verification": [{"property": p, "box": box, "samples": 1000}
                             for p in ("krasovskii", "differential", "shifted", "passivity",
                                       "incremental", "exactness")]}
    assert cli.main(["verify", "--scenario", write(tmp_path, data), "--out",
                     str(tmp_path / "l")]) == 0


def test_verify_zero_samples(tmp_path):
    data = {"schema_version": 1, "id": "z", "model": {"id": "zeta"},
            "verification": [{"property": "krasovskii", "box": ZETA_BOX, "samples": 0}]}
    out = tmp_path / "z"
    assert cli.main(["verify", "--scenario", write(tmp_path, data), "--out", str(out)]) == 3
    assert not out.exists()


def test_equilibrium(capsys):
    assert cli.main(["equilibrium", "--model", "zeta", "--vstar", str(1 / 3)]) == 0
    pair = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(pair["x_star"], [1 / 9, 1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    assert pair["u_star"] == [0.25]
    assert cli.main(["equilibrium", "--model", "linear:oscillator"]) == 0
    assert json.loads(capsys.readouterr().out)["x_star"] == [0.0, 0.0]
    assert cli.main(["equilibrium", "--model", "zeta", "--param", "alpha3=2",
                     "--guess", "0.1", "0.3", "0.2", "0.3", "--input", "0.25"]) == 0
    pair = json.loads(capsys.readouterr().out)
    assert pair["method"] == "newton" and pair["residual"] <= 1e-10


def test_equilibrium_errors(capsys):
    assert cli.main(["equilibrium", "--model", "buck"]) == 3
    assert cli.main(["equilibrium", "--model", "zeta", "--param", "alpha1"]) == 3
    assert cli.main(["equilibrium", "--model", "cuberoot", "--vstar", "1"]) == 3
    assert cli.main(["equilibrium"]) == 3
    # u fixed at 1 makes x2 + 1 = 0 and x1 + x3 = 0 singular for the Zeta model
    assert cli.main(["equilibrium", "--model", "zeta", "--input", "1.0"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "kpbc.cli", "equilibrium", "--model", "zeta"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout)["u_star"] == [0.25]


def test_simulate_custom_setpoint(tmp_path):
    # u* = 1/2 selects the member x* = (1, 1, 1, 1) of the equilibrium family
    data = kpbc_scenario(controller={"kind": "kpbc", "u_star": [0.5]},
                         convergence={"target": "point"}, integrator={"t_final": 120})
    out = tmp_path / "sp"
    assert cli.main(["simulate", "--scenario", write(tmp_path, data), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"]
    np.testing.assert_allclose(summary["endpoint"][:4], [1, 1, 1, 1], atol=1e-3)
