"""End-to-end tests for the flowlab command line"""

import json

import pytest
import torch

from flowlab.lab_cli import FlowLabCLI, main

LINE_MODEL = {
    "name": "brownian",
    "dim": 1,
    "norms": {"b": 0.0, "b1": 0.0, "b2": 0.0, "grad_sigma": 0.0, "sigma_sup": 1.0},
}

OUTWARD_LINE = {
    "name": "outward-line",
    "dim": 1,
    "b2": {"kind": "saturating_radial", "params": {"speed": 5.0}},
    "k1": 1.0,
    "k2": 1.0,
    "norms": {"b": 5.0, "b1": 0.0, "b2": 5.0, "grad_sigma": 0.0, "sigma_sup": 1.0},
}


@pytest.fixture
def cli():
    return FlowLabCLI()


def _write_config(tmp_path, command, params, model=LINE_MODEL, seed=17):
    path = tmp_path / f"{command}.json"
    data = {"command": command, "seed": seed, "params": params}
    if model is not None:
        data["model"] = model
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _report(out, name):
    return json.loads((out / f"{name}.json").read_text(encoding="utf-8"))


def test_simulate_flow_writes_report(cli, tmp_path):
    config = _write_config(tmp_path, "simulate-flow",
                           {"initials": [[0.0], [1.0]], "horizon": 0.1, "dt": 0.01, "stride": 1})
    out = tmp_path / "out"
    assert cli.run(["simulate-flow", "--config", config, "--out", str(out)]) == 0
    report = _report(out, "simulate_flow")
    assert report["command"] == "simulate-flow"
    assert report["seed"] == 17
    assert len(report["result"]["times"]) == 11
    # additive noise keeps the gap between the two members
    final = report["result"]["final"]
    assert final[1][0] - final[0][0] == pytest.approx(1.0, abs=1e-9)


def test_seed_override_and_csv_format(cli, tmp_path):
    config = _write_config(tmp_path, "simulate-flow", {"horizon": 0.05, "dt": 0.01, "stride": 1})
    out = tmp_path / "out"
    assert cli.run(["simulate-flow", "--config", config, "--out", str(out), "--seed", "3",
                    "--format", "csv"]) == 0
    lines = (out / "simulate_flow.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,member,x0"
    assert len(lines) == 1 + 6


def test_runs_are_replicable(cli, tmp_path):
    config = _write_config(tmp_path, "simulate-flow", {"horizon": 0.1, "dt": 0.01})
    assert cli.run(["simulate-flow", "--config", config, "--out", str(tmp_path / "a")]) == 0
    assert cli.run(["simulate-flow", "--config", config, "--out", str(tmp_path / "b")]) == 0
    assert _report(tmp_path / "a", "simulate_flow")["result"] == _report(tmp_path / "b", "simulate_flow")["result"]


def test_dispersion_with_plots(cli, tmp_path):
    config = _write_config(tmp_path, "dispersion",
                           {"radius": 1.0, "resolution": 8, "horizon": 0.1, "dt": 0.01, "replicas": 2, "stride": 1})
    out = tmp_path / "out"
    assert cli.run(["dispersion", "--config", config, "--out", str(out), "--plots"]) == 0
    assert (out / "dispersion.json").exists()
    assert b"<svg" in (out / "dispersion.svg").read_bytes()


def test_constants_on_the_default_model(cli, tmp_path):
    assert cli.run(["constants", "--out", str(tmp_path)]) == 0
    report = _report(tmp_path, "constants")
    assert report["result"]["bundle"]["c1"] == pytest.approx(4.0)
    assert set(report["result"]["varrho"]) == {"1.0", "2.0"}


def test_lemma61_bounds_and_falsification(cli, tmp_path):
    cases = [{"case": 5, "T": 1.0, "r": 1.0, "r1": 3.0, "beta_down": 5.0},
             {"case": 5, "T": 1.0, "r": 1.0, "r1": 3.0, "beta_down": 0.0}]
    config = _write_config(tmp_path, "lemma61", {"cases": cases, "replicas": 50, "dt": 0.01}, model=OUTWARD_LINE)
    assert cli.run(["lemma61", "--config", config, "--out", str(tmp_path)]) == 0
    entries = _report(tmp_path, "lemma61")["result"]["cases"]
    assert entries[0]["falsification"]["violation"] is False
    assert entries[1]["bound"]["vacuous"] is True
    assert entries[1]["falsification"] is None


def test_example_2_5_runs_without_a_model(cli, tmp_path):
    params = {"epsilons": [1.0], "q": 0.0, "horizon": 0.2, "burn_in": 0.0, "dt": 0.01, "replicas": 2}
    config = _write_config(tmp_path, "example-2-5", params, model=None)
    assert cli.run(["example-2-5", "--config", config, "--out", str(tmp_path)]) == 0
    rows = _report(tmp_path, "example_2_5")["result"]["rows"]
    assert rows[0]["oracle"] == pytest.approx(1.0, rel=1e-9)


def test_unknown_scenario_fails(cli, tmp_path):
    assert cli.run(["constants", "--scenario", "no_such_scenario", "--out", str(tmp_path)]) == 1


def test_scenario_for_another_command_fails(cli, tmp_path):
    assert cli.run(["constants", "--scenario", "inward_absorption", "--out", str(tmp_path)]) == 1


def test_invalid_parameters_fail(cli, tmp_path):
    config = _write_config(tmp_path, "simulate-flow", {"horizon": 0.1, "dt": 0.03})
    assert cli.run(["simulate-flow", "--config", config, "--out", str(tmp_path)]) == 1


def test_unwritable_output_fails(cli, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    assert cli.run(["constants", "--out", str(blocker / "sub")]) == 1


def test_main_returns_exit_status(tmp_path):
    assert main(["constants", "--out", str(tmp_path)]) == 0
    with pytest.raises(SystemExit):
        main(["not-a-command"])


def test_reports_are_byte_identical_across_thread_counts(cli, tmp_path):
    threads = torch.get_num_threads()
    config = _write_config(tmp_path, "dispersion",
                           {"radius": 1.0, "resolution": 8, "horizon": 0.1, "dt": 0.01, "replicas": 3, "stride": 2})
    out = tmp_path / "out"
    try:
        assert cli.run(["dispersion", "--config", config, "--out", str(out), "--threads", "1"]) == 0
        single = (out / "dispersion.json").read_bytes()
        assert cli.run(["dispersion", "--config", config, "--out", str(out), "--threads", "4"]) == 0
        assert (out / "dispersion.json").read_bytes() == single
    finally:
        torch.set_num_threads(threads)
