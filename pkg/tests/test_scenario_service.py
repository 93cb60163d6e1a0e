"""Tests for scenario parsing, defaults and model construction"""

import json
import math

import pytest

from flowlab.engine.constants import CalibrationSet
from flowlab.engine.errors import ConfigError
from flowlab.engine.model import SdeModel
from flowlab.services.scenario_service import COMMAND_DEFAULTS, ScenarioService, dump_float, parse_float

PACKAGED = [
    "bounded_case_study", "brownian_criterion", "brownian_krylov", "example_2_5",
    "inward_absorption", "lemma61_outward", "outward_expansion",
]

BROWNIAN_MODEL = {"dim": 1, "norms": {"b": 0.0, "grad_sigma": 0.0, "sigma_sup": 1.0}}


def test_lists_packaged_scenarios(scenario_service):
    assert scenario_service.list_packaged() == PACKAGED


@pytest.mark.parametrize("name", PACKAGED)
def test_packaged_scenarios_load(scenario_service, name):
    ok, config = scenario_service.load_packaged(name)
    assert ok, config
    assert config.command in COMMAND_DEFAULTS
    assert set(config.params) == set(COMMAND_DEFAULTS[config.command])
    if config.model is not None:
        assert isinstance(scenario_service.build_model(config), SdeModel)


def test_missing_params_take_defaults(scenario_service):
    config = scenario_service.parse({"command": "dispersion", "model": BROWNIAN_MODEL, "params": {"radius": 2.0}})
    assert config.params["radius"] == 2.0
    assert config.params["resolution"] == COMMAND_DEFAULTS["dispersion"]["resolution"]
    assert config.params["taming"] == {"scheme": "clip", "cap": None}
    assert config.model["p"] == math.inf
    assert config.model["b1"] == {"kind": "zero", "params": {}}


@pytest.mark.parametrize("data", [
    {"command": "dispersion", "model": BROWNIAN_MODEL, "extra": 1},
    {"command": "dispersion", "model": BROWNIAN_MODEL, "params": {"radii": [1.0]}},
    {"command": "dispersion", "model": {**BROWNIAN_MODEL, "drift": {}}},
    {"command": "dispersion", "model": {"norms": {}}},
    {"command": "dispersion", "model": BROWNIAN_MODEL, "params": {"taming": {"scheme": "clip", "level": 2}}},
    {"command": "teleport", "model": BROWNIAN_MODEL},
    {"command": "dispersion"},
    {"command": "dispersion", "model": BROWNIAN_MODEL, "_metadata": {"version": "2.0"}},
    {"command": "dispersion", "model": BROWNIAN_MODEL, "calibration": {"c_magic": 1.0}},
    {"command": "lemma61", "model": BROWNIAN_MODEL, "params": {"cases": [{"case": 1}]}},
    {"command": "lemma61", "model": BROWNIAN_MODEL, "params": {"cases": [{"case": 1, "T": 1.0, "r3": 1.0}]}},
])
def test_invalid_scenarios_are_rejected(scenario_service, data):
    with pytest.raises(ConfigError):
        scenario_service.parse(data)


def test_model_free_command_needs_no_model(scenario_service):
    config = scenario_service.parse({"command": "example-2-5"})
    assert config.model is None
    with pytest.raises(ConfigError):
        scenario_service.build_model(config)


def test_parse_float():
    assert parse_float("inf", "x") == math.inf
    assert parse_float("-inf", "x") == -math.inf
    assert parse_float(3, "x") == 3.0
    with pytest.raises(ConfigError):
        parse_float(True, "x")
    with pytest.raises(ConfigError):
        parse_float("lots", "x")
    assert dump_float(math.inf) == "inf"
    assert dump_float(None) is None


def test_save_then_load_keeps_the_scenario(scenario_service, tmp_path):
    ok, config = scenario_service.load_packaged("lemma61_outward")
    assert ok
    ok, path = scenario_service.save(config, str(tmp_path / "copy.json"))
    assert ok
    with open(path, encoding="utf-8") as f:
        assert json.load(f)["model"]["p"] == "inf"
    ok, again = scenario_service.load(path)
    assert ok
    assert scenario_service.serialize(again) == scenario_service.serialize(config)


def test_load_reports_errors(scenario_service, tmp_path):
    ok, message = scenario_service.load(str(tmp_path / "missing.json"))
    assert not ok
    assert "Error reading scenario" in message
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"command": "nothing"}), encoding="utf-8")
    ok, message = scenario_service.load(str(bad))
    assert not ok
    assert "Invalid scenario" in message
    ok, message = scenario_service.load_packaged("does_not_exist")
    assert not ok


def test_scenario_directory_override(tmp_path):
    (tmp_path / "mine.json").write_text(json.dumps({"command": "constants", "model": BROWNIAN_MODEL}),
                                         encoding="utf-8")
    service = ScenarioService(str(tmp_path))
    assert service.list_packaged() == ["mine"]
    ok, config = service.load_packaged("mine")
    assert ok and config.command == "constants"


def test_build_model_merges_singular_sets(scenario_service):
    config = scenario_service.parse({
        "command": "dispersion",
        "model": {
            "dim": 2,
            "b1": {"kind": "power_singular", "params": {"q": 0.1}},
            "singular": {"points": [[1.0, 1.0]]},
        },
    })
    model = scenario_service.build_model(config)
    assert model.singular.points == ((1.0, 1.0),)
    assert model.singular.hyperplanes == ((1, 0.0),)


def test_build_calibration(scenario_service):
    config = scenario_service.parse({
        "command": "constants", "model": BROWNIAN_MODEL,
        "calibration": {"c_kry": {"2": 3.0}, "case_c1": 2.0, "provenance": {"case_c1": "fit"}},
    })
    calibration = scenario_service.build_calibration(config)
    assert isinstance(calibration, CalibrationSet)
    assert calibration.kry(2.0) == 3.0
    assert calibration.case_c1 == 2.0
    assert dict(calibration.provenance) == {"case_c1": "fit"}
