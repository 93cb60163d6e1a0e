"""
Scenario Service Component
Loads, validates and saves declarative scenario files and builds models from them.
"""

import copy
import json
import math
import os
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Any, Dict, List, Optional

from flowlab.engine.constants import CalibrationSet
from flowlab.engine.errors import ConfigError, FlowLabError
from flowlab.engine.model import SdeModel, SingularSet, build_field

FORMAT_VERSION = "1.0"

TOP_KEYS = {"_metadata", "command", "seed", "output_dir", "model", "params", "calibration"}
MODEL_KEYS = {"name", "dim", "b1", "b2", "diffusion", "k1", "k2", "p", "rho", "norms", "singular", "degenerate"}
NORM_KEYS = {"b", "b1", "b2", "grad_sigma", "sigma_sup"}
FIELD_KEYS = {"kind", "params"}
SINGULAR_KEYS = {"points", "hyperplanes"}
CALIBRATION_KEYS = {f.name for f in fields(CalibrationSet)}

TAMING = {"scheme": "clip", "cap": None}
LEMMA61_CASE_KEYS = {
    "case", "T", "gamma", "norm_b1", "k1", "k2", "r", "r1", "r2", "R", "r0",
    "delta", "delta1", "beta_up", "beta_down",
}

# Parameter defaults per subcommand; every accepted key appears here
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "simulate-flow": {
        "initials": None, "horizon": 1.0, "dt": 1e-3, "stride": 10, "taming": TAMING,
        "snapshot": False,
    },
    "dispersion": {
        "center": None, "radius": 1.0, "resolution": 64, "horizon": 1.0, "dt": 1e-3,
        "replicas": 20, "stride": 10, "taming": TAMING,
    },
    "two-point": {
        "x": None, "y": None, "orders": [1.0, 2.0], "horizons": [0.25, 0.5, 1.0], "dt": 1e-3,
        "replicas": 200, "alpha": 3.0, "taming": TAMING,
    },
    "constants": {"r_values": [1.0, 2.0], "delta_dim": None},
    "krylov-check": {
        "f": {"kind": "smoothed_indicator", "params": {}}, "q": None, "norm_f": None,
        "windows": [[0.0, 1.0], [0.0, 2.0], [0.0, 4.0]], "x0": None, "dt": 1e-2,
        "replicas": 10000, "taming": TAMING,
    },
    "khasminskii-check": {
        "f": {"kind": "smoothed_indicator", "params": {}}, "q": None, "norm_f": None,
        "lam": 0.1, "horizon": 1.0, "x0": None, "dt": 1e-2, "replicas": 2000, "taming": TAMING,
    },
    "zvonkin-solve": {"lam": 1000.0, "domain_radius": 8.0, "h": 0.05, "damping": 0.9, "snapshot": False},
    "pde-scaling": {
        "f": {"kind": "smoothed_indicator", "params": {}}, "lambdas": [10.0, 100.0, 1000.0, 10000.0],
        "p": "inf", "p_prime": "inf", "domain_radius": 8.0, "h": 0.05, "margin": 0.1,
    },
    "attractor-pullback": {
        "gamma": 0.0, "r": 5.0, "depths": [1.0, 2.0, 4.0, 8.0], "mesh_resolution": 32,
        "replicas": 200, "dt": 1e-2, "shell_cap": 100.0, "beta": None, "taming": TAMING,
    },
    "expansion-forward": {
        "r": 10.0, "gamma": 2.0, "horizon": 10.0, "mesh_resolution": 32, "replicas": 100,
        "dt": 1e-2, "shell_cap": 100.0, "beta": None, "taming": TAMING,
    },
    "lemma61": {"cases": [], "replicas": 2000, "dt": 1e-2, "falsify": True, "allow_vacuous": False,
                "taming": TAMING},
    "example-2-5": {
        "epsilons": [1.0, 0.5, 0.25], "q": 0.2, "horizon": 50.0, "burn_in": 5.0, "dt": 1e-3,
        "replicas": 200, "y0": 1.0, "taming": TAMING,
    },
    "case-study-bounded": {
        "epsilon": 0.1, "radius": 1.0, "resolution": 32, "horizon": 1.0, "dt": 1e-2,
        "replicas": 20, "taming": TAMING,
    },
    "criterion-matrix": {
        "r_grid": [0.5, 1.0, 2.0], "R_grid": [1.0, 2.0, 4.0], "horizons": [1.0, 2.0, 4.0],
        "mesh_resolution": 16, "replicas": 100, "dt": 1e-2, "taming": TAMING,
    },
}

MODEL_FREE_COMMANDS = {"example-2-5"}


def parse_float(value, label: str) -> float:
    """Numbers or the strings inf / -inf"""
    if isinstance(value, bool):
        raise ConfigError(f"{label}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity", "-inf"):
        return -math.inf if value.strip().startswith("-") else math.inf
    raise ConfigError(f"{label}: expected a number, got {value!r}")


def dump_float(value: Optional[float]):
    if value is None:
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _reject_unknown(data: Dict, allowed, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")


@dataclass
class ScenarioConfig:
    command: str
    seed: int = 0
    output_dir: str = "results"
    model: Optional[Dict[str, Any]] = None
    params: Dict[str, Any] = field(default_factory=dict)
    calibration: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


class ScenarioService:
    """Service for scenario files: parsing with defaults, saving and model construction"""

    def __init__(self, scenario_dir: Optional[str] = None):
        self.scenario_dir = scenario_dir

    # Parsing

    def _parse_field(self, data, where: str, default_kind: str) -> Dict[str, Any]:
        if data is None:
            return {"kind": default_kind, "params": {}}
        _reject_unknown(data, FIELD_KEYS, where)
        if "kind" not in data:
            raise ConfigError(f"{where}: missing 'kind'")
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{where}.params: expected an object")
        return {"kind": str(data["kind"]), "params": copy.deepcopy(params)}

    def _parse_model(self, data) -> Dict[str, Any]:
        _reject_unknown(data, MODEL_KEYS, "model")
        if "dim" not in data:
            raise ConfigError("model: missing 'dim'")
        norms = data.get("norms", {}) or {}
        _reject_unknown(norms, NORM_KEYS, "model.norms")
        singular = data.get("singular", {}) or {}
        _reject_unknown(singular, SINGULAR_KEYS, "model.singular")
        return {
            "name": str(data.get("name", "model")),
            "dim": int(data["dim"]),
            "b1": self._parse_field(data.get("b1"), "model.b1", "zero"),
            "b2": self._parse_field(data.get("b2"), "model.b2", "zero"),
            "diffusion": self._parse_field(data.get("diffusion"), "model.diffusion", "scalar"),
            "k1": parse_float(data.get("k1", 1.0), "model.k1"),
            "k2": parse_float(data.get("k2", 1.0), "model.k2"),
            "p": parse_float(data.get("p", "inf"), "model.p"),
            "rho": parse_float(data.get("rho", "inf"), "model.rho"),
            "norms": {key: None if norms.get(key) is None else parse_float(norms[key], f"model.norms.{key}")
                      for key in sorted(NORM_KEYS)},
            "singular": {
                "points": [[float(c) for c in pt] for pt in singular.get("points", [])],
                "hyperplanes": [[int(a), float(v)] for a, v in singular.get("hyperplanes", [])],
            },
            "degenerate": bool(data.get("degenerate", False)),
        }

    def _parse_params(self, command: str, data) -> Dict[str, Any]:
        defaults = COMMAND_DEFAULTS[command]
        data = data or {}
        _reject_unknown(data, defaults, "params")
        params = copy.deepcopy(defaults)
        params.update(copy.deepcopy(data))
        if "taming" in params:
            taming = params["taming"] or {}
            _reject_unknown(taming, TAMING, "params.taming")
            params["taming"] = {**TAMING, **taming}
        for key in ("f",):
            if key in params:
                params[key] = self._parse_field(params[key], f"params.{key}", "smoothed_indicator")
        if command == "lemma61":
            cases = []
            for i, case in enumerate(params["cases"]):
                _reject_unknown(case, LEMMA61_CASE_KEYS, f"params.cases[{i}]")
                if "case" not in case or "T" not in case:
                    raise ConfigError(f"params.cases[{i}]: 'case' and 'T' are required")
                cases.append(dict(case))
            params["cases"] = cases
        return params

    def _parse_calibration(self, data) -> Dict[str, Any]:
        data = data or {}
        _reject_unknown(data, CALIBRATION_KEYS, "calibration")
        out = {}
        for key in sorted(data):
            if key == "c_kry":
                out[key] = {str(q): float(v) for q, v in data[key].items()}
            elif key == "provenance":
                out[key] = {str(k): str(v) for k, v in data[key].items()}
            else:
                out[key] = float(data[key])
        return out

    def parse(self, data: Dict[str, Any]) -> ScenarioConfig:
        """Validate a raw scenario dictionary and fill every default"""
        _reject_unknown(data, TOP_KEYS, "scenario")
        command = data.get("command")
        if command not in COMMAND_DEFAULTS:
            raise ConfigError(f"unknown command {command!r}")
        model = data.get("model")
        if model is None and command not in MODEL_FREE_COMMANDS:
            raise ConfigError(f"command {command!r} needs a model section")
        metadata = data.get("_metadata", {}) or {}
        version = str(metadata.get("version", FORMAT_VERSION))
        if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
            raise ConfigError(f"unsupported scenario format version {version}")
        return ScenarioConfig(
            command=command,
            seed=int(data.get("seed", 0)),
            output_dir=str(data.get("output_dir", "results")),
            model=None if model is None else self._parse_model(model),
            params=self._parse_params(command, data.get("params")),
            calibration=self._parse_calibration(data.get("calibration")),
            metadata={"version": version, "description": str(metadata.get("description", ""))},
        )

    def serialize(self, config: ScenarioConfig) -> Dict[str, Any]:
        model = None
        if config.model is not None:
            model = copy.deepcopy(config.model)
            for key in ("k1", "k2", "p", "rho"):
                model[key] = dump_float(model[key])
            model["norms"] = {k: dump_float(v) for k, v in model["norms"].items()}
        params = copy.deepcopy(config.params)
        for key in ("p", "p_prime"):
            if key in params:
                params[key] = dump_float(parse_float(params[key], f"params.{key}"))
        return {
            "_metadata": dict(config.metadata),
            "command": config.command,
            "seed": config.seed,
            "output_dir": config.output_dir,
            "model": model,
            "params": params,
            "calibration": copy.deepcopy(config.calibration),
        }

    # Persistence

    def load(self, path: str):
        """Load and parse a scenario file"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            return True, self.parse(data)
        except (OSError, json.JSONDecodeError) as e:
            return False, f"Error reading scenario {path}: {e}"
        except FlowLabError as e:
            return False, f"Invalid scenario {path}: {e}"

    def load_packaged(self, name: str):
        """Load one of the scenario files shipped with the package"""
        filename = name if name.endswith(".json") else f"{name}.json"
        if self.scenario_dir:
            return self.load(os.path.join(self.scenario_dir, filename))
        try:
            text = resources.files("flowlab.scenarios").joinpath(filename).read_text(encoding="utf-8")
            return True, self.parse(json.loads(text))
        except (OSError, json.JSONDecodeError) as e:
            return False, f"Error reading packaged scenario {filename}: {e}"
        except FlowLabError as e:
            return False, f"Invalid packaged scenario {filename}: {e}"

    def list_packaged(self) -> List[str]:
        if self.scenario_dir:
            names = os.listdir(self.scenario_dir)
        else:
            names = [entry.name for entry in resources.files("flowlab.scenarios").iterdir()]
        return sorted(n[:-5] for n in names if n.endswith(".json"))

    def save(self, config: ScenarioConfig, path: str):
        """Save a scenario in canonical form"""
        try:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.serialize(config), f, indent=2, sort_keys=True)
            return True, path
        except OSError as e:
            return False, f"Error saving scenario: {e}"

    # Construction

    def build_model(self, config: ScenarioConfig) -> SdeModel:
        spec = config.model
        if spec is None:
            raise ConfigError(f"command {config.command!r} has no model section")
        d = spec["dim"]
        b1 = build_field(spec["b1"]["kind"], d, spec["b1"]["params"])
        b2 = build_field(spec["b2"]["kind"], d, spec["b2"]["params"])
        sigma = build_field(spec["diffusion"]["kind"], d, spec["diffusion"]["params"], diffusion=True)
        declared = SingularSet(
            points=tuple(tuple(pt) for pt in spec["singular"]["points"]),
            hyperplanes=tuple((int(a), float(v)) for a, v in spec["singular"]["hyperplanes"]),
        )
        norms = spec["norms"]
        return SdeModel(
            dim=d,
            drift_b1=b1.oracle,
            drift_b2=b2.oracle,
            diffusion=sigma.oracle,
            k1=spec["k1"],
            k2=spec["k2"],
            p=spec["p"],
            rho=spec["rho"],
            norm_b=norms["b"],
            norm_b1=norms["b1"],
            norm_b2=norms["b2"],
            norm_grad_sigma=norms["grad_sigma"],
            sigma_sup=norms["sigma_sup"],
            singular=declared.merged(b1.singular).merged(b2.singular).merged(sigma.singular),
            name=spec["name"],
            degenerate=spec["degenerate"],
        )

    def build_calibration(self, config: ScenarioConfig) -> CalibrationSet:
        data = dict(config.calibration)
        c_kry = tuple(sorted((float(q), float(v)) for q, v in data.pop("c_kry", {}).items()))
        provenance = tuple(sorted(data.pop("provenance", {}).items()))
        try:
            return CalibrationSet(c_kry=c_kry, provenance=provenance, **data)
        except TypeError as e:
            raise ConfigError(f"bad calibration: {e}") from e
