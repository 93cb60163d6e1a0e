"""
Flow Lab CLI - Main Application
Parses subcommands, loads scenarios and coordinates the engine, report and plot services.
"""

import argparse
import logging
import math
import sys
import traceback
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from flowlab import __version__
from flowlab.components.plot_renderer import PlotRenderer
from flowlab.engine.attractor import (
    AbsorptionScenario,
    Lemma61Params,
    candidate_r0,
    criterion_matrix,
    forward_expansion,
    lemma61_bound,
    lemma61_falsify,
    pullback_absorption,
)
from flowlab.engine.constants import NormInputs, compute_bundle, gamma_attractor
from flowlab.engine.dispersion import (
    BallSet,
    ChainingParams,
    chaining_params_from_bundle,
    fit_c1_alpha,
    kappa_from_constants,
    measure_dispersion,
    two_point_moment,
)
from flowlab.engine.elliptic import EllipticProblem, corollary_bounds, verify_apriori, zvonkin_transform
from flowlab.engine.errors import FlowLabError
from flowlab.engine.krylov import OccupationFunctional, verify_khasminskii, verify_krylov
from flowlab.engine.model import LpWindow, build_scalar, check_assumptions, localized_lp_norm
from flowlab.engine.simulate import NoisePath, TamingSpec, TimeGrid, configure_threads, derive_seed, integrate_flow
from flowlab.services.case_study_service import CaseStudyService
from flowlab.services.report_service import ReportService, atomic_write
from flowlab.services.scenario_service import COMMAND_DEFAULTS, ScenarioConfig, ScenarioService, parse_float

logger = logging.getLogger("flowlab")

# Brownian motion on the line
DEFAULT_MODEL = {
    "name": "brownian",
    "dim": 1,
    "norms": {"b": 0.0, "b1": 0.0, "b2": 0.0, "grad_sigma": 0.0, "sigma_sup": 1.0},
}
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# (payload, csv table or None, plot spec or None)
RunResult = Tuple[Any, Optional[Tuple[List[str], List[list]]], Optional[Tuple[str, Dict]]]


def _taming(params: Dict) -> TamingSpec:
    return TamingSpec(params["taming"]["scheme"], params["taming"]["cap"])


def _optional_float(value, label: str) -> Optional[float]:
    return None if value is None else parse_float(value, label)


def _point(value, d: int, default_axis: Optional[int] = None) -> np.ndarray:
    if value is None:
        point = np.zeros(d)
        if default_axis is not None:
            point[default_axis] = 1.0
        return point
    point = np.asarray(value, dtype=float).reshape(-1)
    if point.shape != (d,):
        raise FlowLabError(f"point {value} does not have {d} coordinates")
    return point


class FlowLabCLI:
    """Main command-line application"""

    def __init__(self, scenario_service: Optional[ScenarioService] = None):
        self.scenario_service = scenario_service or ScenarioService()
        self.renderer = PlotRenderer()
        self.handlers: Dict[str, Callable[[ScenarioConfig], RunResult]] = {
            "simulate-flow": self.run_simulate_flow,
            "dispersion": self.run_dispersion,
            "two-point": self.run_two_point,
            "constants": self.run_constants,
            "krylov-check": self.run_krylov_check,
            "khasminskii-check": self.run_khasminskii_check,
            "zvonkin-solve": self.run_zvonkin_solve,
            "pde-scaling": self.run_pde_scaling,
            "attractor-pullback": self.run_attractor_pullback,
            "expansion-forward": self.run_expansion_forward,
            "lemma61": self.run_lemma61,
            "example-2-5": self.run_example_2_5,
            "case-study-bounded": self.run_case_study_bounded,
            "criterion-matrix": self.run_criterion_matrix,
        }
        self.report_service: Optional[ReportService] = None

    def log(self, msg):
        """Log message with level chosen by its prefix"""
        if msg.startswith('❌'):
            logger.error(msg)
        elif msg.startswith('⚠️'):
            logger.warning(msg)
        else:
            logger.info(msg)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="flowlab",
            description="Stochastic-flow simulation and verification laboratory for singular SDEs",
        )
        parser.add_argument("--version", action="version", version=f"flowlab {__version__}")
        sub = parser.add_subparsers(dest="command", required=True)
        for command in COMMAND_DEFAULTS:
            p = sub.add_parser(command, help=f"run the {command} scenario")
            source = p.add_mutually_exclusive_group()
            source.add_argument("--config", metavar="PATH", help="scenario JSON file")
            source.add_argument("--scenario", metavar="NAME", help="packaged scenario name")
            p.add_argument("--seed", type=int, help="base seed (overrides the file)")
            p.add_argument("--out", metavar="DIR", help="output directory (overrides the file)")
            p.add_argument("--threads", type=int, help="torch intra-op threads")
            p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
            p.add_argument("--plots", action="store_true", help="also write SVG figures")
            p.add_argument("--verbose", action="store_true", help="debug logging")
        return parser

    def load_config(self, args) -> Tuple[bool, Any]:
        """Scenario from file, packaged name or defaults, with CLI overrides"""
        if args.config:
            ok, config = self.scenario_service.load(args.config)
        elif args.scenario:
            ok, config = self.scenario_service.load_packaged(args.scenario)
        else:
            try:
                ok, config = True, self.scenario_service.parse({"command": args.command, "model": DEFAULT_MODEL})
            except FlowLabError as e:
                ok, config = False, str(e)
        if not ok:
            return False, config
        if config.command != args.command:
            return False, f"scenario is for {config.command!r}, not {args.command!r}"
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.output_dir = args.out
        return True, config

    def run(self, argv=None) -> int:
        args = self.build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        configure_threads(args.threads)

        ok, config = self.load_config(args)
        if not ok:
            self.log(f"❌ {config}")
            return 1
        self.report_service = ReportService(config.output_dir, args.format)
        self.log(f"🚀 {config.command} with seed {config.seed}")

        try:
            payload, table, plot = self.handlers[config.command](config)
        except FlowLabError as e:
            self.log(f"❌ {config.command} failed: {e}")
            return 1

        payload = {
            "command": config.command,
            "seed": config.seed,
            "scenario": self.scenario_service.serialize(config),
            "result": payload,
        }
        name = config.command.replace("-", "_")
        ok, message = self.report_service.write_report(name, payload, table)
        if not ok:
            self.log(f"❌ {message}")
            return 1
        self.log(f"📁 wrote {message}")

        if args.plots and plot is not None:
            kind, data = plot
            try:
                svg = self.renderer.render(kind, data, config.seed)
                path = self.report_service.path_for(name, "svg")
                atomic_write(path, svg)
                self.log(f"📊 wrote {path}")
            except (FlowLabError, OSError) as e:
                self.log(f"❌ plot failed: {e}")
                return 1
        self.log("✅ done")
        return 0

    # Subcommands

    def _model(self, config: ScenarioConfig):
        return self.scenario_service.build_model(config)

    def run_simulate_flow(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        d = model.dim
        initials = np.atleast_2d(np.asarray(params["initials"], dtype=float)) if params["initials"] is not None \
            else np.zeros((1, d))
        noise = NoisePath(derive_seed(config.seed, "simulate-flow", 0), d, params["dt"])
        grid = TimeGrid.span(0.0, params["horizon"], params["dt"])
        traj = integrate_flow(model, initials, noise, grid, _taming(params), stride=params["stride"])
        if traj.n_diverged:
            self.log(f"⚠️ {traj.n_diverged} members diverged")
        if params["snapshot"]:
            ok, message = self.report_service.write_snapshot("simulate_flow", traj.snapshots, params["stride"])
            self.log(f"📁 wrote {message}" if ok else f"❌ {message}")

        snaps = traj.snapshots.numpy()
        rows = [[t, m] + snaps[k, m].tolist() for k, t in enumerate(traj.times) for m in range(snaps.shape[1])]
        header = ["t", "member"] + [f"x{i}" for i in range(d)]
        norms = np.linalg.norm(snaps, axis=2)
        payload = {
            "times": traj.times,
            "final": traj.final,
            "diverged": traj.diverged,
            "first_bad_step": traj.first_bad_step,
            "running_sup_norm": traj.running_sup_norm,
            "running_inf_norm": traj.running_inf_norm,
        }
        series = {f"member {m}": norms[:, m].tolist() for m in range(min(norms.shape[1], 8))}
        return payload, (header, rows), ("dispersion", {"times": traj.times, "series": series})

    def run_dispersion(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        center = _point(params["center"], model.dim)
        report = measure_dispersion(model, BallSet(tuple(center), params["radius"], params["resolution"]),
                                    params["horizon"], params["dt"], params["replicas"], config.seed,
                                    _taming(params), stride=params["stride"])
        rows = [[i, t, report.sup_norm[i][k], report.diameter[i][k]]
                for i in range(len(report.sup_norm)) for k, t in enumerate(report.times)]
        series = {f"replica {i}": report.sup_norm[i] for i in range(min(len(report.sup_norm), 8))}
        return (report, (["replica", "t", "sup_norm", "diameter"], rows),
                ("dispersion", {"times": report.times, "series": series}))

    def run_two_point(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        x = _point(params["x"], model.dim)
        y = _point(params["y"], model.dim, default_axis=0)
        moments = []
        for r in params["orders"]:
            for horizon in params["horizons"]:
                moments.append(two_point_moment(model, x, y, r, horizon, params["dt"], params["replicas"],
                                                config.seed, _taming(params)))
        invalid = [m for m in moments if not m.valid]
        if invalid:
            self.log(f"⚠️ {len(invalid)} moment estimates excluded too many diverged replicas")
        payload: Dict[str, Any] = {"moments": moments, "fit": None, "kappa": None}
        if len(params["orders"]) >= 2 and len(params["horizons"]) >= 3:
            fit = fit_c1_alpha([(m.r, m.horizon, m.sup_moment) for m in moments], params["alpha"],
                               float(np.linalg.norm(x - y)))
            payload["fit"] = fit
            if fit.c1_hat > 0:
                payload["kappa"] = kappa_from_constants(ChainingParams(fit.c1_hat, fit.alpha, model.dim))
        rows = [[m.r, m.horizon, m.sup_moment, m.sup_se, m.terminal_moment, m.terminal_se, m.n_excluded]
                for m in moments]
        header = ["r", "T", "sup_moment", "sup_se", "terminal_moment", "terminal_se", "excluded"]
        return payload, (header, rows), None

    def run_constants(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        calibration = self.scenario_service.build_calibration(config)
        bundle = compute_bundle(NormInputs.from_model(model), calibration)
        chaining = chaining_params_from_bundle(bundle, model.dim, params["delta_dim"])
        kappa = kappa_from_constants(chaining)
        varrho = {str(r): bundle.varrho(r) for r in params["r_values"]}
        payload = {
            "bundle": bundle.to_dict(),
            "kappa": kappa,
            "varrho": varrho,
            "assumptions": check_assumptions(model),
        }
        scalars = {k: v for k, v in bundle.to_dict().items() if isinstance(v, float)}
        scalars["kappa"] = kappa.kappa
        rows = [[k, v] for k, v in sorted(scalars.items())] + [[f"varrho({r})", v] for r, v in varrho.items()]
        return payload, (["name", "value"], rows), None

    def _functional(self, model, params) -> OccupationFunctional:
        f = build_scalar(params["f"]["kind"], model.dim, params["f"]["params"])
        q = math.inf if params["q"] is None else parse_float(params["q"], "params.q")
        norm_f = params["norm_f"]
        if norm_f is None:
            window = LpWindow(lower=(-2.0,) * model.dim, upper=(2.0,) * model.dim)
            norm_f = localized_lp_norm(f, q, window)
            self.log(f"📊 estimated localized norm of f: {norm_f:.6g}")
        return OccupationFunctional(f, q, float(norm_f))

    def run_krylov_check(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        report = verify_krylov(model, self._functional(model, params), [tuple(w) for w in params["windows"]],
                               _point(params["x0"], model.dim), params["dt"], params["replicas"], config.seed,
                               _taming(params), self.scenario_service.build_calibration(config))
        if report.violations:
            self.log(f"⚠️ {report.violations} windows exceed the calibrated bound")
        rows = [[w.s, w.t, w.mean, w.se, w.bound, w.ratio, w.violation] for w in report.windows]
        return report, (["s", "t", "mean", "se", "bound", "ratio", "violation"], rows), None

    def run_khasminskii_check(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        report = verify_khasminskii(model, self._functional(model, params), params["lam"], params["horizon"],
                                    params["dt"], params["replicas"], config.seed, _point(params["x0"], model.dim),
                                    _taming(params), self.scenario_service.build_calibration(config))
        rows = [[k, getattr(report, k)] for k in ("empirical", "se", "bound", "sharp_bound", "kappa", "blocks",
                                                    "passed", "overflowed")]
        return report, (["name", "value"], rows), None

    def run_zvonkin_solve(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        transform = zvonkin_transform(model, params["lam"], params["domain_radius"], params["h"], params["damping"])
        grad_bound, u_bound = corollary_bounds(params["lam"], model.k1, model.dim, math.inf)
        payload = {
            "lam": transform.lam,
            "sup_U": transform.sup_U,
            "sup_grad_U": transform.sup_grad_U,
            "certified": transform.certified,
            "jacobian_det_range": transform.jacobian_det_range,
            "k1_tilde": transform.k1_tilde,
            "k2_tilde": transform.k2_tilde,
            "phi_psi_residual": transform.phi_psi_residual,
            "transformed_ellipticity": transform.transformed_ellipticity,
            "ellipticity_ok": transform.ellipticity_ok,
            "transformed_norms": transform.transformed_norms() if transform.certified else None,
            "corollary_bounds": {"grad_U": grad_bound, "U": u_bound},
            "tags": transform.U.tags,
            "residual": transform.U.residual,
        }
        if params["snapshot"]:
            ok, message = self.report_service.write_grid_function("zvonkin_U", transform.U.values, model.dim)
            self.log(f"📁 wrote {message}" if ok else f"❌ {message}")
        rows = [[k, payload[k]] for k in ("lam", "sup_U", "sup_grad_U", "certified", "phi_psi_residual",
                                          "ellipticity_ok", "residual")]
        return payload, (["name", "value"], rows), None

    def run_pde_scaling(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        f = build_scalar(params["f"]["kind"], model.dim, params["f"]["params"])
        lambdas = [float(v) for v in params["lambdas"]]
        template = EllipticProblem(lam=lambdas[0], a=model.a, b=model.drift, f=f,
                                   domain_radius=params["domain_radius"], h=params["h"], dims=model.dim)
        report = verify_apriori(template, lambdas, parse_float(params["p"], "params.p"),
                                parse_float(params["p_prime"], "params.p_prime"), params["margin"])
        rows = [[lam, u, g] for lam, u, g in zip(report.lambdas, report.u_norms, report.grad_norms)]
        plot = ("scaling", {
            "lambdas": report.lambdas,
            "norms": {"u": report.u_norms, "grad u": report.grad_norms},
            "slopes": {"u": report.expected_u, "grad u": report.expected_grad},
        })
        return report, (["lambda", "u_norm", "grad_norm"], rows), plot

    def run_attractor_pullback(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        scenario = AbsorptionScenario(params["gamma"], params["r"], tuple(params["depths"]),
                                      params["mesh_resolution"], params["replicas"])
        report = pullback_absorption(model, scenario, params["dt"], config.seed, _taming(params),
                                     self.scenario_service.build_calibration(config), params["shell_cap"],
                                     _optional_float(params["beta"], "params.beta"))
        r0 = candidate_r0(model, params["shell_cap"], params["shell_cap"] / 2)
        self.log(f"📊 absorption probability {report.probability:.4g} (CI {report.ci[0]:.3g}..{report.ci[1]:.3g})")
        rows = [[i, ok, reason] for i, (ok, reason) in enumerate(zip(report.passed, report.reasons))]
        return {"absorption": report, "candidate_r0": r0}, (["replica", "passed", "reason"], rows), None

    def run_expansion_forward(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        report = forward_expansion(model, params["r"], params["gamma"], params["horizon"], params["mesh_resolution"],
                                   params["replicas"], params["dt"], config.seed, _taming(params),
                                   self.scenario_service.build_calibration(config), params["shell_cap"],
                                   _optional_float(params["beta"], "params.beta"))
        rows = [[i, ok, reason] for i, (ok, reason) in enumerate(zip(report.passed, report.reasons))]
        return report, (["replica", "passed", "reason"], rows), None

    def _lemma61_params(self, model, case: Dict, calibration) -> Lemma61Params:
        values = {k: float(v) for k, v in case.items() if k != "case"}
        values.setdefault("k1", model.k1)
        values.setdefault("k2", model.k2)
        values.setdefault("norm_b1", model.norm_b1 or 0.0)
        if "gamma" not in values:
            values["gamma"] = gamma_attractor(NormInputs.from_model(model), calibration)
        return Lemma61Params(**values)

    def run_lemma61(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        calibration = self.scenario_service.build_calibration(config)
        entries, rows = [], []
        for case in params["cases"]:
            number = int(case["case"])
            lemma_params = self._lemma61_params(model, case, calibration)
            bound = lemma61_bound(number, lemma_params)
            entry: Dict[str, Any] = {"case": number, "params": lemma_params, "bound": bound, "falsification": None}
            if params["falsify"] and (not bound.vacuous or params["allow_vacuous"]):
                result = lemma61_falsify(model, number, lemma_params, params["replicas"], params["dt"], config.seed,
                                         _taming(params), params["allow_vacuous"])
                entry["falsification"] = result
                if result.violation:
                    self.log(f"⚠️ case {number}: empirical {result.empirical:.4g} exceeds bound {result.bound:.4g}")
                rows.append([number, bound.value, bound.vacuous, result.empirical, result.se, result.violation])
            else:
                rows.append([number, bound.value, bound.vacuous, None, None, None])
            entries.append(entry)
        return {"cases": entries}, (["case", "bound", "vacuous", "empirical", "se", "violation"], rows), None

    def run_example_2_5(self, config: ScenarioConfig) -> RunResult:
        params = config.params
        service = CaseStudyService(_taming(params))
        report = service.run_example_2_5(params["epsilons"], params["q"], params["horizon"], params["dt"],
                                         params["replicas"], config.seed, params["burn_in"], params["y0"])
        if not report.increasing:
            self.log("⚠️ blow-up averages are not increasing as epsilon decreases")
        rows = [[r.epsilon, r.empirical, r.se, r.oracle, r.relative_deviation, r.n_diverged] for r in report.rows]
        return report, (["epsilon", "empirical", "se", "oracle", "relative_deviation", "diverged"], rows), None

    def run_case_study_bounded(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        service = CaseStudyService(_taming(params))
        report = service.run_bounded_case_study(model, self.scenario_service.build_calibration(config),
                                                params["epsilon"], params["radius"], params["resolution"],
                                                params["horizon"], params["dt"], params["replicas"], config.seed)
        rows = [[k, getattr(report, k)] for k in ("epsilon", "kappa_bound", "beta_threshold", "kappa_hat_max",
                                                    "calibration_needed")]
        return report, (["name", "value"], rows), None

    def run_criterion_matrix(self, config: ScenarioConfig) -> RunResult:
        model, params = self._model(config), config.params
        matrix = criterion_matrix(model, params["r_grid"], params["R_grid"], params["horizons"],
                                  params["mesh_resolution"], params["replicas"], params["dt"], config.seed,
                                  _taming(params))
        rows = [[h, r, R, matrix.probabilities[i][j][k]]
                for i, h in enumerate(matrix.horizons)
                for j, r in enumerate(matrix.r_grid)
                for k, R in enumerate(matrix.R_grid)]
        plot = ("heatmap", {"matrix": matrix.probabilities[-1], "rows": matrix.r_grid, "cols": matrix.R_grid})
        return matrix, (["horizon", "r", "R", "probability"], rows), plot


def main(argv=None) -> int:
    """Console entry point"""
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return FlowLabCLI().run(argv)
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        print(f"Error running flowlab: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
