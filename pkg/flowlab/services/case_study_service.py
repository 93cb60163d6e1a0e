"""
Case Study Service Component
Runs the packaged case studies: the degenerate-noise blow-up system and the
bounded-coefficient expansion bounds.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from flowlab.engine.constants import (
    CalibrationSet,
    case_study_beta_threshold,
    case_study_kappa_bound,
)
from flowlab.engine.dispersion import BallSet, measure_dispersion
from flowlab.engine.errors import ConstantsError, ModelError, SolverError
from flowlab.engine.model import SdeModel, build_field
from flowlab.engine.simulate import (
    OccupationIntegral,
    TamingSpec,
    TimeGrid,
    derive_seed,
    integrate_flow,
    replicate,
    steps_of,
)

logger = logging.getLogger(__name__)

QUADRATURE_RTOL = 1e-8


def example_2_5_model(epsilon: float, q: float) -> SdeModel:
    """dX = |Y|^{-q} dt + eps dW1, dY = clamp(-Y, -1, 1) dt + eps dW2"""
    if not epsilon > 0:
        raise ModelError(f"epsilon must be positive, got {epsilon}")
    if not 0 <= q < 0.25:
        raise ModelError(f"q must lie in [0, 1/4), got {q}")
    b1 = build_field("power_singular", 2, {"q": q, "source": 1, "target": 0})
    b2 = build_field("clamp_linear", 2, {"coefficient": -1.0, "lower": -1.0, "upper": 1.0, "coordinates": [1]})
    sigma = build_field("scalar", 2, {"epsilon": epsilon}, diffusion=True)
    # b1 lies in the localized L_p for every p < 1/q
    p = math.inf if q == 0 else 0.5 * (4 + 1 / q)
    return SdeModel(
        dim=2, drift_b1=b1.oracle, drift_b2=b2.oracle, diffusion=sigma.oracle,
        k1=epsilon ** 2, k2=epsilon ** 2, p=p,
        norm_b2=1.0, norm_grad_sigma=0.0, sigma_sup=epsilon,
        singular=b1.singular, name=f"example-2-5(eps={epsilon}, q={q})",
    )


def _quad(func, lower, upper, **kwargs) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            value, error = quad(func, lower, upper, limit=200, **kwargs)
        except IntegrationWarning as e:
            raise SolverError(f"quadrature did not converge on [{lower}, {upper}]: {e}") from e
    if error > QUADRATURE_RTOL * max(abs(value), 1.0):
        raise SolverError(f"quadrature error {error:.3g} too large on [{lower}, {upper}]")
    return value


def example_2_5_oracle(epsilon: float, q: float) -> float:
    """Stationary mean of |Y|^{-q} under the density proportional to exp(2 V / eps^2)"""
    s = epsilon ** 2
    # V(y) = -y^2/2 on |y| <= 1 and 1/2 - |y| beyond; the density is even in y

    def inner(y):
        return math.exp(-y * y / s)

    def outer(y):
        return math.exp((1.0 - 2.0 * y) / s)

    singular_part = _quad(inner, 0.0, 1.0, weight="alg", wvar=(-q, 0.0))
    tail_part = _quad(lambda y: y ** (-q) * outer(y), 1.0, math.inf)
    mass = _quad(inner, 0.0, 1.0) + _quad(outer, 1.0, math.inf)
    return (singular_part + tail_part) / mass


@dataclass
class Example25Row:
    epsilon: float
    empirical: float
    se: float
    oracle: float
    relative_deviation: float
    n_diverged: int


@dataclass
class Example25Report:
    q: float
    horizon: float
    burn_in: float
    dt: float
    replicas: int
    rows: List[Example25Row]
    increasing: bool


@dataclass
class BoundedCaseStudyReport:
    epsilon: float
    kappa_bound: float
    beta_threshold: float
    kappa_hat: List[float]
    kappa_hat_max: float
    calibration_needed: Optional[float]
    calibration: Dict = field(default_factory=dict)


class CaseStudyService:
    """Service for the packaged case studies"""

    def __init__(self, taming: TamingSpec = TamingSpec()):
        self.taming = taming

    def time_average(self, epsilon: float, q: float, horizon: float, burn_in: float, dt: float,
                     replicas: int, base_seed: int, y0: float = 1.0):
        """Replica mean of (1/(T - burn_in)) int_{burn_in}^T |Y_s|^{-q} ds"""
        model = example_2_5_model(epsilon, q)
        start, stop = steps_of(burn_in, dt), steps_of(horizon, dt)
        if not 0 <= start < stop:
            raise SolverError("need 0 <= burn_in < horizon")
        seeds = [derive_seed(base_seed, "example-2-5", i) for i in range(replicas)]
        states, noise = replicate(np.array([[0.0, y0]]), seeds, dt)

        def blow_up(x):
            return model.drift_b1(x)[:, 0]

        occupation = OccupationIntegral(blow_up, [(start, stop)])
        traj = integrate_flow(model, states, noise, TimeGrid.from_steps(0, dt, stop), self.taming,
                              stride=0, observers=[occupation])
        keep = ~traj.diverged
        averages = (occupation.totals[0][keep] / (horizon - burn_in)).tolist()
        if not averages:
            raise SolverError(f"every replica diverged at epsilon={epsilon}")
        mean = math.fsum(averages) / len(averages)
        se = float(np.std(averages, ddof=1) / math.sqrt(len(averages))) if len(averages) > 1 else 0.0
        return mean, se, traj.n_diverged

    def run_example_2_5(self, epsilons: Sequence[float], q: float, horizon: float, dt: float,
                        replicas: int, base_seed: int, burn_in: float = 0.0, y0: float = 1.0) -> Example25Report:
        """Empirical blow-up averages against the stationary quadrature, per epsilon"""
        rows = []
        for eps in sorted(epsilons, reverse=True):
            oracle = example_2_5_oracle(eps, q)
            mean, se, lost = self.time_average(eps, q, horizon, burn_in, dt, replicas, base_seed, y0)
            logger.info("example 2.5: eps=%g empirical=%.6g oracle=%.6g", eps, mean, oracle)
            rows.append(Example25Row(eps, mean, se, oracle, abs(mean - oracle) / oracle, lost))
        increasing = all(b.empirical > a.empirical for a, b in zip(rows, rows[1:]))
        return Example25Report(q, horizon, burn_in, dt, replicas, rows, increasing)

    def run_bounded_case_study(self, model: SdeModel, calibration: CalibrationSet, epsilon: float,
                               radius: float, resolution: int, horizon: float, dt: float,
                               replicas: int, base_seed: int) -> BoundedCaseStudyReport:
        """Bounded-coefficient kappa and beta formulas next to a measured dispersion rate"""
        if model.norm_b is None or model.norm_grad_sigma is None:
            raise ConstantsError("the bounded case study needs declared norm_b and norm_grad_sigma")
        d = model.dim
        norm_b1 = model.norm_b1 or 0.0
        norm_b2 = model.norm_b2 if model.norm_b2 is not None else model.norm_b
        kappa_bound = case_study_kappa_bound(model.k1, model.k2, model.norm_b, model.norm_grad_sigma, d,
                                             epsilon, calibration)
        beta = case_study_beta_threshold(model.k1, model.k2, norm_b1, norm_b2, model.norm_grad_sigma, d,
                                         epsilon, calibration)
        report = measure_dispersion(model, BallSet(tuple([0.0] * d), radius, resolution), horizon, dt,
                                    replicas, base_seed, self.taming, subcommand="case-study-bounded")
        worst = max(report.kappa_hat)
        needed = None
        if worst > kappa_bound:
            needed = calibration.case_c1 * worst / kappa_bound
            logger.warning("measured kappa %.4g exceeds the bound %.4g; case_c1 >= %.4g needed",
                           worst, kappa_bound, needed)
        return BoundedCaseStudyReport(
            epsilon=epsilon,
            kappa_bound=kappa_bound,
            beta_threshold=beta,
            kappa_hat=report.kappa_hat,
            kappa_hat_max=worst,
            calibration_needed=needed,
            calibration=calibration.to_dict(),
        )
