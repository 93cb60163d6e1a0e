"""
Attractor Component
Pullback absorption, forward expansion, radial excursion tail bounds with Monte
Carlo falsification, and the attractor criterion matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import binomtest

from flowlab.engine.constants import CalibrationSet, NormInputs, beta_zero, gamma_attractor
from flowlab.engine.errors import AttractorError, ConstantsError
from flowlab.engine.model import DTYPE, SdeModel, beta_lower, beta_star, sphere_directions
from flowlab.engine.simulate import (
    StepObserver,
    TamingSpec,
    TimeGrid,
    derive_seed,
    integrate_flow,
    pullback_state,
    replicate,
    steps_of,
)

logger = logging.getLogger(__name__)

PROXY_NOTE = "set containment checked on a boundary mesh plus an interior witness"
DEFAULT_DEPTHS = (1.0, 2.0, 4.0, 8.0)


def wilson_interval(successes: int, trials: int) -> Tuple[float, float]:
    ci = binomtest(successes, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def ball_mesh(radius: float, d: int, resolution: int, with_origin: bool = True) -> np.ndarray:
    """Boundary mesh of B_radius, origin first when requested"""
    if radius == 0:
        return np.zeros((1, d))
    points = radius * sphere_directions(d, resolution)
    if with_origin:
        points = np.concatenate([np.zeros((1, d)), points])
    return points


@dataclass
class BetaCheck:
    available: bool
    beta_estimate: Optional[float] = None
    beta_zero: Optional[float] = None
    margin: Optional[float] = None
    note: str = ""


def _beta_check(model: SdeModel, orientation: str, r_ref: float, shell_cap: float,
                calibration: CalibrationSet, override: Optional[float] = None) -> BetaCheck:
    """Advisory comparison of the sampled (or declared) radial drift with beta_0"""
    try:
        inputs = NormInputs.from_model(model)
        b0 = beta_zero(model.k1, model.k2, inputs.norm_b1, gamma_attractor(inputs, calibration))
    except ConstantsError as e:
        return BetaCheck(False, note=str(e))
    if override is not None:
        beta = float(override)
        margin = -beta - b0 if orientation == "upper" else beta - b0
        return BetaCheck(True, beta, b0, margin, "analytic override; simulation runs regardless")
    if orientation == "upper":
        beta = beta_star(model, r_ref, shell_cap).value - (model.dim - 1) * model.k2 / (2 * r_ref)
        margin = -beta - b0
    else:
        beta = beta_lower(model, r_ref, shell_cap).value
        margin = beta - b0
    return BetaCheck(True, beta, b0, margin, "advisory; simulation runs regardless")


@dataclass(frozen=True)
class AbsorptionScenario:
    gamma: float
    r: float
    depths: Tuple[float, ...] = DEFAULT_DEPTHS
    mesh_resolution: int = 32
    replicas: int = 200

    def __post_init__(self):
        if self.gamma < 0 or not self.r > 0:
            raise AttractorError("need gamma >= 0 and r > 0")
        if not self.depths or min(self.depths) < 0:
            raise AttractorError("depths must be nonnegative and nonempty")

    @property
    def horizon(self) -> float:
        return max(self.depths)


@dataclass
class ProbabilityReport:
    passed: List[bool]
    reasons: List[str]
    probability: float
    ci: Tuple[float, float]
    beta_check: BetaCheck
    note: str = PROXY_NOTE
    witness: str = "origin"


def _summarize(passed: List[bool], reasons: List[str], beta: BetaCheck, witness: str = "origin") -> ProbabilityReport:
    hits = sum(passed)
    return ProbabilityReport(passed, reasons, hits / len(passed), wilson_interval(hits, len(passed)), beta,
                             witness=witness)


def pullback_absorption(
    model: SdeModel,
    scenario: AbsorptionScenario,
    dt: float,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    calibration: CalibrationSet = CalibrationSet(),
    shell_cap: float = 100.0,
    beta: Optional[float] = None,
) -> ProbabilityReport:
    """Per replica: every sampled start in B_{gamma t} lands in B_r at time 0, for every depth"""
    d, replicas = model.dim, scenario.replicas
    seeds = [derive_seed(base_seed, "attractor-pullback", i) for i in range(replicas)]
    passed = [True] * replicas
    reasons = ["ok"] * replicas
    for depth in scenario.depths:
        mesh = ball_mesh(scenario.gamma * depth, d, scenario.mesh_resolution)
        states, noise = replicate(mesh, seeds, dt)
        traj = pullback_state(model, states, depth, noise, dt, taming)
        final = torch.linalg.vector_norm(traj.final, dim=1).view(replicas, -1)
        diverged = traj.diverged.view(replicas, -1).any(dim=1)
        outside = (final > scenario.r).any(dim=1)
        for i in range(replicas):
            if not passed[i]:
                continue
            if diverged[i]:
                passed[i], reasons[i] = False, "diverged"
            elif outside[i]:
                passed[i], reasons[i] = False, f"escaped B_r at depth {depth}"
    check = _beta_check(model, "upper", max(1.0, scenario.r), shell_cap, calibration, beta)
    return _summarize(passed, reasons, check)


class ExpansionMonitor(StepObserver):
    """Tracks the forward-expansion event per replica at every step"""

    def __init__(self, replicas: int, mesh_size: int, gamma: float, d: int):
        self.replicas, self.mesh_size, self.gamma, self.d = replicas, mesh_size, gamma, d
        self.ok = torch.ones(replicas, dtype=torch.bool)

    def _contains_ball(self, boundary: torch.Tensor, radius: float, witness: torch.Tensor) -> torch.Tensor:
        if self.d == 1:
            lo = boundary.min(dim=1).values[:, 0]
            hi = boundary.max(dim=1).values[:, 0]
            return (lo <= -radius) & (hi >= radius)
        if self.d == 2:
            angles = torch.atan2(boundary[..., 1], boundary[..., 0])
            turns = torch.diff(torch.cat([angles, angles[:, :1]], dim=1), dim=1)
            turns = torch.remainder(turns + math.pi, 2 * math.pi) - math.pi
            return torch.round(turns.sum(dim=1) / (2 * math.pi)).abs() == 1
        return torch.linalg.vector_norm(witness, dim=1) < radius

    def observe(self, step, time, x, alive):
        grouped = x.view(self.replicas, self.mesh_size, self.d)
        witness, boundary = grouped[:, 0], grouped[:, 1:]
        radius = self.gamma * time
        outside = torch.linalg.vector_norm(boundary, dim=2).min(dim=1).values >= radius
        if radius > 0:
            outside &= self._contains_ball(boundary, radius, witness)
        alive_r = alive.view(self.replicas, self.mesh_size).all(dim=1)
        self.ok &= outside & alive_r


def forward_expansion(
    model: SdeModel,
    r: float,
    gamma: float,
    horizon: float,
    mesh_resolution: int,
    replicas: int,
    dt: float,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    calibration: CalibrationSet = CalibrationSet(),
    shell_cap: float = 100.0,
    beta: Optional[float] = None,
) -> ProbabilityReport:
    """Per replica: for all sampled t, psi_t(partial B_r) avoids B_{gamma t} and encloses it"""
    d = model.dim
    mesh = ball_mesh(r, d, mesh_resolution)
    seeds = [derive_seed(base_seed, "expansion-forward", i) for i in range(replicas)]
    states, noise = replicate(mesh, seeds, dt)
    monitor = ExpansionMonitor(replicas, mesh.shape[0], gamma, d)
    traj = integrate_flow(model, states, noise, TimeGrid.span(0.0, horizon, dt), taming, stride=0,
                          observers=[monitor])
    diverged = traj.diverged.view(replicas, -1).any(dim=1)
    passed = monitor.ok.tolist()
    reasons = ["diverged" if diverged[i] else ("ok" if passed[i] else "expansion event failed")
               for i in range(replicas)]
    check = _beta_check(model, "lower", max(1.0, r), shell_cap, calibration, beta)
    witness = {1: "interval endpoints", 2: "winding number"}.get(d, "origin")
    return _summarize(passed, reasons, check, witness)


@dataclass(frozen=True)
class Lemma61Params:
    T: float
    gamma: float
    norm_b1: float
    k1: float
    k2: float
    r: float = 1.0
    r1: float = 2.0
    r2: float = 2.0
    R: float = 2.0
    r0: float = 1.0
    delta: float = 1.0
    delta1: float = 1.0
    beta_up: float = 0.0
    beta_down: float = 0.0


@dataclass
class BoundValue:
    case: int
    value: float
    girsanov: float
    vacuous: bool


def _girsanov(params: Lemma61Params) -> float:
    g, b1, k1, k2 = params.gamma, params.norm_b1, params.k1, params.k2
    return params.T * (g ** 2 * b1 ** 4 + k2 ** 2 * g * b1 ** 2) / (k1 * k2 ** 2)


def _positive_sq(value: float) -> float:
    return max(value, 0.0) ** 2


def lemma61_bound(case: int, params: Lemma61Params) -> BoundValue:
    """Tail bounds for one-point radial events; at T = 0 the 1/T terms are dropped"""
    q = params
    if not q.k1 * q.k2 > 0:
        raise AttractorError("K1 and K2 must be positive")
    G = _girsanov(q)
    sk2 = math.sqrt(q.k2)
    if case in (1, 4):
        if not (q.r >= 1 and q.r1 > q.r and q.r2 > q.r):
            raise AttractorError(f"case {case} needs r >= 1 and r1, r2 > r")
        if q.T == 0:
            value = 2.0
        else:
            spread = (q.r2 - q.r1) / math.sqrt(q.k2 * q.T)
            if case == 1:
                value = 2 * math.exp(G - 0.25 * _positive_sq(-spread - math.sqrt(q.T) * q.beta_up / sk2))
            else:
                value = 2 * math.exp(G - 0.25 * _positive_sq(math.sqrt(q.T) * q.beta_down / sk2 - spread))
    elif case == 2:
        if not (q.R >= q.r >= q.r0 > 1):
            raise AttractorError("case 2 needs R >= r >= r0 > 1")
        value = 4.0 if q.T == 0 else 4 * math.exp(G - (q.R - q.r) ** 2 / (16 * q.k2 * q.T))
    elif case == 3:
        if not (q.R >= q.r0 > 1 and q.delta > 0 and q.delta1 > 0):
            raise AttractorError("case 3 needs R >= r0 > 1 and delta, delta1 > 0")
        value = 6 * math.exp(G - q.delta ** 2 / (16 * q.k2 * q.delta1))
    elif case == 5:
        if not 1 <= q.r < q.r1:
            raise AttractorError("case 5 needs 1 <= r < r1")
        value = 2.0 if q.T == 0 else 2 * math.exp(G - (q.r1 - q.r) * q.beta_down / q.k2)
    else:
        raise AttractorError(f"case must be 1..5, got {case}")
    return BoundValue(case, value, G, value >= 1.0)


@dataclass
class Schedule:
    case: int
    R: float
    T: float
    r: float
    r1: float
    hypotheses_hold: bool
    margin: float


def lemma61_schedule(case: int, R: float, beta: float, beta0: float, eta: float, gamma: float,
                     iota: float = 0.25) -> Schedule:
    """Radii for the set-level cases: T = h(R), r = (1 - eta) R, r1 = R + gamma h(R), h(R) = R^iota"""
    if case not in (6, 7):
        raise AttractorError("schedules exist for cases 6 and 7")
    if R <= 2 or not 0 < eta < 0.5 or gamma <= 0:
        raise AttractorError("need R > 2, eta in (0, 1/2) and gamma > 0")
    if case == 7 and not 0 < iota < 1 / 3:
        raise AttractorError("case 7 needs iota in (0, 1/3)")
    T = R ** iota
    margin = (beta - beta0 if case == 6 else -beta - beta0) - (eta + gamma)
    return Schedule(case, R, T, (1 - eta) * R, R + gamma * T, margin > 0, margin)


class RadialEventMonitor(StepObserver):
    """Running sup/inf of |x| restricted to steps up to a cutoff"""

    def __init__(self, n: int, cutoff: int):
        self.cutoff = cutoff
        self.sup = torch.zeros(n, dtype=DTYPE)
        self.inf = torch.full((n,), math.inf, dtype=DTYPE)

    def observe(self, step, time, x, alive):
        if step > self.cutoff:
            return
        norms = torch.linalg.vector_norm(x, dim=1)
        self.sup = torch.maximum(self.sup, norms)
        self.inf = torch.minimum(self.inf, norms)


@dataclass
class FalsifyReport:
    case: int
    empirical: float
    se: float
    ci: Tuple[float, float]
    bound: float
    margin: float
    violation: bool
    replicas: int


def lemma61_falsify(
    model: SdeModel,
    case: int,
    params: Lemma61Params,
    replicas: int,
    dt: float,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    allow_vacuous: bool = False,
) -> FalsifyReport:
    """Monte Carlo frequency of the case's event against its bound"""
    bound = lemma61_bound(case, params)
    if bound.vacuous and not allow_vacuous:
        raise AttractorError(f"case {case} bound {bound.value:.3g} is vacuous")
    q = params
    start_radius = {1: q.r2, 2: q.R, 3: q.R, 4: q.r1, 5: q.r1}[case]
    horizon = q.delta1 if case == 3 else q.T
    direction = np.zeros(model.dim)
    direction[0] = 1.0
    seeds = [derive_seed(base_seed, f"lemma61-{case}", i) for i in range(replicas)]
    states, noise = replicate(start_radius * direction, seeds, dt)
    n_steps = steps_of(horizon, dt)
    monitor = RadialEventMonitor(replicas, n_steps)
    traj = integrate_flow(model, states, noise, TimeGrid.from_steps(0, dt, n_steps), taming, stride=0,
                          observers=[monitor])
    end = torch.linalg.vector_norm(traj.final, dim=1)

    if case == 1:
        event = (end >= q.r1) & (monitor.inf >= q.r)
    elif case == 2:
        event = (end >= q.R) & (monitor.inf <= q.r)
    elif case == 3:
        event = monitor.sup >= q.R + q.delta
    elif case == 4:
        event = (end <= q.r2) & (monitor.inf >= q.r)
    else:
        event = monitor.inf <= q.r
    hits = int(event.sum())
    p = hits / replicas
    se = math.sqrt(p * (1 - p) / replicas)
    return FalsifyReport(case, p, se, wilson_interval(hits, replicas), bound.value,
                         bound.value - p, p - 2 * se > bound.value, replicas)


@dataclass
class CriterionMatrix:
    r_grid: List[float]
    R_grid: List[float]
    horizons: List[float]
    probabilities: List[List[List[float]]]  # [horizon][r][R]
    replicas: int


def geometric_depths(horizon: float) -> List[float]:
    """0, 1, 2, 4, ... up to horizon, with horizon itself included"""
    depths, t = [0.0], 1.0
    while t < horizon:
        depths.append(t)
        t *= 2
    if horizon > 0:
        depths.append(float(horizon))
    return depths


def criterion_matrix(
    model: SdeModel,
    r_grid: Sequence[float],
    R_grid: Sequence[float],
    horizons: Sequence[float],
    mesh_resolution: int,
    replicas: int,
    dt: float,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
) -> CriterionMatrix:
    """P(every mesh point of B_r pulled back from every depth <= horizon stays in B_R)"""
    d = model.dim
    horizon_list = sorted(float(h) for h in horizons)
    depths = geometric_depths(horizon_list[-1])
    for h in horizon_list:
        if h not in depths:
            depths.append(h)
    depths = sorted(set(depths))
    seeds = [derive_seed(base_seed, "criterion-matrix", i) for i in range(replicas)]

    # worst[r][depth] = per-replica max final norm
    worst: Dict[Tuple[float, float], torch.Tensor] = {}
    for r in r_grid:
        mesh = ball_mesh(r, d, mesh_resolution)
        for depth in depths:
            states, noise = replicate(mesh, seeds, dt)
            traj = pullback_state(model, states, depth, noise, dt, taming)
            norms = torch.linalg.vector_norm(traj.final, dim=1)
            norms = torch.where(traj.diverged, torch.full_like(norms, math.inf), norms)
            worst[(r, depth)] = norms.view(replicas, -1).amax(dim=1)

    probabilities = []
    for h in horizon_list:
        used = [t for t in depths if t <= h]
        table = []
        for r in r_grid:
            reach = torch.stack([worst[(r, t)] for t in used]).amax(dim=0)
            table.append([float((reach <= R).to(DTYPE).mean()) for R in R_grid])
        probabilities.append(table)
    return CriterionMatrix(list(r_grid), list(R_grid), horizon_list, probabilities, replicas)


@dataclass
class R0Estimate:
    r0: Optional[float]
    value_at_r0: Optional[float]
    evaluations: int


def candidate_r0(model: SdeModel, shell_cap: float, r_max: float, tol: float = 1e-3,
                 samples: int = 32) -> R0Estimate:
    """Smallest r in (1, r_max] with beta_star(r) <= 0, by bisection"""
    def value(r):
        return beta_star(model, r, max(shell_cap, 2 * r), samples, samples).value

    evaluations = 1
    hi_value = value(r_max)
    if hi_value > 0:
        return R0Estimate(None, None, evaluations)
    lo, hi = 1.0, r_max
    evaluations += 1
    if value(lo) <= 0:
        return R0Estimate(lo, value(lo), evaluations + 1)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        evaluations += 1
        if value(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return R0Estimate(hi, value(hi), evaluations + 1)
