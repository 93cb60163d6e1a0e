"""
Dispersion Component
Rate function, expansion-rate formula and Monte Carlo dispersion statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import minimize_scalar

from flowlab.engine.constants import ConstantBundle
from flowlab.engine.errors import DispersionError
from flowlab.engine.model import DTYPE, SdeModel, as_states, sphere_directions
from flowlab.engine.simulate import (
    PairDistance,
    StepObserver,
    TamingSpec,
    TimeGrid,
    derive_seed,
    integrate_flow,
    replicate,
)

logger = logging.getLogger(__name__)

EXCLUSION_LIMIT = 0.10
SUMMARY_QUANTILES = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class ChainingParams:
    c1: float
    alpha: float
    d: int
    delta_dim: Optional[float] = None
    c2: float = 1.0
    c3: float = 0.0

    def __post_init__(self):
        if not (self.c1 > 0 and self.alpha > 0 and self.c2 > 0 and self.c3 >= 0):
            raise DispersionError("need c1 > 0, alpha > 0, c2 > 0, c3 >= 0")
        if not 0 <= self.box_dim <= self.d:
            raise DispersionError(f"box dimension must lie in [0, {self.d}]")

    @property
    def box_dim(self) -> float:
        return self.d - 1 if self.delta_dim is None else self.delta_dim


def rate_function_I(gamma: float, params: ChainingParams) -> float:
    if gamma < 0:
        raise DispersionError(f"gamma must be nonnegative, got {gamma}")
    c1, a, d = params.c1, params.alpha, params.d
    flat_end = c1 * d ** a
    if gamma <= flat_end:
        return 0.0
    if gamma <= c1 * (a + 1) * d ** a:
        return d * (gamma - flat_end)
    return gamma ** (1 + 1 / a) * a * (1 + a) ** (-1 - 1 / a) * c1 ** (-1 / a)


def rate_function_variational(gamma: float, params: ChainingParams, r_max: Optional[float] = None,
                              grid_points: int = 20001) -> float:
    """max(0, sup_{r >= d} r (gamma - c1 r^alpha)) by dense grid plus bounded refinement"""
    c1, a, d = params.c1, params.alpha, params.d
    stationary = (max(gamma, 0.0) / (c1 * (1 + a))) ** (1 / a)
    upper = r_max or max(2 * d, 2 * stationary) + 1.0
    rs = np.linspace(d, upper, grid_points)
    values = rs * (gamma - c1 * rs ** a)
    i = int(np.argmax(values))
    lo, hi = rs[max(i - 1, 0)], rs[min(i + 1, grid_points - 1)]
    best = float(values[i])
    if hi > lo:
        res = minimize_scalar(lambda r: -r * (gamma - c1 * r ** a), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-14})
        best = max(best, -float(res.fun))
    return max(0.0, best)


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    branch: int
    gamma_used: float


def kappa_from_constants(params: ChainingParams, branch: Optional[int] = None) -> KappaResult:
    """Linear expansion rate; branch 1 iff d/(d - Delta) < alpha + 1 unless forced"""
    d, a, delta = params.d, params.alpha, params.box_dim
    if branch is None:
        branch = 1 if delta < d and d / (d - delta) < a + 1 else 2
    if branch == 1:
        if delta >= d:
            raise DispersionError("first branch needs Delta < d")
        gamma = params.c1 * d ** (a + 1) / (d - delta)
    elif branch == 2:
        gamma = params.c1 * (delta / a) ** a * (1 + a) ** (1 + a)
    else:
        raise DispersionError(f"branch must be 1 or 2, got {branch}")
    return KappaResult(math.sqrt((params.c3 + gamma * delta) / params.c2), branch, gamma)


def chaining_params_from_bundle(bundle: ConstantBundle, d: int, delta_dim: Optional[float] = None) -> ChainingParams:
    return ChainingParams(c1=bundle.c1, alpha=bundle.alpha, d=d, delta_dim=delta_dim,
                          c2=bundle.c2, c3=bundle.c3)


def _mean_and_se(values: Sequence[float]) -> Tuple[float, float]:
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(values) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class TwoPointMoment:
    r: float
    horizon: float
    sup_moment: float
    sup_se: float
    terminal_moment: float
    terminal_se: float
    n_used: int
    n_excluded: int
    valid: bool


def two_point_moment(
    model: SdeModel,
    x,
    y,
    r: float,
    horizon: float,
    dt: float,
    replicas: int,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    subcommand: str = "two-point",
) -> TwoPointMoment:
    """E sup_{t<=T} |psi_t(x) - psi_t(y)|^r and the time-T moment, over replicas"""
    if r < 1:
        raise DispersionError(f"moment order must be >= 1, got {r}")
    if replicas < 2:
        raise DispersionError("need at least two replicas")
    seeds = [derive_seed(base_seed, subcommand, i) for i in range(replicas)]
    pair = torch.stack([as_states(x)[0], as_states(y)[0]])
    states, noise = replicate(pair, seeds, dt)
    tracker = PairDistance([(2 * i, 2 * i + 1) for i in range(replicas)])
    traj = integrate_flow(model, states, noise, TimeGrid.span(0.0, horizon, dt), taming, stride=0,
                          observers=[tracker])

    lost = traj.diverged.view(replicas, 2).any(dim=1)
    keep = (~lost).nonzero().flatten().tolist()
    sup_vals = [float(tracker.running_sup[i]) ** r for i in keep]
    end_vals = [float(tracker.current[i]) ** r for i in keep]
    n_excluded = replicas - len(keep)
    if n_excluded:
        logger.warning("two-point moment: %d of %d replicas diverged", n_excluded, replicas)
    sup_mean, sup_se = _mean_and_se(sup_vals)
    end_mean, end_se = _mean_and_se(end_vals)
    return TwoPointMoment(
        r=r, horizon=horizon,
        sup_moment=sup_mean, sup_se=sup_se,
        terminal_moment=end_mean, terminal_se=end_se,
        n_used=len(keep), n_excluded=n_excluded,
        valid=n_excluded <= EXCLUSION_LIMIT * replicas,
    )


@dataclass
class ExpansionFit:
    c_hat: float
    c1_hat: float
    c1_se: float
    alpha: float
    slopes: Dict[float, float]
    intercepts: Dict[float, float]
    residual_rms: float


def fit_c1_alpha(table: Sequence[Tuple[float, float, float]], alpha: float = 3.0,
                 separation: float = 1.0) -> ExpansionFit:
    """Fit moment^{1/r} = c |x - y| exp(c1 r^alpha T) from rows (r, T, moment)"""
    rows = [(float(r), float(t), float(m)) for r, t, m in table]
    if any(m <= 0 for _, _, m in rows):
        raise DispersionError("moment estimates must be positive")
    orders = sorted({r for r, _, _ in rows})
    horizons = {t for _, t, _ in rows}
    if len(orders) < 2 or len(horizons) < 3:
        raise DispersionError("table needs at least 2 moment orders and 3 horizons")

    slopes, intercepts, slope_se, residuals = {}, {}, {}, []
    for r in orders:
        ts = np.array([t for rr, t, _ in rows if rr == r])
        ys = np.array([math.log(m) / r - math.log(separation) for rr, _, m in rows if rr == r])
        design = np.stack([ts, np.ones_like(ts)], axis=1)
        coef, _, _, _ = np.linalg.lstsq(design, ys, rcond=None)
        resid = ys - design @ coef
        residuals.extend(resid.tolist())
        dof = max(len(ts) - 2, 1)
        spread = float(np.sum((ts - ts.mean()) ** 2))
        slopes[r], intercepts[r] = float(coef[0]), float(coef[1])
        slope_se[r] = math.sqrt(float(resid @ resid) / dof / spread) if spread > 0 else math.inf

    scaled = [slopes[r] / r ** alpha for r in orders]
    return ExpansionFit(
        c_hat=math.exp(float(np.median([intercepts[r] for r in orders]))),
        c1_hat=float(np.median(scaled)),
        c1_se=float(np.median([slope_se[r] / r ** alpha for r in orders])),
        alpha=alpha,
        slopes=slopes,
        intercepts=intercepts,
        residual_rms=math.sqrt(math.fsum(e * e for e in residuals) / len(residuals)),
    )


@dataclass(frozen=True)
class BallSet:
    center: Tuple[float, ...]
    radius: float
    resolution: int = 64

    def boundary_mesh(self) -> np.ndarray:
        d = len(self.center)
        if self.resolution < 1:
            raise DispersionError("boundary mesh resolution must be positive")
        return np.asarray(self.center) + self.radius * sphere_directions(d, self.resolution)


@dataclass
class DispersionReport:
    times: List[float]
    sup_norm: List[List[float]]  # per replica, per snapshot
    diameter: List[List[float]]
    kappa_hat: List[float]
    summary: Dict[str, float]
    mesh_points: int
    n_diverged: int
    horizon: float


def _summary(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=float)
    out = {"mean": math.fsum(arr.tolist()) / len(arr)}
    for q in SUMMARY_QUANTILES:
        out[f"q{int(round(q * 100)):02d}"] = float(np.quantile(arr, q))
    return out


class SetSpreadMonitor(StepObserver):
    """Sup norm and diameter of each replica's mesh image at strided grid points"""

    def __init__(self, replicas: int, mesh_points: int, d: int, stride: int):
        self.replicas, self.mesh_points, self.d, self.stride = replicas, mesh_points, d, stride
        self.times: List[float] = []
        self.sup_norm: List[torch.Tensor] = []
        self.diameter: List[torch.Tensor] = []
        self.n_steps = 0

    def start(self, grid, n_members):
        self.n_steps = grid.n_steps
        self.times, self.sup_norm, self.diameter = [], [], []

    def observe(self, step, time, x, alive):
        if not (step == 0 or step == self.n_steps or (self.stride and step % self.stride == 0)):
            return
        grouped = x.view(self.replicas, self.mesh_points, self.d)
        self.times.append(time)
        self.sup_norm.append(torch.linalg.vector_norm(grouped, dim=2).amax(dim=1))
        self.diameter.append(torch.cdist(grouped, grouped).amax(dim=(1, 2)))


def measure_dispersion(
    model: SdeModel,
    setspec: BallSet,
    horizon: float,
    dt: float,
    replicas: int,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    stride: int = 10,
    subcommand: str = "dispersion",
) -> DispersionReport:
    """Track the boundary mesh of a ball; kappa_hat = sup_t sup_x |psi_t(x)| / T"""
    mesh = setspec.boundary_mesh()
    m = mesh.shape[0]
    seeds = [derive_seed(base_seed, subcommand, i) for i in range(replicas)]
    states, noise = replicate(mesh, seeds, dt)
    spread = SetSpreadMonitor(replicas, m, model.dim, stride)
    traj = integrate_flow(model, states, noise, TimeGrid.span(0.0, horizon, dt), taming, stride=0,
                          observers=[spread])
    sup_norm = torch.stack(spread.sup_norm)
    diameter = torch.stack(spread.diameter)
    kappa = traj.running_sup_norm.view(replicas, m).amax(dim=1) / horizon

    return DispersionReport(
        times=spread.times,
        sup_norm=sup_norm.T.tolist(),
        diameter=diameter.T.tolist(),
        kappa_hat=kappa.tolist(),
        summary=_summary(kappa.tolist()),
        mesh_points=m,
        n_diverged=traj.n_diverged,
        horizon=horizon,
    )


class ExcursionTracker(StepObserver):
    """Running sup of |x_i - start| per member"""

    def __init__(self, start: torch.Tensor, n_members: int):
        self.origin = start
        self.running_sup = torch.zeros(n_members, dtype=DTYPE)

    def observe(self, step, time, x, alive):
        self.running_sup = torch.maximum(self.running_sup, torch.linalg.vector_norm(x - self.origin, dim=1))


@dataclass
class OnePointTail:
    probability: float
    se: float
    threshold: float
    bound: Optional[float]


def one_point_tail_bound(k: float, horizon: float, c2: float, c3: float) -> float:
    """Finite-horizon proxy exp(T (c3 - c2 k^2)) of the one-point tail condition"""
    return math.exp(horizon * (c3 - c2 * k ** 2))


def one_point_tail(
    model: SdeModel,
    x,
    k: float,
    horizon: float,
    dt: float,
    replicas: int,
    base_seed: int,
    taming: TamingSpec = TamingSpec(),
    c2: Optional[float] = None,
    c3: Optional[float] = None,
) -> OnePointTail:
    """Estimate P(sup_{t<=T} |psi_t(x) - x| >= k T) with independent replicas"""
    start = as_states(x)[0]
    seeds = [derive_seed(base_seed, "one-point", i) for i in range(replicas)]
    states, noise = replicate(start.unsqueeze(0), seeds, dt)
    grid = TimeGrid.span(0.0, horizon, dt)

    tracker = ExcursionTracker(start, replicas)
    integrate_flow(model, states, noise, grid, taming, stride=0, observers=[tracker])
    hits = (tracker.running_sup >= k * horizon).to(DTYPE)
    p = float(hits.mean())
    se = math.sqrt(p * (1 - p) / replicas)
    bound = one_point_tail_bound(k, horizon, c2, c3) if c2 is not None and c3 is not None else None
    return OnePointTail(p, se, k * horizon, bound)
