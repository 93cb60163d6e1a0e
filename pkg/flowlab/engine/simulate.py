"""
Simulate Component
Euler-Maruyama flows under shared noise, pullback runs and cocycle checks.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from flowlab.engine.errors import MisalignedGridError, SimulationError
from flowlab.engine.model import DTYPE, SdeModel, as_states

logger = logging.getLogger(__name__)

BLOCK_STEPS = 256
CHUNK_STEPS = 256
_MASK64 = (1 << 64) - 1


def derive_seed(base_seed: int, subcommand: str, replica: int) -> int:
    """64-bit seed from (base seed, subcommand, replica index)"""
    digest = hashlib.sha256(f"{base_seed}:{subcommand}:{replica}".encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


def configure_threads(threads: Optional[int]):
    if threads:
        torch.set_num_threads(int(threads))


def steps_of(t: float, dt: float) -> int:
    """Whole number of steps in t, or MisalignedGridError"""
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise MisalignedGridError(f"time {t} is not a whole number of steps of {dt}")
    return k


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise SimulationError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 0:
            raise SimulationError(f"n_steps must be nonnegative, got {self.n_steps}")

    @classmethod
    def from_steps(cls, start_step: int, dt: float, n_steps: int) -> "TimeGrid":
        return cls(start_step * dt, dt, n_steps)

    @classmethod
    def span(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        return cls(t_start, dt, steps_of(t_end - t_start, dt))

    @property
    def start_step(self) -> int:
        return steps_of(self.t_start, self.dt)

    @property
    def t_end(self) -> float:
        return self.time_at(self.n_steps)

    def time_at(self, k: int) -> float:
        return self.t_start + k * self.dt


def _generate_block(seed: int, dim: int, block: int) -> np.ndarray:
    counter = np.array([0, block & _MASK64, 0, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=seed & _MASK64, counter=counter)
    return np.random.Generator(bitgen).standard_normal((BLOCK_STEPS, dim))


@functools.lru_cache(maxsize=512)
def _cached_block(seed: int, dim: int, block: int) -> np.ndarray:
    z = _generate_block(seed, dim, block)
    z.setflags(write=False)
    return z


def _standard_normals(seed: int, dim: int, indices: np.ndarray, cached: bool = True) -> np.ndarray:
    fetch = _cached_block if cached else _generate_block
    blocks = indices // BLOCK_STEPS
    out = np.empty((indices.shape[0], dim))
    for block in np.unique(blocks):
        mask = blocks == block
        out[mask] = fetch(seed, dim, int(block))[indices[mask] - block * BLOCK_STEPS]
    return out


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments keyed by (seed, step index); immutable and shareable"""

    seed: int
    dim: int
    dt: float
    offset: int = 0
    factor: int = 1
    grid: Optional[TimeGrid] = None

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise SimulationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.factor < 1:
            raise SimulationError("coarsening factor must be >= 1")

    @property
    def step_dt(self) -> float:
        return self.dt * self.factor

    def _numpy_increments(self, start: int, n: int, cached: bool = True) -> np.ndarray:
        steps = np.arange(start, start + n, dtype=np.int64) + self.offset
        base = (steps[:, None] * self.factor + np.arange(self.factor)[None, :]).ravel()
        fine = math.sqrt(self.dt) * _standard_normals(self.seed, self.dim, base, cached)
        if self.factor == 1:
            return fine
        return fine.reshape(n, self.factor, self.dim).sum(axis=1)

    def increments(self, start: int, n: int) -> torch.Tensor:
        """Increments of steps start .. start+n-1, shape (n, d)"""
        if self.grid is not None:
            first = self.grid.start_step
            if start < first or start + n > first + self.grid.n_steps:
                raise SimulationError("requested steps fall outside the sub-path grid")
        return torch.from_numpy(self._numpy_increments(start, n))

    def increment(self, step: int) -> torch.Tensor:
        return self.increments(step, 1)[0]

    def shift(self, steps: int) -> "NoisePath":
        """theta_s: increment j of the result is increment j + steps of self"""
        return replace(self, offset=self.offset + steps, grid=None)

    def sub_path(self, grid: TimeGrid) -> "NoisePath":
        if abs(grid.dt - self.step_dt) > 1e-15 * self.step_dt:
            raise MisalignedGridError(f"sub-path dt {grid.dt} differs from path dt {self.step_dt}")
        steps_of(grid.t_start, grid.dt)
        return replace(self, grid=grid)

    def coarsen(self, factor: int) -> "NoisePath":
        """Path with step factor*dt whose increments sum the fine ones"""
        if self.offset % factor:
            raise MisalignedGridError("offset is not divisible by the coarsening factor")
        return replace(self, offset=self.offset // factor, factor=self.factor * factor, grid=None)


@dataclass(frozen=True)
class NoiseBundle:
    """Independent paths, one per replica; members of a replica group share a path"""

    seeds: Tuple[int, ...]
    dim: int
    dt: float
    group_size: int = 1
    offset: int = 0

    @property
    def step_dt(self) -> float:
        return self.dt

    @property
    def n_members(self) -> int:
        return len(self.seeds) * self.group_size

    def path(self, replica: int) -> NoisePath:
        return NoisePath(self.seeds[replica], self.dim, self.dt, self.offset)

    def increments(self, start: int, n: int) -> torch.Tensor:
        """Increments of steps start .. start+n-1, shape (n, members, d)"""
        per_seed = np.stack(
            [self.path(i)._numpy_increments(start, n, cached=False) for i in range(len(self.seeds))],
            axis=1,
        )
        if self.group_size > 1:
            per_seed = np.repeat(per_seed, self.group_size, axis=1)
        return torch.from_numpy(per_seed)

    def shift(self, steps: int) -> "NoiseBundle":
        return replace(self, offset=self.offset + steps)


Noise = Union[NoisePath, NoiseBundle]


def replicate(initials, seeds: Sequence[int], dt: float) -> Tuple[torch.Tensor, NoiseBundle]:
    """Stack one copy of the initial set per seed; copies share noise within a replica"""
    points = as_states(initials)
    m, d = points.shape
    states = points.repeat(len(seeds), 1)
    return states, NoiseBundle(tuple(int(s) for s in seeds), d, dt, group_size=m)


@dataclass(frozen=True)
class TamingSpec:
    scheme: str = "clip"  # clip | rational | none
    cap: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in ("clip", "rational", "none"):
            raise SimulationError(f"unknown taming scheme {self.scheme!r}")

    def cap_for(self, dt: float) -> float:
        return self.cap if self.cap is not None else dt ** -0.5


def tamed_drift(model: SdeModel, x: torch.Tensor, dt: float, taming: TamingSpec) -> torch.Tensor:
    b = model.drift(x)
    cap = taming.cap_for(dt)
    if not model.singular.is_empty():
        on_singularity = model.singular.hits(x)
        if on_singularity.any():
            logger.warning("state exactly on a singular point; using the cap along e1")
            reference = torch.zeros(model.dim, dtype=DTYPE)
            reference[0] = cap
            b = torch.where(on_singularity[:, None], reference, b)
    if taming.scheme == "none":
        return b
    norm = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if taming.scheme == "rational":
        return b / (1.0 + dt * norm)
    return torch.where(norm > cap, b * (cap / norm), b)


class StepObserver:
    """Hook called at every grid point of a run (k = 0 .. n_steps)"""

    def start(self, grid: TimeGrid, n_members: int):
        pass

    def observe(self, step: int, time: float, x: torch.Tensor, alive: torch.Tensor):
        raise NotImplementedError


class OccupationIntegral(StepObserver):
    """Left-endpoint integrals of f along each member, one accumulator per window"""

    def __init__(self, f, windows: Sequence[Tuple[int, int]]):
        self.f = f
        self.windows = [tuple(w) for w in windows]
        self.totals: List[torch.Tensor] = []
        self.dt = 0.0

    def start(self, grid, n_members):
        self.dt = grid.dt
        self.totals = [torch.zeros(n_members, dtype=DTYPE) for _ in self.windows]

    def observe(self, step, time, x, alive):
        active = [i for i, (s, t) in enumerate(self.windows) if s <= step < t]
        if not active:
            return
        values = self.f(x)
        if (values < 0).any():
            raise SimulationError("occupation functional took a negative value")
        contribution = values * self.dt
        for i in active:
            self.totals[i] = self.totals[i] + contribution


class PairDistance(StepObserver):
    """Running sup and current value of |x_i - x_j| for fixed member pairs"""

    def __init__(self, pairs: Sequence[Tuple[int, int]]):
        self.left = torch.tensor([i for i, _ in pairs], dtype=torch.long)
        self.right = torch.tensor([j for _, j in pairs], dtype=torch.long)
        self.running_sup = torch.zeros(len(pairs), dtype=DTYPE)
        self.current = torch.zeros(len(pairs), dtype=DTYPE)

    def start(self, grid, n_members):
        self.running_sup = torch.zeros(len(self.left), dtype=DTYPE)

    def observe(self, step, time, x, alive):
        self.current = torch.linalg.vector_norm(x[self.left] - x[self.right], dim=1)
        self.running_sup = torch.maximum(self.running_sup, self.current)


@dataclass
class Trajectory:
    grid: TimeGrid
    snapshot_steps: List[int]
    snapshots: torch.Tensor  # (n_snapshots, n_members, d)
    final: torch.Tensor
    diverged: torch.Tensor
    first_bad_step: torch.Tensor
    running_sup_norm: torch.Tensor
    running_inf_norm: torch.Tensor
    stride: int
    labels: List[str] = field(default_factory=list)

    @property
    def times(self) -> List[float]:
        return [self.grid.time_at(k) for k in self.snapshot_steps]

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())


def integrate_flow(
    model: SdeModel,
    initials,
    noise: Noise,
    grid: TimeGrid,
    taming: TamingSpec = TamingSpec(),
    stride: int = 1,
    observers: Sequence[StepObserver] = (),
    labels: Optional[Sequence[str]] = None,
) -> Trajectory:
    """Euler-Maruyama with tamed drift; every member consumes the same increments"""
    x = as_states(initials).clone()
    n, d = x.shape
    if n == 0:
        raise SimulationError("initial set is empty")
    if d != model.dim or noise.dim != model.dim:
        raise SimulationError(f"dimension mismatch: model {model.dim}, initials {d}, noise {noise.dim}")
    if isinstance(noise, NoiseBundle) and noise.n_members != n:
        raise SimulationError(f"noise bundle drives {noise.n_members} members, got {n}")
    if abs(noise.step_dt - grid.dt) > 1e-15 * grid.dt:
        raise MisalignedGridError(f"noise dt {noise.step_dt} differs from grid dt {grid.dt}")

    dt = grid.dt
    first = grid.start_step
    alive = torch.ones(n, dtype=torch.bool)
    first_bad = torch.full((n,), -1, dtype=torch.long)
    norms = torch.linalg.vector_norm(x, dim=1)
    running_sup, running_inf = norms.clone(), norms.clone()
    snapshots, snapshot_steps = [x.clone()], [0]

    for observer in observers:
        observer.start(grid, n)
        observer.observe(0, grid.t_start, x, alive)

    k = 0
    while k < grid.n_steps:
        chunk = min(CHUNK_STEPS, grid.n_steps - k)
        dw = noise.increments(first + k, chunk)
        for c in range(chunk):
            inc = dw[c]
            sigma = model.sigma(x)
            if inc.ndim == 1:
                shock = torch.einsum("nij,j->ni", sigma, inc)
            else:
                shock = torch.einsum("nij,nj->ni", sigma, inc)
            x_next = x + tamed_drift(model, x, dt, taming) * dt + shock

            step = k + c + 1
            bad = alive & ~torch.isfinite(x_next).all(dim=1)
            if bad.any():
                first_bad[bad] = step
                alive &= ~bad
                logger.debug("%d members diverged at step %d", int(bad.sum()), step)
            x = torch.where(alive[:, None], x_next, x)

            norms = torch.linalg.vector_norm(x, dim=1)
            running_sup = torch.where(alive, torch.maximum(running_sup, norms), running_sup)
            running_inf = torch.where(alive, torch.minimum(running_inf, norms), running_inf)
            for observer in observers:
                observer.observe(step, grid.time_at(step), x, alive)
            if (stride and step % stride == 0) or step == grid.n_steps:
                snapshots.append(x.clone())
                snapshot_steps.append(step)
        k += chunk

    return Trajectory(
        grid=grid,
        snapshot_steps=snapshot_steps,
        snapshots=torch.stack(snapshots),
        final=x,
        diverged=~alive,
        first_bad_step=first_bad,
        running_sup_norm=running_sup,
        running_inf_norm=running_inf,
        stride=stride,
        labels=list(labels) if labels is not None else [str(i) for i in range(n)],
    )


def pullback_state(
    model: SdeModel,
    x,
    t: float,
    noise: Noise,
    dt: float,
    taming: TamingSpec = TamingSpec(),
    observers: Sequence[StepObserver] = (),
) -> Trajectory:
    """Run from time -t to 0 on the noise anchored at 0; result at time 0 is .final"""
    n = steps_of(t, dt)
    return integrate_flow(model, x, noise, TimeGrid.from_steps(-n, dt, n), taming, stride=0, observers=observers)


@dataclass
class CocycleReport:
    equal: bool
    max_deviation: float


def verify_cocycle(
    model: SdeModel, x, s: float, t: float, noise: NoisePath, dt: float, taming: TamingSpec = TamingSpec()
) -> CocycleReport:
    """Compare a direct [0, s+t] run with [0, s] followed by [s, s+t]"""
    ns, nt = steps_of(s, dt), steps_of(t, dt)
    direct = integrate_flow(model, x, noise, TimeGrid.from_steps(0, dt, ns + nt), taming, stride=0).final
    first = integrate_flow(model, x, noise.sub_path(TimeGrid.from_steps(0, dt, ns)),
                           TimeGrid.from_steps(0, dt, ns), taming, stride=0).final
    second = integrate_flow(model, first, noise.sub_path(TimeGrid.from_steps(ns, dt, nt)),
                            TimeGrid.from_steps(ns, dt, nt), taming, stride=0).final
    deviation = float((direct - second).abs().max()) if direct.numel() else 0.0
    return CocycleReport(equal=bool(torch.equal(direct, second)), max_deviation=deviation)


@dataclass
class ConvergenceReport:
    dts: List[float]
    cauchy_differences: List[float]
    ratios: List[float]


def strong_convergence_check(
    model: SdeModel,
    initials,
    seed: int,
    horizon: float,
    dt: float,
    levels: int = 3,
    taming: TamingSpec = TamingSpec(),
) -> ConvergenceReport:
    """Step-halving Cauchy differences on coupled Brownian paths"""
    if levels < 2:
        raise SimulationError("need at least two levels for a Cauchy difference")
    finest = dt / 2 ** (levels - 1)
    base = NoisePath(seed, model.dim, finest)
    finals, dts = [], []
    for j in reversed(range(levels)):
        path = base.coarsen(2 ** j) if j else base
        grid = TimeGrid.span(0.0, horizon, path.step_dt)
        finals.append(integrate_flow(model, initials, path, grid, taming, stride=0).final)
        dts.append(path.step_dt)
    diffs = [float(torch.linalg.vector_norm(a - b, dim=1).max()) for a, b in zip(finals, finals[1:])]
    ratios = [a / b if b > 0 else math.inf for a, b in zip(diffs, diffs[1:])]
    return ConvergenceReport(dts=dts, cauchy_differences=diffs, ratios=ratios)
