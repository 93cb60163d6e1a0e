"""
Model Component
SDE coefficient fields, localized L_p norms and assumption probes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from flowlab.engine.errors import ModelError, NormEstimationError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PROBE_TOLERANCE = 1e-9
SINGULAR_EXCLUSION = 1e-6
DIRECTION_SEED = 20240917

FieldOracle = Callable[[torch.Tensor], torch.Tensor]


def as_states(points) -> torch.Tensor:
    """Coerce a point cloud to a (n, d) float64 tensor"""
    states = torch.as_tensor(points, dtype=DTYPE)
    if states.ndim == 1:
        states = states.unsqueeze(0)
    return states


@dataclass(frozen=True)
class SingularSet:
    """Declared singularities: isolated points and axis hyperplanes {x_i = c}"""

    points: Tuple[Tuple[float, ...], ...] = ()
    hyperplanes: Tuple[Tuple[int, float], ...] = ()

    def is_empty(self) -> bool:
        return not self.points and not self.hyperplanes

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Distance from each row of x to the singular set (inf when empty)"""
        dist = np.full(x.shape[0], np.inf)
        for point in self.points:
            dist = np.minimum(dist, np.linalg.norm(x - np.asarray(point), axis=1))
        for axis, value in self.hyperplanes:
            dist = np.minimum(dist, np.abs(x[:, axis] - value))
        return dist

    def hits(self, x: torch.Tensor) -> torch.Tensor:
        """Boolean mask of states lying exactly on the singular set"""
        mask = torch.zeros(x.shape[0], dtype=torch.bool)
        for point in self.points:
            target = torch.as_tensor(point, dtype=DTYPE)
            mask |= (x == target).all(dim=1)
        for axis, value in self.hyperplanes:
            mask |= x[:, axis] == value
        return mask

    def merged(self, other: "SingularSet") -> "SingularSet":
        return SingularSet(self.points + other.points, self.hyperplanes + other.hyperplanes)


@dataclass(frozen=True)
class SdeModel:
    """Coefficients b = b1 + b2 and sigma with their analytic metadata"""

    dim: int
    drift_b1: FieldOracle
    drift_b2: FieldOracle
    diffusion: FieldOracle
    k1: float
    k2: float
    p: float = math.inf
    rho: float = math.inf
    norm_b: Optional[float] = None
    norm_b1: Optional[float] = None
    norm_b2: Optional[float] = None
    norm_grad_sigma: Optional[float] = None
    sigma_sup: Optional[float] = None
    singular: SingularSet = field(default_factory=SingularSet)
    name: str = "model"
    degenerate: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ModelError(f"dimension must be positive, got {self.dim}")
        if self.k2 < self.k1:
            raise ModelError(f"K2={self.k2} is smaller than K1={self.k1}")
        if self.degenerate:
            if self.k1 < 0:
                raise ModelError("K1 must be nonnegative")
            return
        if self.k1 <= 0:
            raise ModelError("K1 must be positive for a non-degenerate model")
        if self.p <= 2 * self.dim or self.rho <= 2 * self.dim:
            raise ModelError(
                f"need p > 2d and rho > 2d, got p={self.p}, rho={self.rho}, d={self.dim}"
            )

    def drift(self, x: torch.Tensor) -> torch.Tensor:
        return self.drift_b1(x) + self.drift_b2(x)

    def sigma(self, x: torch.Tensor) -> torch.Tensor:
        return self.diffusion(x)

    def a(self, x: torch.Tensor) -> torch.Tensor:
        """Diffusion matrix a = sigma sigma^T, shape (n, d, d)"""
        s = self.diffusion(x)
        return s @ s.transpose(1, 2)

    def with_norms(self, **norms) -> "SdeModel":
        return replace(self, **norms)


@dataclass(frozen=True)
class LocalizationKernel:
    """Smooth cut-off equal to 1 on |x| <= delta/2 and 0 beyond delta"""

    delta: float = 1.0

    @staticmethod
    def profile(s: np.ndarray) -> np.ndarray:
        # exp(-1/u) smoothstep between s = 1/2 and s = 1
        t = np.clip((np.asarray(s, dtype=float) - 0.5) / 0.5, 0.0, 1.0)

        def g(u):
            safe = np.where(u > 0, u, 1.0)
            return np.where(u > 0, np.exp(-1.0 / safe), 0.0)

        up, down = g(1.0 - t), g(t)
        return up / (up + down)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.profile(np.linalg.norm(np.atleast_2d(x), axis=1) / self.delta)


@dataclass(frozen=True)
class LpWindow:
    """Center lattice and quadrature resolution for localized norms"""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    spacing: float = 1.0
    resolution: int = 32
    refine_levels: int = 3

    def centers(self) -> np.ndarray:
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            if hi < lo:
                return np.zeros((0, len(self.lower)))
            count = int(math.floor((hi - lo) / self.spacing + 1e-9)) + 1
            axes.append(lo + self.spacing * np.arange(count))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def _evaluate_magnitude(f: FieldOracle, points: np.ndarray) -> np.ndarray:
    values = f(torch.from_numpy(points)).detach().cpu().numpy()
    if values.ndim == 1:
        magnitude = np.abs(values)
    elif values.ndim == 2:
        magnitude = np.linalg.norm(values, axis=1)
    else:
        magnitude = np.linalg.norm(values, ord=2, axis=(1, 2))
    bad = ~np.isfinite(magnitude)
    if bad.any():
        where = tuple(float(c) for c in points[np.argmax(bad)])
        raise NormEstimationError(f"non-finite field value at {where}")
    return magnitude


def _quadrature_cells(
    center: np.ndarray,
    kernel: LocalizationKernel,
    window: LpWindow,
    singular: SingularSet,
) -> Tuple[np.ndarray, np.ndarray]:
    d = center.shape[0]
    h = 1.0 / window.resolution
    count = int(round(2 * kernel.delta / h))
    axis = -kernel.delta + h * (np.arange(count) + 0.5)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    points = center + np.stack([m.ravel() for m in mesh], axis=1)
    sizes = np.full(points.shape[0], h)

    if not singular.is_empty():
        corners = np.array(np.meshgrid(*([[-0.25, 0.25]] * d), indexing="ij")).reshape(d, -1).T
        for _ in range(window.refine_levels):
            near = singular.distance(points) < sizes * math.sqrt(d)
            if not near.any():
                break
            children = points[near][:, None, :] + corners[None, :, :] * sizes[near][:, None, None]
            child_sizes = np.repeat(sizes[near] / 2, corners.shape[0])
            points = np.concatenate([points[~near], children.reshape(-1, d)])
            sizes = np.concatenate([sizes[~near], child_sizes])
        keep = singular.distance(points) >= SINGULAR_EXCLUSION
        points, sizes = points[keep], sizes[keep]
    return points, sizes ** d


def localized_lp_norm(
    f: FieldOracle,
    p: float,
    window: LpWindow,
    kernel: LocalizationKernel = LocalizationKernel(),
    singular: SingularSet = SingularSet(),
    threads: int = 1,
) -> float:
    """sup over lattice centers z of the quadrature value of ||xi(. - z) f||_p"""
    if p < 1:
        raise NormEstimationError(f"exponent must be >= 1, got {p}")
    centers = window.centers()
    if centers.shape[0] == 0:
        raise NormEstimationError("center lattice is empty")

    def per_center(z: np.ndarray) -> float:
        points, weights = _quadrature_cells(z, kernel, window, singular)
        local = kernel(points - z) * _evaluate_magnitude(f, points)
        if math.isinf(p):
            return float(local.max(initial=0.0))
        return math.fsum((local ** p * weights).tolist()) ** (1.0 / p)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        values = list(pool.map(per_center, centers))
    return max(values)


def sphere_directions(d: int, count: int) -> np.ndarray:
    """Deterministic unit directions: endpoints, uniform angles, Fibonacci sphere"""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        angles = 2 * math.pi * np.arange(count) / count
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if d == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        radius = np.sqrt(1 - z ** 2)
        phi = math.pi * (3 - math.sqrt(5)) * k
        return np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    raw = np.random.default_rng(DIRECTION_SEED).standard_normal((count, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass
class EllipticityViolation:
    point: Tuple[float, ...]
    direction: Tuple[float, ...]
    quotient: float
    reason: str


@dataclass
class EllipticityReport:
    k1_hat: float
    k2_hat: float
    violations: List[EllipticityViolation]
    n_probes: int


def probe_ellipticity(
    model: SdeModel, sample, n_directions: int = 8, tolerance: float = PROBE_TOLERANCE
) -> EllipticityReport:
    """Rayleigh quotients <a(x)z, z>/|z|^2 over coordinate and seeded directions"""
    points = as_states(sample)
    if points.shape[0] == 0:
        raise ModelError("ellipticity probe needs a nonempty sample")
    d = model.dim
    extra = np.random.default_rng(DIRECTION_SEED).standard_normal((n_directions, d))
    directions = torch.as_tensor(np.concatenate([np.eye(d), extra]), dtype=DTYPE)
    directions = directions / torch.linalg.vector_norm(directions, dim=1, keepdim=True)

    a = model.a(points)
    quotients = torch.einsum("ki,nij,kj->nk", directions, a, directions)
    smallest = torch.linalg.eigvalsh(a)[:, 0]

    violations = []
    for i in range(points.shape[0]):
        point = tuple(points[i].tolist())
        if smallest[i] <= 0:
            violations.append(EllipticityViolation(point, (), float(smallest[i]), "singular"))
        for k in range(directions.shape[0]):
            q = float(quotients[i, k])
            if q < model.k1 - tolerance or q > model.k2 + tolerance:
                violations.append(
                    EllipticityViolation(point, tuple(directions[k].tolist()), q, "outside [K1, K2]")
                )
    return EllipticityReport(
        k1_hat=float(quotients.min()),
        k2_hat=float(quotients.max()),
        violations=violations,
        n_probes=int(quotients.numel()),
    )


@dataclass
class HolderReport:
    omega_hat: float
    exponent: float
    n_used: int
    n_skipped: int


def holder_modulus_a(model: SdeModel, x, y) -> HolderReport:
    """Lower estimate of the (1 - d/rho)-Holder modulus of a over sampled pairs"""
    if model.rho <= model.dim:
        raise ModelError("Holder exponent 1 - d/rho needs rho > d")
    exponent = 1.0 - model.dim / model.rho
    xs, ys = as_states(x), as_states(y)
    dist = torch.linalg.vector_norm(xs - ys, dim=1)
    usable = (dist <= 1.0) & (dist > 0)
    # coincident pairs carry no information and are not counted as skipped
    skipped = int((dist > 1.0).sum())
    if not usable.any():
        return HolderReport(0.0, exponent, 0, skipped)
    gap = torch.linalg.matrix_norm(model.a(xs[usable]) - model.a(ys[usable]), ord=2)
    ratios = gap / dist[usable] ** exponent
    return HolderReport(float(ratios.max()), exponent, int(usable.sum()), skipped)


@dataclass
class ShellEstimate:
    value: float
    r: float
    shell_cap: float
    n_samples: int


def shell_samples(d: int, r: float, shell_cap: float, n_radii: int, n_directions: int) -> np.ndarray:
    """Radius-by-direction stratified points of {r <= |x| <= shell_cap}"""
    radii = np.linspace(r, shell_cap, n_radii)
    dirs = sphere_directions(d, n_directions)
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)


def _radial_component(model: SdeModel, r: float, shell_cap: float, n_radii: int, n_directions: int):
    if r < 1:
        raise ModelError(f"shell radius must be >= 1, got {r}")
    if shell_cap <= r:
        raise ModelError(f"shell_cap {shell_cap} must exceed r {r}")
    points = torch.from_numpy(shell_samples(model.dim, r, shell_cap, n_radii, n_directions))
    radial = (points * model.drift_b2(points)).sum(dim=1) / torch.linalg.vector_norm(points, dim=1)
    if not torch.isfinite(radial).all():
        raise ModelError("b2 is not finite on the sampled shell")
    return radial


def beta_star(
    model: SdeModel, r: float, shell_cap: float, n_radii: int = 64, n_directions: int = 64
) -> ShellEstimate:
    """Sampled sup of x.b2(x)/|x| on the shell plus (d-1)K2/(2r)"""
    radial = _radial_component(model, r, shell_cap, n_radii, n_directions)
    value = float(radial.max()) + (model.dim - 1) * model.k2 / (2 * r)
    return ShellEstimate(value, r, shell_cap, int(radial.numel()))


def beta_lower(
    model: SdeModel, r: float, shell_cap: float, n_radii: int = 64, n_directions: int = 64
) -> ShellEstimate:
    """Sampled inf of x.b2(x)/|x| on the shell"""
    radial = _radial_component(model, r, shell_cap, n_radii, n_directions)
    return ShellEstimate(float(radial.min()), r, shell_cap, int(radial.numel()))


@dataclass
class AssumptionReport:
    ok: bool
    issues: List[str]


def check_assumptions(model: SdeModel) -> AssumptionReport:
    issues = []
    d = model.dim
    if not model.k1 > 0:
        issues.append("K1 must be positive")
    if model.k2 < model.k1:
        issues.append("K2 must be >= K1")
    if not model.p > 2 * d:
        issues.append(f"p={model.p} must exceed 2d={2 * d}")
    if not model.rho > 2 * d:
        issues.append(f"rho={model.rho} must exceed 2d={2 * d}")
    return AssumptionReport(ok=not issues, issues=issues)


@dataclass
class RadialConditionReport:
    holds: bool
    orientation: str
    beta: float
    estimate: ShellEstimate


def probe_radial_condition(
    model: SdeModel, beta: float, orientation: str, r: float, shell_cap: float, n_samples: int = 64
) -> RadialConditionReport:
    """Probe limsup x.b2/|x| <= beta ('upper') or liminf >= beta ('lower') on a far shell"""
    radial = _radial_component(model, r, shell_cap, n_samples, n_samples)
    if orientation == "upper":
        value, holds = float(radial.max()), float(radial.max()) <= beta
    elif orientation == "lower":
        value, holds = float(radial.min()), float(radial.min()) >= beta
    else:
        raise ModelError(f"orientation must be 'upper' or 'lower', got {orientation!r}")
    return RadialConditionReport(holds, orientation, beta, ShellEstimate(value, r, shell_cap, int(radial.numel())))


# ---------------------------------------------------------------------------
# Built-in field constructors used by scenario files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BuiltField:
    oracle: FieldOracle
    singular: SingularSet = SingularSet()


def _zero_drift(dim: int) -> BuiltField:
    return BuiltField(lambda x: torch.zeros_like(x))


def _linear(dim: int, coefficient=1.0) -> BuiltField:
    if isinstance(coefficient, (int, float)):
        c = float(coefficient)
        return BuiltField(lambda x: c * x)
    matrix = torch.as_tensor(coefficient, dtype=DTYPE)
    if matrix.shape != (dim, dim):
        raise ModelError(f"linear drift matrix must be {dim}x{dim}")
    return BuiltField(lambda x: x @ matrix.T)


def _radial_unit(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    return torch.where(norm > 0, x / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.zeros_like(x))


def _constant_radial(dim: int, speed: float) -> BuiltField:
    origin = tuple([0.0] * dim)
    return BuiltField(lambda x: speed * _radial_unit(x), SingularSet(points=(origin,)))


def _saturating_radial(dim: int, speed: float) -> BuiltField:
    def oracle(x):
        norm = torch.linalg.vector_norm(x, dim=1, keepdim=True)
        return speed * x / torch.clamp(norm, min=1.0)

    return BuiltField(oracle)


def _power_singular(dim: int, q: float, source: int = 1, target: int = 0) -> BuiltField:
    if not (0 <= source < dim and 0 <= target < dim):
        raise ModelError("power_singular coordinates out of range")

    def oracle(x):
        y = x[:, source].abs()
        value = torch.where(y > 0, torch.where(y > 0, y, torch.ones_like(y)) ** (-q), torch.zeros_like(y))
        out = torch.zeros_like(x)
        out[:, target] = value
        return out

    return BuiltField(oracle, SingularSet(hyperplanes=((source, 0.0),)))


def _clamp_linear(dim: int, coefficient: float = -1.0, lower: float = -1.0, upper: float = 1.0,
                  coordinates: Optional[Sequence[int]] = None) -> BuiltField:
    axes = list(range(dim)) if coordinates is None else list(coordinates)

    def oracle(x):
        out = torch.zeros_like(x)
        out[:, axes] = torch.clamp(coefficient * x[:, axes], lower, upper)
        return out

    return BuiltField(oracle)


def _polynomial(dim: int, coefficients: Sequence[float]) -> BuiltField:
    coeffs = [float(c) for c in coefficients]

    def oracle(x):
        out = torch.zeros_like(x)
        for power, c in enumerate(coeffs):
            out = out + c * x ** power
        return out

    return BuiltField(oracle)


def _bump(dim: int, height: float = 1.0, width: float = 1.0, direction: int = 0) -> BuiltField:
    kernel = LocalizationKernel(delta=width)

    def oracle(x):
        weights = torch.from_numpy(kernel(x.detach().cpu().numpy()))
        out = torch.zeros_like(x)
        out[:, direction] = height * weights
        return out

    return BuiltField(oracle)


def _scalar_diffusion(dim: int, epsilon: float = 1.0) -> BuiltField:
    eye = torch.eye(dim, dtype=DTYPE)
    return BuiltField(lambda x: (epsilon * eye).expand(x.shape[0], dim, dim).clone())


def _matrix_diffusion(dim: int, values) -> BuiltField:
    matrix = torch.as_tensor(values, dtype=DTYPE)
    if matrix.shape != (dim, dim):
        raise ModelError(f"diffusion matrix must be {dim}x{dim}")
    return BuiltField(lambda x: matrix.expand(x.shape[0], dim, dim).clone())


def _radial_clamp_diffusion(dim: int, base: float = 1.0, slope: float = 0.5) -> BuiltField:
    eye = torch.eye(dim, dtype=DTYPE)

    def oracle(x):
        scale = base + slope * torch.clamp(torch.linalg.vector_norm(x, dim=1), max=1.0)
        return scale[:, None, None] * eye

    return BuiltField(oracle)


def _zero_diffusion(dim: int) -> BuiltField:
    return BuiltField(lambda x: torch.zeros(x.shape[0], dim, dim, dtype=DTYPE))


DRIFT_CONSTRUCTORS: Dict[str, Callable[..., BuiltField]] = {
    "zero": _zero_drift,
    "linear": _linear,
    "constant_radial": _constant_radial,
    "saturating_radial": _saturating_radial,
    "power_singular": _power_singular,
    "clamp_linear": _clamp_linear,
    "polynomial": _polynomial,
    "bump": _bump,
}

DIFFUSION_CONSTRUCTORS: Dict[str, Callable[..., BuiltField]] = {
    "scalar": _scalar_diffusion,
    "matrix": _matrix_diffusion,
    "radial_clamp": _radial_clamp_diffusion,
    "zero": _zero_diffusion,
}


def build_field(kind: str, dim: int, params: Dict, diffusion: bool = False) -> BuiltField:
    registry = DIFFUSION_CONSTRUCTORS if diffusion else DRIFT_CONSTRUCTORS
    if kind not in registry:
        raise ModelError(f"unknown {'diffusion' if diffusion else 'drift'} constructor {kind!r}")
    try:
        return registry[kind](dim, **params)
    except TypeError as e:
        raise ModelError(f"bad parameters for {kind!r}: {e}") from e


def _constant_scalar(dim: int, value: float = 1.0) -> FieldOracle:
    return lambda x: torch.full((x.shape[0],), float(value), dtype=DTYPE)


def _smoothed_indicator(dim: int, radius: float = 1.0, center: Optional[Sequence[float]] = None,
                        height: float = 1.0) -> FieldOracle:
    kernel = LocalizationKernel(delta=radius)
    origin = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    if origin.shape != (dim,):
        raise ModelError(f"indicator center must have {dim} coordinates")

    def oracle(x):
        return height * torch.from_numpy(kernel(x.detach().cpu().numpy() - origin))

    return oracle


SCALAR_CONSTRUCTORS: Dict[str, Callable[..., FieldOracle]] = {
    "constant": _constant_scalar,
    "smoothed_indicator": _smoothed_indicator,
}


def build_scalar(kind: str, dim: int, params: Dict) -> FieldOracle:
    """Scalar test functions f for occupation functionals and PDE right-hand sides"""
    if kind not in SCALAR_CONSTRUCTORS:
        raise ModelError(f"unknown scalar constructor {kind!r}")
    try:
        return SCALAR_CONSTRUCTORS[kind](dim, **params)
    except TypeError as e:
        raise ModelError(f"bad parameters for {kind!r}: {e}") from e
