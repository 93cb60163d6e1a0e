"""
Elliptic Component
Finite-difference resolvent solver, lambda-scaling checks and the
numerical Zvonkin transform.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded
from scipy.sparse.linalg import LinearOperator, gmres, spilu

from flowlab.engine.constants import TransformedNorms, gamma_tilde_transformed
from flowlab.engine.errors import CertificateError, SolverError
from flowlab.engine.model import FieldOracle, LocalizationKernel, SdeModel

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
ITERATION_BUDGET = 10_000
GMRES_RESTART = 50
PSI_TOLERANCE = 1e-10
PSI_MAX_ITER = 500
ELLIPTICITY_TOLERANCE = 1e-6
BELOW_THRESHOLD = "below advisory threshold"


@dataclass(frozen=True)
class EllipticProblem:
    """lam u - a_coeff a_ij d_ij u + b_coeff b . grad u = f with zero Dirichlet data"""

    lam: float
    a: FieldOracle
    b: FieldOracle
    f: FieldOracle
    domain_radius: float = 8.0
    h: float = 0.05
    dims: int = 1
    a_coeff: float = 1.0
    b_coeff: float = 1.0
    advisory_lambda: Optional[float] = None

    def __post_init__(self):
        if not self.lam > 0:
            raise SolverError(f"lambda must be positive, got {self.lam}")
        if self.dims not in (1, 2):
            raise SolverError(f"only 1-D and 2-D grids are supported, got dims={self.dims}")
        if not self.h > 0:
            raise SolverError("grid spacing must be positive")
        ratio = 2 * self.domain_radius / self.h
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise SolverError("2 * domain_radius / h must be an integer")

    @property
    def n_cells(self) -> int:
        return int(round(2 * self.domain_radius / self.h))


@dataclass
class GridFunction:
    values: np.ndarray  # shape (N+1,)*dims, plus trailing component axes
    h: float
    origin: float
    dims: int
    boundary: str = "dirichlet0"
    tags: Tuple[str, ...] = ()
    residual: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    def axes(self) -> Tuple[np.ndarray, ...]:
        axis = self.origin + self.h * np.arange(self.n_nodes)
        return tuple([axis] * self.dims)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(self.n_nodes ** self.dims, -1)

    def interpolator(self) -> RegularGridInterpolator:
        return RegularGridInterpolator(self.axes(), self.values, bounds_error=False, fill_value=0.0)

    def gradient(self) -> np.ndarray:
        """Central differences; the last axis indexes the derivative direction"""
        parts = [np.gradient(self.values, self.h, axis=k) for k in range(self.dims)]
        return np.stack(parts, axis=-1)

    def magnitude(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        vals = self.values if values is None else values
        flat = vals.reshape(self.n_nodes ** self.dims, -1)
        return np.linalg.norm(flat, axis=1)

    def sup_norm(self) -> float:
        return float(self.magnitude().max())

    def localized_norm(self, p: float, values: Optional[np.ndarray] = None,
                       kernel: LocalizationKernel = LocalizationKernel()) -> float:
        """Gridded localized L_p norm over integer-lattice centers"""
        nodes = self.points()
        mag = self.magnitude(values)
        span = math.floor(-self.origin)
        centers_1d = np.arange(-span, span + 1, dtype=float)
        mesh = np.meshgrid(*([centers_1d] * self.dims), indexing="ij")
        best = 0.0
        for z in np.stack([m.ravel() for m in mesh], axis=1):
            local = kernel(nodes - z) * mag
            if math.isinf(p):
                value = float(local.max())
            else:
                value = float(np.sum(local ** p) * self.h ** self.dims) ** (1.0 / p)
            best = max(best, value)
        return best


def _interior_points(problem: EllipticProblem) -> Tuple[np.ndarray, int]:
    m = problem.n_cells - 1
    axis = -problem.domain_radius + problem.h * np.arange(1, m + 1)
    mesh = np.meshgrid(*([axis] * problem.dims), indexing="ij")
    return np.stack([mesh_k.ravel() for mesh_k in mesh], axis=1), m


def _evaluate(oracle: FieldOracle, points: np.ndarray) -> np.ndarray:
    return oracle(torch.from_numpy(points)).detach().cpu().numpy()


def assemble(problem: EllipticProblem) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Sparse operator on interior nodes and the interior coordinates"""
    points, m = _interior_points(problem)
    dims, h, c = problem.dims, problem.h, problem.a_coeff
    n = points.shape[0]
    a = _evaluate(problem.a, points)
    beta = problem.b_coeff * _evaluate(problem.b, points)

    smallest = np.linalg.eigvalsh(a)[:, 0]
    if (smallest <= 0).any():
        where = tuple(points[np.argmin(smallest)])
        raise SolverError(f"diffusion matrix is not positive definite at {where}")

    index = np.arange(n).reshape((m,) * dims)
    multi = np.stack(np.unravel_index(np.arange(n), (m,) * dims), axis=1)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, problem.lam)]

    def couple(offset, coeff):
        target = multi + np.asarray(offset)
        ok = ((target >= 0) & (target < m)).all(axis=1)
        rows.append(np.arange(n)[ok])
        cols.append(index[tuple(target[ok].T)])
        vals.append(coeff[ok])

    peclet = np.linalg.norm(beta, axis=1) * h / (2 * c * smallest)
    upwind = peclet > 1
    for k in range(dims):
        unit = np.zeros(dims, dtype=int)
        unit[k] = 1
        diffusion = c * a[:, k, k] / h ** 2
        vals[0] = vals[0] + 2 * diffusion
        bk = beta[:, k]
        plus = -diffusion + np.where(upwind, np.minimum(bk, 0.0) / h, bk / (2 * h))
        minus = -diffusion + np.where(upwind, -np.maximum(bk, 0.0) / h, -bk / (2 * h))
        vals[0] = vals[0] + np.where(upwind, np.abs(bk) / h, 0.0)
        couple(unit, plus)
        couple(-unit, minus)
    if dims == 2:
        cross = c * a[:, 0, 1] / (2 * h ** 2)
        couple((1, 1), -cross)
        couple((-1, -1), -cross)
        couple((1, -1), cross)
        couple((-1, 1), cross)

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return matrix, points


def _solve_system(matrix: sp.csr_matrix, rhs: np.ndarray, dims: int, ilu=None) -> Tuple[np.ndarray, List[float]]:
    if not rhs.any():
        return np.zeros_like(rhs), [0.0]
    if dims == 1:
        banded = np.zeros((3, rhs.shape[0]))
        banded[0, 1:] = matrix.diagonal(1)
        banded[1] = matrix.diagonal(0)
        banded[2, :-1] = matrix.diagonal(-1)
        return solve_banded((1, 1), banded, rhs), []
    preconditioner = LinearOperator(matrix.shape, ilu.solve)
    history: List[float] = []
    solution, info = gmres(matrix, rhs, M=preconditioner, rtol=1e-12, atol=0.0, restart=GMRES_RESTART,
                           maxiter=ITERATION_BUDGET, callback=history.append, callback_type="pr_norm")
    if info != 0:
        raise SolverError(f"GMRES did not converge (info={info})", history)
    return solution, history


def solve(problem: EllipticProblem) -> GridFunction:
    matrix, points = assemble(problem)
    rhs_all = _evaluate(problem.f, points)
    vector = rhs_all.ndim == 2
    rhs_all = rhs_all.reshape(points.shape[0], -1)

    ilu = spilu(matrix.tocsc(), drop_tol=1e-6, fill_factor=20) if problem.dims == 2 and rhs_all.any() else None
    m = problem.n_cells - 1
    size = problem.n_cells + 1
    components, worst = [], 0.0
    for j in range(rhs_all.shape[1]):
        rhs = rhs_all[:, j]
        u, history = _solve_system(matrix, rhs, problem.dims, ilu)
        norm_rhs = np.linalg.norm(rhs)
        residual = float(np.linalg.norm(matrix @ u - rhs) / norm_rhs) if norm_rhs > 0 else 0.0
        if residual > RESIDUAL_TOLERANCE:
            raise SolverError(f"relative residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE}", history)
        worst = max(worst, residual)
        full = np.zeros((size,) * problem.dims)
        full[(slice(1, -1),) * problem.dims] = u.reshape((m,) * problem.dims)
        components.append(full)

    values = np.stack(components, axis=-1) if vector else components[0]
    tags: Tuple[str, ...] = ()
    if problem.advisory_lambda is not None and problem.lam < problem.advisory_lambda:
        logger.warning("lambda %.4g is below the advisory threshold %.4g", problem.lam, problem.advisory_lambda)
        tags = (BELOW_THRESHOLD,)
    return GridFunction(values, problem.h, -problem.domain_radius, problem.dims, tags=tags, residual=worst)


@dataclass
class AprioriReport:
    lambdas: List[float]
    u_norms: List[float]
    grad_norms: List[float]
    slope_u: float
    slope_grad: float
    expected_u: float
    expected_grad: float
    pass_u: bool
    pass_grad: bool
    below_threshold: List[float] = field(default_factory=list)


def _fit_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def verify_apriori(template: EllipticProblem, lambda_sweep: Sequence[float], p: float, p_prime: float,
                   margin: float = 0.1) -> AprioriReport:
    """Fit log-log decay of the localized norms of u and grad u in lambda"""
    lams = sorted(float(v) for v in lambda_sweep)
    if len(lams) < 4 or lams[-1] / lams[0] < 100:
        raise SolverError("lambda sweep needs at least 4 values spanning 2 decades")
    d = template.dims
    u_norms, grad_norms, low = [], [], []
    for lam in lams:
        u = solve(replace(template, lam=lam))
        if BELOW_THRESHOLD in u.tags:
            low.append(lam)
        u_norms.append(u.localized_norm(p_prime))
        grad_norms.append(u.localized_norm(p_prime, values=u.gradient()))

    inv = 0.0 if math.isinf(p_prime) else d / p_prime
    inv_p = 0.0 if math.isinf(p) else d / p
    expected_grad = -(1 + inv - inv_p) / 2
    expected_u = -(2 + inv - inv_p) / 2
    slope_u, slope_grad = _fit_slope(lams, u_norms), _fit_slope(lams, grad_norms)
    return AprioriReport(
        lambdas=lams, u_norms=u_norms, grad_norms=grad_norms,
        slope_u=slope_u, slope_grad=slope_grad,
        expected_u=expected_u, expected_grad=expected_grad,
        pass_u=slope_u <= expected_u + margin,
        pass_grad=slope_grad <= expected_grad + margin,
        below_threshold=low,
    )


def corollary_bounds(lam: float, k1: float, d: int, p_prime: float) -> Tuple[float, float]:
    """Bounds (||grad U||, ||U||) once lambda clears the a-priori threshold"""
    inv = 0.0 if math.isinf(p_prime) else d / p_prime
    grad_bound = 0.5 * lam ** (-inv / 2) * k1 ** (inv / 2)
    u_bound = 0.5 * lam ** (-(1 + inv) / 2) * k1 ** ((1 + inv) / 2)
    return grad_bound, u_bound


@dataclass
class ZvonkinTransform:
    lam: float
    U: GridFunction
    grad_U: np.ndarray  # (..., d, d) with [l, j] = d_j U^l
    sup_U: float
    sup_grad_U: float
    certified: bool
    jacobian_det_range: Tuple[float, float]
    k1_tilde: float
    k2_tilde: float
    psi: Optional[np.ndarray] = None  # (nodes, d)
    phi_psi_residual: Optional[float] = None
    b_tilde: Optional[np.ndarray] = None  # (nodes, d)
    sigma_tilde: Optional[np.ndarray] = None  # (nodes, d, d)
    transformed_ellipticity: Optional[Tuple[float, float]] = None
    ellipticity_ok: Optional[bool] = None
    p: float = math.inf
    rho: float = math.inf

    def transformed_norms(self) -> TransformedNorms:
        """Gridded sup norms of the transformed coefficients"""
        if self.b_tilde is None:
            raise CertificateError("transform is not certified; transformed coefficients unavailable")
        d = self.U.dims
        shape = (self.U.n_nodes,) * d
        b_grid = self.b_tilde.reshape(shape + (d,))
        s_grid = self.sigma_tilde.reshape(shape + (d, d))
        grad_b = np.stack([np.gradient(b_grid, self.U.h, axis=k) for k in range(d)], axis=-1)
        grad_s = np.stack([np.gradient(s_grid, self.U.h, axis=k) for k in range(d)], axis=-1)
        nodes = self.U.n_nodes ** d
        grad_b_sup = float(np.linalg.norm(grad_b.reshape(nodes, d, d), ord=2, axis=(1, 2)).max())
        grad_s_sup = float(np.linalg.norm(grad_s.reshape(nodes, -1), axis=1).max())
        b_sup = float(np.linalg.norm(self.b_tilde, axis=1).max())
        return TransformedNorms(
            b_sup=b_sup,
            sigma_sup=float(np.linalg.norm(self.sigma_tilde, ord=2, axis=(1, 2)).max()),
            grad_b=grad_b_sup,
            grad_sigma=grad_s_sup,
            k2_tilde=self.k2_tilde,
            gamma_tilde=gamma_tilde_transformed(self.k1_tilde, self.k2_tilde, grad_s_sup, b_sup,
                                                self.p, self.rho, d),
        )


def _invert_phi(U: GridFunction, targets: np.ndarray, damping: float) -> np.ndarray:
    """Solve x + U(x) = y at every target by damped fixed-point iteration"""
    interp = U.interpolator()
    x = targets.copy()
    for _ in range(PSI_MAX_ITER):
        residual = np.linalg.norm(x + interp(x) - targets, axis=1)
        if residual.max() <= PSI_TOLERANCE:
            return x
        x = (1 - damping) * x + damping * (targets - interp(x))
    bad = int(np.argmax(residual))
    raise CertificateError(f"inverse map did not converge at grid point {tuple(targets[bad])}")


def zvonkin_transform(model: SdeModel, lam: float, domain_radius: float = 8.0, h: float = 0.05,
                      damping: float = 0.9) -> ZvonkinTransform:
    """Solve lam U - a d2 U / 2 - b . grad U = b componentwise and build Phi = id + U"""
    d = model.dim
    if d > 2:
        raise SolverError("the Zvonkin transform is restricted to d <= 2")
    problem = EllipticProblem(lam=lam, a=model.a, b=model.drift, f=model.drift,
                              domain_radius=domain_radius, h=h, dims=d, a_coeff=0.5, b_coeff=-1.0)
    U = solve(problem)
    if U.values.ndim == d:
        U = replace(U, values=U.values[..., None])
    grad_U = U.gradient()
    nodes = U.n_nodes ** d
    flat_grad = grad_U.reshape(nodes, d, d)
    sup_U = float(np.linalg.norm(U.values.reshape(nodes, d), axis=1).max())
    sup_grad_U = float(np.linalg.norm(flat_grad, ord=2, axis=(1, 2)).max())
    dets = np.linalg.det(np.eye(d) + flat_grad)
    certified = sup_U < 0.5 and sup_grad_U < 0.5

    transform = ZvonkinTransform(
        lam=lam, U=U, grad_U=grad_U, sup_U=sup_U, sup_grad_U=sup_grad_U, certified=certified,
        jacobian_det_range=(float(dets.min()), float(dets.max())),
        k1_tilde=model.k1 / 4, k2_tilde=9 * model.k2 / 4, p=model.p, rho=model.rho,
    )
    if not certified:
        logger.warning("Zvonkin certificate failed: sup U = %.3g, sup grad U = %.3g", sup_U, sup_grad_U)
        return transform

    targets = U.points()
    psi = _invert_phi(U, targets, damping)
    interp_U = U.interpolator()
    interp_grad = RegularGridInterpolator(U.axes(), grad_U, bounds_error=False, fill_value=0.0)
    at_psi = torch.from_numpy(psi)
    sigma = model.sigma(at_psi).numpy()
    sigma_tilde = (np.eye(d) + interp_grad(psi).reshape(nodes, d, d)) @ sigma
    eigs = np.linalg.eigvalsh(sigma_tilde @ np.transpose(sigma_tilde, (0, 2, 1)))

    transform.psi = psi
    transform.phi_psi_residual = float(np.linalg.norm(psi + interp_U(psi) - targets, axis=1).max())
    transform.b_tilde = lam * interp_U(psi)
    transform.sigma_tilde = sigma_tilde
    transform.transformed_ellipticity = (float(eigs.min()), float(eigs.max()))
    transform.ellipticity_ok = bool(
        eigs.min() >= transform.k1_tilde - ELLIPTICITY_TOLERANCE
        and eigs.max() <= transform.k2_tilde + ELLIPTICITY_TOLERANCE
    )
    return transform
