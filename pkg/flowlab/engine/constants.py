"""
Constants Component
Closed-form constants and thresholds, with calibration factors for the
universal constants whose values are unknown.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

from flowlab.engine.errors import ConstantsError
from flowlab.engine.model import SdeModel


@dataclass(frozen=True)
class CalibrationSet:
    """Stand-ins for universal constants; every entry defaults to 1"""

    c_kry: Tuple[Tuple[float, float], ...] = ()  # (q, C_Kry(q)) overrides
    c_prd: float = 1.0
    c0_pde: float = 1.0
    c1_star: float = 1.0
    c_cal: float = 1.0
    kappa0: float = 1.0
    kappa1: float = 1.0
    case_c1: float = 1.0
    case_c2: float = 1.0
    provenance: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        values = [v for _, v in self.c_kry] + [
            self.c_prd, self.c0_pde, self.c1_star, self.c_cal,
            self.kappa0, self.kappa1, self.case_c1, self.case_c2,
        ]
        if any(not v > 0 for v in values):
            raise ConstantsError("calibration entries must be positive")

    def kry(self, q: float) -> float:
        for key, value in self.c_kry:
            if key == q:
                return value
        return 1.0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["c_kry"] = {str(q): v for q, v in self.c_kry}
        data["provenance"] = dict(self.provenance)
        return data


@dataclass(frozen=True)
class NormInputs:
    """Dimension, ellipticity, exponents and norms feeding every formula"""

    dim: int
    k1: float
    k2: float
    p: float
    rho: float
    norm_b: float = 0.0
    norm_b1: float = 0.0
    norm_b2: float = 0.0
    norm_grad_sigma: float = 0.0
    sigma_sup: float = 1.0

    @classmethod
    def from_model(cls, model: SdeModel) -> "NormInputs":
        missing = [n for n in ("norm_b", "norm_grad_sigma", "sigma_sup") if getattr(model, n) is None]
        if missing:
            raise ConstantsError(f"model {model.name!r} does not declare {', '.join(missing)}")
        return cls(
            dim=model.dim, k1=model.k1, k2=model.k2, p=model.p, rho=model.rho,
            norm_b=model.norm_b,
            norm_b1=model.norm_b1 or 0.0,
            norm_b2=model.norm_b2 if model.norm_b2 is not None else model.norm_b,
            norm_grad_sigma=model.norm_grad_sigma,
            sigma_sup=model.sigma_sup,
        )


def _gap(d: int, exponent: float, label: str) -> float:
    """1 - d/exponent, which must be positive"""
    gap = 1.0 - d / exponent
    if not gap > 0:
        raise ConstantsError(f"1 - d/{label} = {gap} is not positive")
    return gap


def _require_k1(k1: float):
    if not k1 > 0:
        raise ConstantsError(f"K1 must be positive, got {k1}")


def gamma_factor(k1, k2, norm_grad_sigma, norm_b, p, rho, d) -> float:
    _require_k1(k1)
    e_rho = 4 * d ** 2 / _gap(d, rho, "rho")
    e_p = 4 * d / _gap(d, p, "p")
    return (k2 / k1) ** e_rho + (norm_grad_sigma ** 2 / k1) ** e_rho + (norm_b / k1) ** e_p


def gamma_prime(k1, k2, norm_grad_sigma, rho, d) -> float:
    _require_k1(k1)
    e_rho = 4 * d ** 2 / _gap(d, rho, "rho")
    return (k2 / k1) ** e_rho + (norm_grad_sigma ** 2 / k1) ** e_rho


def gamma_tilde(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> float:
    """Bound on the transformed Krylov factor in terms of the raw coefficients"""
    d = inputs.dim
    _require_k1(inputs.k1)
    g_min = _gap(d, min(inputs.p, inputs.rho), "min(p, rho)")
    g_rho = _gap(d, inputs.rho, "rho")
    return calibration.c_prd * (
        (inputs.k2 / inputs.k1) ** (8 * d ** 3 / (g_min * g_rho))
        + (inputs.norm_b / inputs.k1) ** (16 * d ** 2 / g_min)
        + (inputs.norm_grad_sigma ** 2 / inputs.k1) ** (16 * d ** 3 / (g_min * g_rho))
    )


def gamma_tilde_transformed(k1_tilde, k2_tilde, grad_sigma_tilde, b_tilde, p, rho, d) -> float:
    """Krylov factor of the transformed equation from its own coefficients"""
    _require_k1(k1_tilde)
    e_mix = 4 * d ** 2 / _gap(d, min(p, rho), "min(p, rho)")
    e_p = 4 * d / _gap(d, p, "p")
    return (
        (k2_tilde / k1_tilde) ** e_mix
        + (grad_sigma_tilde ** 2 / k1_tilde) ** e_mix
        + (b_tilde / k1_tilde) ** e_p
    )


def lambda_zvonkin(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> float:
    """Resolvent parameter used to build the Zvonkin transform"""
    d, k1, k2 = inputs.dim, inputs.k1, inputs.k2
    _require_k1(k1)
    g_rho, g_p = _gap(d, inputs.rho, "rho"), _gap(d, inputs.p, "p")
    base = (k1 + math.sqrt(k2) * inputs.norm_grad_sigma) / k1
    return calibration.c1_star * k1 * (
        (k2 ** 2 / k1 ** 2) * base ** (2 / g_rho)
        + base ** (2 * d / (g_rho * g_p)) * (inputs.norm_b / k1) ** (2 / g_p)
    )


def gamma_attractor(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> float:
    """Krylov factor entering beta_0: C_Kry(p/2) with the b2 norm in the drift term"""
    return calibration.kry(inputs.p / 2) * gamma_factor(
        inputs.k1, inputs.k2, inputs.norm_grad_sigma, inputs.norm_b2, inputs.p, inputs.rho, inputs.dim
    )


def kappa_star(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> float:
    d, k1, k2 = inputs.dim, inputs.k1, inputs.k2
    _require_k1(k1)
    g_min = _gap(d, min(inputs.p, inputs.rho), "min(p, rho)")
    g_rho = _gap(d, inputs.rho, "rho")
    prefactor = k2 + inputs.norm_b ** 2 * k2 / k1 ** 2 + inputs.norm_grad_sigma ** 2
    bracket = (
        (k2 / k1) ** (16 * d ** 3 / (g_min * g_rho))
        + (inputs.norm_b / k1) ** (32 * d ** 2 / g_min)
        + (inputs.norm_grad_sigma ** 2 / k1) ** (32 * d ** 3 / (g_min * g_rho))
    )
    return calibration.c_prd * prefactor * bracket


def beta_zero(k1, k2, norm_b1, gamma) -> float:
    if not k1 * k2 > 0:
        raise ConstantsError("K1*K2 must be positive")
    if gamma < 0:
        raise ConstantsError("Gamma must be nonnegative")
    return 4 * (norm_b1 ** 2 * gamma + k2 * norm_b1 * math.sqrt(gamma)) / math.sqrt(k1 * k2)


@dataclass(frozen=True)
class TransformedNorms:
    b_sup: float = 0.0
    sigma_sup: float = 0.0
    grad_b: float = 0.0
    grad_sigma: float = 0.0
    k2_tilde: float = 9 / 4
    gamma_tilde: float = 1.0


def varrho(r: float, norms: TransformedNorms, lipschitz: Optional[float] = None) -> float:
    """Stability exponent; pass the Lipschitz constant of sigma for the r^2 variant"""
    if r < 1:
        raise ConstantsError(f"r must be >= 1, got {r}")
    if not norms.k2_tilde > 0:
        raise ConstantsError("transformed K2 must be positive")
    g, k2t = norms.gamma_tilde, norms.k2_tilde
    drift_part = norms.b_sup + (g * norms.grad_b) ** 2 / k2t + g * norms.grad_b
    if lipschitz is not None:
        return r ** 2 * (drift_part + lipschitz ** 2)
    return r ** 4 * (
        drift_part
        + norms.sigma_sup ** 2
        + g ** 2 * norms.grad_sigma ** 4 / k2t
        + g * norms.grad_sigma ** 2
    )


@dataclass(frozen=True)
class CBundle:
    c1: float
    c2: float
    c3: float
    alpha: float = 3.0


def c_bundle(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> CBundle:
    if not inputs.sigma_sup > 0:
        raise ConstantsError("sup norm of sigma is zero; c2 undefined")
    k1, k2 = inputs.k1, inputs.k2
    lam = lambda_zvonkin(inputs, calibration)
    g_t = gamma_tilde(inputs, calibration)
    g_p = gamma_prime(k1, k2, inputs.norm_grad_sigma, inputs.rho, inputs.dim)
    mixed = k2 * inputs.norm_b ** 2 / k1 ** 2 + inputs.norm_grad_sigma ** 2
    c1 = lam + k2 + g_t * lam + (g_t * lam) ** 2 / k2 + g_t ** 2 * mixed ** 2 / k2 + g_t * mixed
    c2 = 1.0 / (4 * inputs.sigma_sup ** 2)
    c3 = calibration.c_cal * (
        g_p ** 2 * inputs.norm_b ** 4 / (k1 ** 2 * k2) + g_p * inputs.norm_b ** 2 / k1
    )
    return CBundle(c1=c1, c2=c2, c3=c3)


def lambda_min_pde(k1, k2, omega_alpha, alpha_holder, norm_b, p1, d,
                   calibration: CalibrationSet = CalibrationSet()) -> float:
    """Smallest resolvent parameter admitted by the a-priori estimate"""
    _require_k1(k1)
    if not 0 < alpha_holder <= 1:
        raise ConstantsError(f"Holder exponent must lie in (0, 1], got {alpha_holder}")
    g_p = _gap(d, p1, "p1")
    base = (k1 + omega_alpha) / k1
    return calibration.c0_pde * k1 * (
        (k2 ** 2 / k1 ** 2) * base ** (2 / alpha_holder)
        + base ** ((d / alpha_holder) * (2 / g_p)) * (norm_b / k1) ** (2 / g_p)
    )


def case_study_kappa_bound(k1, k2, norm_b, norm_grad_sigma, d, epsilon,
                           calibration: CalibrationSet = CalibrationSet()) -> float:
    """Expansion-rate bound for bounded b and grad sigma"""
    if not epsilon > 0:
        raise ConstantsError(f"epsilon must be positive, got {epsilon}")
    _require_k1(k1)
    prefactor = k2 + norm_b ** 2 * k2 / k1 ** 2 + norm_grad_sigma ** 2
    bracket = (
        (k2 / k1) ** (16 * d ** 3 + epsilon)
        + (norm_grad_sigma ** 2 / k1) ** (32 * d ** 3 + epsilon)
        + (norm_b / k1) ** (32 * d ** 2 + epsilon)
    )
    return calibration.case_c1 * prefactor * bracket


def case_study_beta_threshold(k1, k2, norm_b1, norm_b2, norm_grad_sigma, d, epsilon,
                              calibration: CalibrationSet = CalibrationSet()) -> float:
    """beta below this value yields an attractor for bounded coefficients"""
    if not epsilon > 0:
        raise ConstantsError(f"epsilon must be positive, got {epsilon}")
    _require_k1(k1)
    bracket = (
        (k2 / k1) ** (4 * d ** 2 + epsilon)
        + (norm_grad_sigma ** 2 / k1) ** (4 * d ** 2 + epsilon)
        + (norm_b2 / k1) ** (4 * d + epsilon)
    )
    return -calibration.case_c2 * (norm_b1 ** 2 + k2 * norm_b1) / math.sqrt(k1 * k2) * bracket


@dataclass(frozen=True)
class ConstantBundle:
    gamma: float
    gamma_tilde: float
    gamma_prime: float
    lambda_zvonkin: float
    c1: float
    c2: float
    c3: float
    alpha: float
    kappa_star: float
    beta_zero: float
    lambda_min_pde: float
    inputs: NormInputs
    calibration: CalibrationSet = field(default_factory=CalibrationSet)

    def varrho(self, r: float) -> float:
        """Stability exponent in raw-coefficient form, r^4 c1"""
        if r < 1:
            raise ConstantsError(f"r must be >= 1, got {r}")
        return r ** 4 * self.c1

    def recompute(self) -> "ConstantBundle":
        return compute_bundle(self.inputs, self.calibration)

    def to_dict(self) -> Dict:
        data = {k: v for k, v in asdict(self).items() if k not in ("inputs", "calibration")}
        data["inputs"] = asdict(self.inputs)
        data["calibration"] = self.calibration.to_dict()
        return data


def compute_bundle(inputs: NormInputs, calibration: CalibrationSet = CalibrationSet()) -> ConstantBundle:
    d = inputs.dim
    c = c_bundle(inputs, calibration)
    gamma_b0 = gamma_attractor(inputs, calibration)
    return ConstantBundle(
        gamma=gamma_factor(inputs.k1, inputs.k2, inputs.norm_grad_sigma, inputs.norm_b, inputs.p, inputs.rho, d),
        gamma_tilde=gamma_tilde(inputs, calibration),
        gamma_prime=gamma_prime(inputs.k1, inputs.k2, inputs.norm_grad_sigma, inputs.rho, d),
        lambda_zvonkin=lambda_zvonkin(inputs, calibration),
        c1=c.c1,
        c2=c.c2,
        c3=c.c3,
        alpha=c.alpha,
        kappa_star=kappa_star(inputs, calibration),
        beta_zero=beta_zero(inputs.k1, inputs.k2, inputs.norm_b1, gamma_b0),
        lambda_min_pde=lambda_min_pde(
            inputs.k1, inputs.k2,
            math.sqrt(inputs.k2) * inputs.norm_grad_sigma,
            _gap(d, inputs.rho, "rho"),
            inputs.norm_b, inputs.p, d, calibration,
        ),
        inputs=inputs,
        calibration=calibration,
    )
