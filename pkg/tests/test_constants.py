"""Tests for the closed-form constants and their calibration"""

import math

import pytest

from flowlab.engine.constants import (
    CalibrationSet,
    NormInputs,
    TransformedNorms,
    beta_zero,
    case_study_beta_threshold,
    case_study_kappa_bound,
    compute_bundle,
    gamma_attractor,
    gamma_factor,
    gamma_tilde,
    kappa_star,
    lambda_min_pde,
    lambda_zvonkin,
    varrho,
)
from flowlab.engine.errors import ConstantsError
from tests.conftest import make_model

BROWNIAN = NormInputs(dim=1, k1=1.0, k2=1.0, p=math.inf, rho=math.inf)


def test_calibration_defaults_and_overrides():
    calibration = CalibrationSet(c_kry=((2.0, 3.0),))
    assert calibration.kry(2.0) == 3.0
    assert calibration.kry(4.0) == 1.0
    assert calibration.to_dict()["c_kry"] == {"2.0": 3.0}


def test_calibration_rejects_nonpositive_entries():
    with pytest.raises(ConstantsError):
        CalibrationSet(c_prd=0.0)
    with pytest.raises(ConstantsError):
        CalibrationSet(c_kry=((2.0, -1.0),))


def test_gamma_factor_for_brownian_motion():
    assert gamma_factor(1.0, 1.0, 0.0, 0.0, math.inf, math.inf, 1) == pytest.approx(1.0)


def test_gamma_factor_needs_integrability_gap():
    with pytest.raises(ConstantsError):
        gamma_factor(1.0, 1.0, 0.0, 0.0, 1.0, math.inf, 1)


def test_gamma_factor_needs_positive_k1():
    with pytest.raises(ConstantsError):
        gamma_factor(0.0, 1.0, 0.0, 0.0, math.inf, math.inf, 1)


def test_gamma_factor_with_drift():
    # exponent of the drift term is 4d / (1 - d/p) = 8 for d = 1, p = 2
    assert gamma_factor(1.0, 1.0, 0.0, 2.0, 2.0, math.inf, 1) == pytest.approx(1.0 + 2.0 ** 8)


def test_brownian_bundle_values():
    bundle = compute_bundle(BROWNIAN)
    assert bundle.gamma == pytest.approx(1.0)
    assert bundle.gamma_tilde == pytest.approx(1.0)
    assert bundle.lambda_zvonkin == pytest.approx(1.0)
    assert bundle.c1 == pytest.approx(4.0)
    assert bundle.c2 == pytest.approx(0.25)
    assert bundle.c3 == 0.0
    assert bundle.alpha == 3.0
    assert bundle.beta_zero == 0.0
    assert bundle.varrho(2.0) == pytest.approx(64.0)


def test_bundle_recompute_and_dict():
    bundle = compute_bundle(BROWNIAN, CalibrationSet(c1_star=2.0))
    assert bundle.recompute() == bundle
    data = bundle.to_dict()
    assert data["inputs"]["dim"] == 1
    assert data["calibration"]["c1_star"] == 2.0
    assert bundle.lambda_zvonkin == pytest.approx(2.0)


def test_bundle_needs_nonzero_sigma():
    with pytest.raises(ConstantsError):
        compute_bundle(NormInputs(dim=1, k1=1.0, k2=1.0, p=math.inf, rho=math.inf, sigma_sup=0.0))


def test_inputs_from_model_require_declared_norms(brownian):
    assert NormInputs.from_model(brownian).sigma_sup == 1.0
    bare = brownian.with_norms(norm_b=None)
    with pytest.raises(ConstantsError):
        NormInputs.from_model(bare)


def test_b2_norm_falls_back_to_b_norm():
    model = make_model(norm_b=3.0, norm_b2=None)
    assert NormInputs.from_model(model).norm_b2 == 3.0


def test_kappa_star_is_homogeneous_of_degree_one():
    inputs = NormInputs(dim=1, k1=1.0, k2=2.0, p=4.0, rho=4.0, norm_b=0.5, norm_grad_sigma=0.3)
    scale = 3.0
    scaled = NormInputs(dim=1, k1=scale, k2=2.0 * scale, p=4.0, rho=4.0, norm_b=0.5 * scale,
                        norm_grad_sigma=0.3 * math.sqrt(scale))
    assert kappa_star(scaled) == pytest.approx(scale * kappa_star(inputs), rel=1e-12)


def test_gamma_tilde_scales_with_calibration():
    assert gamma_tilde(BROWNIAN, CalibrationSet(c_prd=5.0)) == pytest.approx(5.0 * gamma_tilde(BROWNIAN))


def test_lambda_zvonkin_grows_with_drift():
    weak = NormInputs(dim=1, k1=1.0, k2=1.0, p=4.0, rho=math.inf, norm_b=1.0)
    strong = NormInputs(dim=1, k1=1.0, k2=1.0, p=4.0, rho=math.inf, norm_b=10.0)
    assert lambda_zvonkin(strong) > lambda_zvonkin(weak)


def test_beta_zero():
    assert beta_zero(1.0, 1.0, 0.0, 1.0) == 0.0
    assert beta_zero(1.0, 1.0, 1.0, 4.0) == pytest.approx(4 * (4.0 + 2.0))
    with pytest.raises(ConstantsError):
        beta_zero(1.0, 1.0, 1.0, -1.0)
    with pytest.raises(ConstantsError):
        beta_zero(0.0, 1.0, 1.0, 1.0)


def test_gamma_attractor_uses_krylov_calibration():
    inputs = NormInputs(dim=1, k1=1.0, k2=1.0, p=4.0, rho=math.inf, norm_b2=1.0)
    base = gamma_attractor(inputs)
    assert gamma_attractor(inputs, CalibrationSet(c_kry=((2.0, 3.0),))) == pytest.approx(3.0 * base)


def test_varrho_variants():
    norms = TransformedNorms(b_sup=1.0, sigma_sup=1.0, k2_tilde=1.0, gamma_tilde=1.0)
    assert varrho(2.0, norms) == pytest.approx(16.0 * 2.0)
    assert varrho(2.0, norms, lipschitz=1.0) == pytest.approx(4.0 * 2.0)
    with pytest.raises(ConstantsError):
        varrho(0.5, norms)
    with pytest.raises(ConstantsError):
        compute_bundle(BROWNIAN).varrho(0.5)


def test_case_study_kappa_bound_is_linear_in_calibration():
    unit = case_study_kappa_bound(1.0, 1.0, 0.0, 0.0, 1, 0.1)
    assert unit == pytest.approx(1.0)
    doubled = case_study_kappa_bound(1.0, 1.0, 0.0, 0.0, 1, 0.1, CalibrationSet(case_c1=2.0))
    assert doubled == pytest.approx(2.0)
    with pytest.raises(ConstantsError):
        case_study_kappa_bound(1.0, 1.0, 0.0, 0.0, 1, 0.0)


def test_case_study_beta_threshold():
    assert case_study_beta_threshold(1.0, 1.0, 0.0, 1.0, 0.0, 1, 0.1) == 0.0
    negative = case_study_beta_threshold(1.0, 1.0, 1.0, 0.0, 0.0, 1, 0.1)
    assert negative == pytest.approx(-2.0)


def test_lambda_min_pde():
    assert lambda_min_pde(1.0, 1.0, 0.0, 1.0, 0.0, math.inf, 1) == pytest.approx(1.0)
    with pytest.raises(ConstantsError):
        lambda_min_pde(1.0, 1.0, 0.0, 1.5, 0.0, math.inf, 1)
