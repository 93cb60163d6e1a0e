"""Tests for coefficient fields, localized norms and assumption probes"""

import math

import numpy as np
import pytest
import torch

from flowlab.engine.errors import ModelError, NormEstimationError
from flowlab.engine.model import (
    LocalizationKernel,
    LpWindow,
    SdeModel,
    SingularSet,
    as_states,
    beta_lower,
    beta_star,
    build_field,
    build_scalar,
    check_assumptions,
    holder_modulus_a,
    localized_lp_norm,
    probe_ellipticity,
    probe_radial_condition,
    sphere_directions,
)
from tests.conftest import make_model

ORIGIN_WINDOW = LpWindow(lower=(0.0,), upper=(0.0,))


def test_as_states_promotes_a_single_point():
    states = as_states([1.0, 2.0])
    assert states.shape == (1, 2)
    assert states.dtype == torch.float64


def test_model_rejects_k2_below_k1():
    with pytest.raises(ModelError):
        make_model(k1=2.0, k2=1.0)


def test_model_rejects_low_integrability():
    with pytest.raises(ModelError):
        make_model(dim=2, p=4.0)


def test_degenerate_model_allows_zero_ellipticity():
    model = make_model(epsilon=0.0, degenerate=True)
    report = check_assumptions(model)
    assert not report.ok
    assert "K1 must be positive" in report.issues


def test_non_degenerate_model_requires_positive_k1():
    with pytest.raises(ModelError):
        make_model(epsilon=0.0)


def test_kernel_is_one_inside_and_zero_outside():
    kernel = LocalizationKernel(delta=2.0)
    values = kernel(np.array([[0.0], [0.9], [2.0], [3.0]]))
    assert values[0] == pytest.approx(1.0)
    assert values[1] == pytest.approx(1.0)
    assert values[2] == pytest.approx(0.0)
    assert values[3] == pytest.approx(0.0)


def test_localized_sup_norm_of_constant_is_one():
    f = build_scalar("constant", 1, {"value": 1.0})
    assert localized_lp_norm(f, math.inf, ORIGIN_WINDOW) == pytest.approx(1.0)


def test_localized_l2_norm_of_constant_lies_between_plateau_and_support():
    f = build_scalar("constant", 1, {"value": 1.0})
    value = localized_lp_norm(f, 2.0, ORIGIN_WINDOW)
    assert 1.0 < value ** 2 < 2.0


def test_localized_norm_takes_sup_over_centers():
    f = build_scalar("smoothed_indicator", 1, {"radius": 1.0, "center": [3.0], "height": 2.0})
    near = localized_lp_norm(f, math.inf, LpWindow(lower=(0.0,), upper=(4.0,)))
    far = localized_lp_norm(f, math.inf, LpWindow(lower=(-4.0,), upper=(-2.0,)))
    assert near == pytest.approx(2.0)
    assert far == pytest.approx(0.0)


def test_localized_norm_rejects_small_exponent():
    f = build_scalar("constant", 1, {})
    with pytest.raises(NormEstimationError):
        localized_lp_norm(f, 0.5, ORIGIN_WINDOW)


def test_localized_norm_reports_non_finite_values():
    def blows_up(x):
        return torch.full((x.shape[0],), math.inf, dtype=torch.float64)

    with pytest.raises(NormEstimationError):
        localized_lp_norm(blows_up, 2.0, ORIGIN_WINDOW)


def test_localized_norm_excludes_declared_singularity():
    singular = build_field("power_singular", 2, {"q": 0.2, "source": 1, "target": 0})
    window = LpWindow(lower=(0.0, 0.0), upper=(0.0, 0.0), resolution=8, refine_levels=2)
    value = localized_lp_norm(singular.oracle, 4.0, window, singular=singular.singular)
    assert math.isfinite(value)
    assert value > 0


def test_empty_center_lattice_is_an_error():
    f = build_scalar("constant", 1, {})
    with pytest.raises(NormEstimationError):
        localized_lp_norm(f, 2.0, LpWindow(lower=(1.0,), upper=(0.0,)))


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_sphere_directions_are_unit_vectors(d):
    dirs = sphere_directions(d, 16)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


def test_probe_ellipticity_on_identity_diffusion(brownian_2d):
    report = probe_ellipticity(brownian_2d, np.random.default_rng(0).standard_normal((5, 2)))
    assert report.k1_hat == pytest.approx(1.0)
    assert report.k2_hat == pytest.approx(1.0)
    assert report.violations == []


def test_probe_ellipticity_flags_wrong_constants():
    model = make_model(dim=2, k1=2.0, k2=3.0)
    report = probe_ellipticity(model, [[0.0, 0.0]])
    assert report.violations
    assert all(v.reason == "outside [K1, K2]" for v in report.violations)


def test_probe_ellipticity_needs_points(brownian):
    with pytest.raises(ModelError):
        probe_ellipticity(brownian, np.zeros((0, 1)))


def test_holder_modulus_of_constant_diffusion_is_zero():
    model = make_model(dim=1, rho=4.0)
    report = holder_modulus_a(model, [[0.0], [0.0], [5.0]], [[0.5], [0.0], [0.0]])
    assert report.omega_hat == 0.0
    assert report.exponent == pytest.approx(0.75)
    assert report.n_used == 1
    assert report.n_skipped == 1


def test_holder_modulus_ignores_coincident_pairs():
    model = make_model(dim=1, rho=4.0)
    report = holder_modulus_a(model, [[1.0], [2.0]], [[1.0], [2.0]])
    assert report.n_used == 0
    assert report.n_skipped == 0


def test_holder_modulus_detects_varying_diffusion():
    sigma = build_field("radial_clamp", 1, {"base": 1.0, "slope": 0.5}, diffusion=True)
    zero = build_field("zero", 1, {})
    model = SdeModel(dim=1, drift_b1=zero.oracle, drift_b2=zero.oracle, diffusion=sigma.oracle,
                     k1=1.0, k2=2.25)
    report = holder_modulus_a(model, [[0.0]], [[0.5]])
    assert report.omega_hat > 0


def test_beta_star_of_saturating_inward_drift(inward_2d):
    estimate = beta_star(inward_2d, 2.0, 10.0)
    assert estimate.value == pytest.approx(-5.0 + 1.0 / 4.0, abs=1e-9)


def test_beta_lower_of_saturating_outward_drift(outward_2d):
    assert beta_lower(outward_2d, 1.0, 10.0).value == pytest.approx(5.0, abs=1e-9)


def test_beta_star_grows_with_the_shell_cap():
    model = make_model(dim=2, b2=("linear", {"coefficient": 1.0}))
    small = beta_star(model, 1.0, 5.0).value
    large = beta_star(model, 1.0, 10.0).value
    assert small <= large


@pytest.mark.parametrize("r, cap", [(0.5, 10.0), (5.0, 5.0)])
def test_beta_star_rejects_bad_shell(inward_2d, r, cap):
    with pytest.raises(ModelError):
        beta_star(inward_2d, r, cap)


def test_probe_radial_condition(inward_2d):
    assert probe_radial_condition(inward_2d, -4.0, "upper", 2.0, 20.0).holds
    assert not probe_radial_condition(inward_2d, -6.0, "upper", 2.0, 20.0).holds
    with pytest.raises(ModelError):
        probe_radial_condition(inward_2d, 0.0, "sideways", 2.0, 20.0)


def test_build_field_rejects_unknown_kind():
    with pytest.raises(ModelError):
        build_field("spiral", 2, {})


def test_build_field_rejects_bad_params():
    with pytest.raises(ModelError):
        build_field("saturating_radial", 2, {"velocity": 1.0})


def test_power_singular_vanishes_on_its_hyperplane():
    built = build_field("power_singular", 2, {"q": 0.2})
    values = built.oracle(torch.tensor([[3.0, 0.0], [3.0, 2.0]], dtype=torch.float64))
    assert values[0, 0] == 0.0
    assert values[1, 0] == pytest.approx(2.0 ** -0.2)
    assert values[:, 1].abs().max() == 0.0
    assert built.singular.hyperplanes == ((1, 0.0),)


def test_clamp_linear_saturates():
    built = build_field("clamp_linear", 1, {"coefficient": -1.0, "lower": -1.0, "upper": 1.0})
    values = built.oracle(torch.tensor([[-3.0], [0.5], [4.0]], dtype=torch.float64))
    assert values.flatten().tolist() == [1.0, -0.5, -1.0]


def test_smoothed_indicator_profile():
    f = build_scalar("smoothed_indicator", 2, {"radius": 1.0})
    values = f(torch.tensor([[0.0, 0.0], [5.0, 5.0]], dtype=torch.float64))
    assert values.tolist() == pytest.approx([1.0, 0.0])


def test_build_scalar_rejects_wrong_center():
    with pytest.raises(ModelError):
        build_scalar("smoothed_indicator", 2, {"center": [1.0]})


def test_singular_set_distance_and_hits():
    singular = SingularSet(points=((0.0, 0.0),), hyperplanes=((1, 2.0),))
    x = np.array([[3.0, 0.0], [0.0, 1.5]])
    assert singular.distance(x).tolist() == pytest.approx([2.0, 0.5])
    hits = singular.hits(torch.tensor([[0.0, 0.0], [1.0, 2.0], [1.0, 1.0]], dtype=torch.float64))
    assert hits.tolist() == [True, True, False]
    assert SingularSet().distance(x).tolist() == [math.inf, math.inf]
