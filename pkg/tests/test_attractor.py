"""Tests for pullback absorption, forward expansion, excursion bounds and the criterion matrix"""

import math

import numpy as np
import pytest

from flowlab.engine.attractor import (
    AbsorptionScenario,
    Lemma61Params,
    ball_mesh,
    candidate_r0,
    criterion_matrix,
    forward_expansion,
    geometric_depths,
    lemma61_bound,
    lemma61_falsify,
    lemma61_schedule,
    pullback_absorption,
    wilson_interval,
)
from flowlab.engine.errors import AttractorError
from tests.conftest import make_model


def _params(**kwargs):
    values = dict(T=1.0, gamma=1.0, norm_b1=0.0, k1=1.0, k2=1.0)
    values.update(kwargs)
    return Lemma61Params(**values)


def test_wilson_interval_contains_the_estimate():
    low, high = wilson_interval(7, 10)
    assert low < 0.7 < high
    low, high = wilson_interval(0, 10)
    assert low == pytest.approx(0.0, abs=1e-12)
    assert 0 < high < 0.35


def test_ball_mesh_layout():
    mesh = ball_mesh(2.0, 2, 8)
    assert mesh.shape == (9, 2)
    assert mesh[0].tolist() == [0.0, 0.0]
    assert np.allclose(np.linalg.norm(mesh[1:], axis=1), 2.0)
    assert ball_mesh(0.0, 3, 8).shape == (1, 3)
    assert ball_mesh(1.0, 1, 8, with_origin=False).tolist() == [[1.0], [-1.0]]


@pytest.mark.parametrize("kwargs", [{"gamma": -1.0, "r": 1.0}, {"gamma": 0.0, "r": 0.0},
                                    {"gamma": 0.0, "r": 1.0, "depths": ()}])
def test_absorption_scenario_validation(kwargs):
    with pytest.raises(AttractorError):
        AbsorptionScenario(**kwargs)


def test_first_case_bound_value():
    bound = lemma61_bound(1, _params(r=1.0, r2=2.0, r1=7.0, beta_up=-3.0))
    assert bound.value == pytest.approx(2 * math.exp(-16.0))
    assert bound.girsanov == 0.0
    assert not bound.vacuous


def test_zero_horizon_bound_is_vacuous():
    bound = lemma61_bound(1, _params(T=0.0, r=1.0, r2=2.0, r1=7.0, beta_up=-3.0))
    assert bound.value == 2.0
    assert bound.vacuous


def test_fifth_case_with_zero_beta_is_vacuous():
    bound = lemma61_bound(5, _params(r=1.0, r1=3.0, beta_down=0.0))
    assert bound.value == pytest.approx(2.0)
    assert bound.vacuous


def test_fourth_case_bound_value():
    bound = lemma61_bound(4, _params(r=1.0, r1=2.0, r2=3.0, beta_down=5.0))
    assert bound.value == pytest.approx(2 * math.exp(-4.0))


def test_second_and_third_case_bounds():
    second = lemma61_bound(2, _params(R=9.0, r=1.5, r0=1.5, k2=1.0, T=0.25))
    assert second.value == pytest.approx(4 * math.exp(-7.5 ** 2 / 4.0))
    third = lemma61_bound(3, _params(R=2.0, r0=1.5, delta=10.0, delta1=1.0))
    assert third.value == pytest.approx(6 * math.exp(-6.25))


def test_girsanov_term_enters_the_exponent():
    free = lemma61_bound(5, _params(r=1.0, r1=3.0, beta_down=5.0))
    drifted = lemma61_bound(5, _params(r=1.0, r1=3.0, beta_down=5.0, norm_b1=0.5, gamma=2.0))
    expected = 1.0 * (4.0 * 0.0625 + 2.0 * 0.25)
    assert drifted.girsanov == pytest.approx(expected)
    assert drifted.value == pytest.approx(free.value * math.exp(expected))


@pytest.mark.parametrize("case, kwargs", [
    (1, {"r": 1.0, "r1": 0.5, "r2": 2.0}),
    (2, {"R": 1.0, "r": 2.0, "r0": 1.5}),
    (3, {"R": 2.0, "r0": 1.0}),
    (5, {"r": 3.0, "r1": 2.0}),
    (9, {}),
])
def test_bound_parameter_validation(case, kwargs):
    with pytest.raises(AttractorError):
        lemma61_bound(case, _params(**kwargs))


def test_schedule():
    schedule = lemma61_schedule(6, 16.0, beta=2.0, beta0=0.5, eta=0.25, gamma=0.5)
    assert schedule.T == pytest.approx(2.0)
    assert schedule.r == pytest.approx(12.0)
    assert schedule.r1 == pytest.approx(17.0)
    assert schedule.hypotheses_hold
    assert schedule.margin == pytest.approx(0.75)
    assert not lemma61_schedule(7, 16.0, beta=2.0, beta0=0.5, eta=0.25, gamma=0.5).hypotheses_hold
    with pytest.raises(AttractorError):
        lemma61_schedule(5, 16.0, 2.0, 0.5, 0.25, 0.5)
    with pytest.raises(AttractorError):
        lemma61_schedule(7, 16.0, 2.0, 0.5, 0.25, 0.5, iota=0.5)


def test_vacuous_bound_is_not_falsified_by_default(outward_1d):
    params = _params(r=1.0, r1=3.0, beta_down=0.0)
    with pytest.raises(AttractorError):
        lemma61_falsify(outward_1d, 5, params, 10, 0.05, base_seed=1)
    report = lemma61_falsify(outward_1d, 5, params, 10, 0.05, base_seed=1, allow_vacuous=True)
    assert not report.violation


def test_outward_drift_respects_the_fifth_case_bound(outward_1d):
    params = _params(r=1.0, r1=3.0, beta_down=5.0)
    report = lemma61_falsify(outward_1d, 5, params, 200, 0.01, base_seed=2)
    assert report.empirical == 0.0
    assert not report.violation
    assert report.bound == pytest.approx(2 * math.exp(-10.0))


def test_outward_drift_respects_the_first_case_bound(outward_1d):
    params = _params(r=1.0, r1=12.0, r2=2.0, beta_up=5.0)
    report = lemma61_falsify(outward_1d, 1, params, 200, 0.01, base_seed=3)
    assert not report.violation


def test_inward_drift_absorbs_the_origin(inward_2d):
    scenario = AbsorptionScenario(gamma=0.0, r=5.0, depths=(1.0, 2.0), mesh_resolution=8, replicas=20)
    report = pullback_absorption(inward_2d, scenario, 0.01, base_seed=4)
    assert report.probability == 1.0
    assert all(reason == "ok" for reason in report.reasons)
    assert report.ci[1] == pytest.approx(1.0)
    assert report.beta_check.available
    assert report.beta_check.beta_estimate == pytest.approx(-5.0)


def test_declared_beta_replaces_the_shell_estimate(inward_2d):
    scenario = AbsorptionScenario(gamma=0.0, r=5.0, depths=(1.0,), mesh_resolution=4, replicas=5)
    report = pullback_absorption(inward_2d, scenario, 0.01, base_seed=4, beta=-3.0)
    assert report.beta_check.beta_estimate == -3.0
    assert report.beta_check.margin == pytest.approx(3.0 - report.beta_check.beta_zero)
    assert report.beta_check.note.startswith("analytic override")


def test_inward_drift_absorbs_growing_balls(inward_2d):
    scenario = AbsorptionScenario(gamma=1.0, r=5.0, depths=(1.0, 2.0), mesh_resolution=8, replicas=10)
    assert pullback_absorption(inward_2d, scenario, 0.01, base_seed=5).probability == 1.0


def test_brownian_motion_escapes_small_balls(brownian_2d):
    scenario = AbsorptionScenario(gamma=0.0, r=0.01, depths=(1.0,), mesh_resolution=4, replicas=10)
    report = pullback_absorption(brownian_2d, scenario, 0.01, base_seed=6)
    assert report.probability == 0.0
    assert all(reason.startswith("escaped B_r") for reason in report.reasons)


def test_outward_drift_expands_the_plane(outward_2d):
    report = forward_expansion(outward_2d, 10.0, 2.0, 2.0, 16, 10, 0.01, base_seed=7)
    assert report.probability == 1.0
    assert report.witness == "winding number"
    assert report.beta_check.beta_estimate == pytest.approx(5.0)


def test_outward_drift_expands_the_line(outward_1d):
    report = forward_expansion(outward_1d, 10.0, 2.0, 2.0, 2, 10, 0.01, base_seed=8)
    assert report.probability == 1.0
    assert report.witness == "interval endpoints"


def test_inward_drift_fails_forward_expansion(inward_2d):
    report = forward_expansion(inward_2d, 1.0, 2.0, 1.0, 16, 5, 0.01, base_seed=9)
    assert report.probability == 0.0
    assert set(report.reasons) == {"expansion event failed"}


def test_geometric_depths():
    assert geometric_depths(5.0) == [0.0, 1.0, 2.0, 4.0, 5.0]
    assert geometric_depths(4.0) == [0.0, 1.0, 2.0, 4.0]
    assert geometric_depths(0.0) == [0.0]


def test_criterion_matrix_bounds_and_nesting(brownian):
    matrix = criterion_matrix(brownian, [1.0], [0.5, 100.0], [0.5, 1.0], 2, 5, 0.1, base_seed=10)
    assert matrix.horizons == [0.5, 1.0]
    for table in matrix.probabilities:
        assert table[0][0] == 0.0
        assert table[0][1] == 1.0


def test_criterion_matrix_probabilities_shrink_with_horizon(brownian):
    matrix = criterion_matrix(brownian, [0.5, 1.0], [1.5, 2.0], [0.5, 2.0, 4.0], 2, 20, 0.1, base_seed=11)
    probs = np.asarray(matrix.probabilities)
    assert probs.shape == (3, 2, 2)
    assert (np.diff(probs, axis=0) <= 0).all()
    assert (np.diff(probs, axis=2) >= 0).all()


def test_candidate_r0():
    model = make_model(dim=2, b2=("constant_radial", {"speed": -0.2}))
    estimate = candidate_r0(model, 100.0, 10.0)
    assert estimate.r0 == pytest.approx(2.5, abs=2e-3)
    assert estimate.value_at_r0 <= 0


def test_candidate_r0_for_strong_and_outward_drift(inward_2d, outward_2d):
    assert candidate_r0(inward_2d, 100.0, 10.0).r0 == 1.0
    assert candidate_r0(outward_2d, 100.0, 10.0).r0 is None
