"""Shared models for the test suite"""

import math

import pytest

from flowlab.engine.model import SdeModel, build_field
from flowlab.services.scenario_service import ScenarioService


def make_model(dim=1, b2=("zero", {}), b1=("zero", {}), epsilon=1.0, norm_b=0.0, name="model", **kwargs):
    first = build_field(b1[0], dim, b1[1])
    second = build_field(b2[0], dim, b2[1])
    sigma = build_field("scalar", dim, {"epsilon": epsilon}, diffusion=True)
    declared = dict(
        k1=epsilon ** 2, k2=epsilon ** 2, p=math.inf, rho=math.inf,
        norm_b=norm_b, norm_b1=0.0, norm_b2=norm_b, norm_grad_sigma=0.0, sigma_sup=epsilon,
    )
    declared.update(kwargs)
    return SdeModel(
        dim=dim, drift_b1=first.oracle, drift_b2=second.oracle, diffusion=sigma.oracle,
        singular=first.singular.merged(second.singular), name=name, **declared,
    )


@pytest.fixture
def brownian():
    return make_model(dim=1, name="brownian")


@pytest.fixture
def brownian_2d():
    return make_model(dim=2, name="brownian-2d")


@pytest.fixture
def ou():
    return make_model(dim=1, b2=("linear", {"coefficient": -1.0}), norm_b=1.0, name="ou")


@pytest.fixture
def inward_2d():
    return make_model(dim=2, b2=("saturating_radial", {"speed": -5.0}), norm_b=5.0, name="inward")


@pytest.fixture
def outward_2d():
    return make_model(dim=2, b2=("saturating_radial", {"speed": 5.0}), norm_b=5.0, name="outward")


@pytest.fixture
def outward_1d():
    return make_model(dim=1, b2=("saturating_radial", {"speed": 5.0}), norm_b=5.0, name="outward-line")


@pytest.fixture
def scenario_service():
    return ScenarioService()
