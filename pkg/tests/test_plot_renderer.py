"""Tests for SVG rendering"""

import pytest

from flowlab.components.plot_renderer import PlotRenderer
from flowlab.engine.errors import PlotError


@pytest.fixture
def renderer():
    return PlotRenderer()


def test_dispersion_svg_is_deterministic(renderer):
    times = [0.0, 0.5, 1.0]
    series = {"sup": [1.0, 1.4, 2.1], "diameter": [2.0, 2.2, 2.9]}
    first = renderer.dispersion(times, series, seed=7)
    second = renderer.dispersion(times, series, seed=7)
    assert b"<svg" in first
    assert first == second


def test_scaling_and_heatmap_render(renderer):
    svg = renderer.scaling([10.0, 100.0, 1000.0], {"sup": [0.1, 0.01, 0.001]}, {"sup": -1.0}, seed=1)
    assert b"<svg" in svg
    svg = renderer.heatmap([[0.0, 0.5], [0.9, 1.0]], [1.0, 2.0], [3.0, 6.0], seed=1)
    assert b"<svg" in svg


def test_render_dispatches_by_kind(renderer):
    data = {"matrix": [[1.0]], "rows": [1.0], "cols": [2.0]}
    assert renderer.render("heatmap", data, seed=3) == renderer.heatmap([[1.0]], [1.0], [2.0], seed=3)


@pytest.mark.parametrize("kind,data", [
    ("dispersion", {}),
    ("dispersion", {"times": [], "series": {"a": []}}),
    ("dispersion", {"times": [0.0, 1.0], "series": {"a": [1.0]}}),
    ("scaling", {"lambdas": [], "norms": {}}),
    ("heatmap", {"matrix": [], "rows": [], "cols": []}),
    ("histogram", {"values": [1.0]}),
])
def test_bad_plot_input_raises(renderer, kind, data):
    with pytest.raises(PlotError):
        renderer.render(kind, data)
