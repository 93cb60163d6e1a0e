"""
Plot Renderer Component
Turns dispersion, scaling and criterion-matrix reports into self-contained SVG files.
"""

import functools
import io
import logging
from typing import Dict, Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from flowlab.components.plot_theme import PlotTheme
from flowlab.engine.errors import PlotError

logger = logging.getLogger(__name__)

PLOT_KINDS = ("dispersion", "scaling", "heatmap")


def _themed(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with matplotlib.rc_context(self.theme.rc):
            return method(self, *args, **kwargs)

    return wrapper


class PlotRenderer:
    """Renders report data to deterministic SVG bytes"""

    def __init__(self, theme: Optional[PlotTheme] = None, size=(6.0, 4.0)):
        self.theme = theme or PlotTheme()
        self.size = size

    def _figure(self):
        figure = Figure(figsize=self.size)
        FigureCanvasSVG(figure)
        ax = figure.add_subplot(1, 1, 1)
        self.theme.apply(figure, [ax])
        return figure, ax

    def _annotate_seed(self, ax, seed: Optional[int]):
        if seed is not None:
            ax.text(0.99, 0.01, f"seed {seed}", transform=ax.transAxes, ha="right", va="bottom",
                    fontsize=8, color=self.theme.colors['reference'])

    def _to_svg(self, figure) -> bytes:
        buffer = io.BytesIO()
        figure.savefig(buffer, format="svg", metadata={"Date": None, "Creator": None})
        logger.debug("rendered SVG of %d bytes", buffer.tell())
        return buffer.getvalue()

    @_themed
    def dispersion(self, times: Sequence[float], series: Dict[str, Sequence[float]],
                   seed: Optional[int] = None, ylabel: str = "sup |psi_t(x)|") -> bytes:
        """One polyline per named series against time"""
        if not len(times) or not series or any(len(v) == 0 for v in series.values()):
            raise PlotError("dispersion plot needs at least one non-empty series")
        figure, ax = self._figure()
        for i, (label, values) in enumerate(sorted(series.items())):
            if len(values) != len(times):
                raise PlotError(f"series {label!r} has {len(values)} points for {len(times)} times")
            ax.plot(times, values, color=self.theme.series_color(i), label=label)
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        ax.set_title("Set dispersion")
        if len(series) <= 8:
            ax.legend(loc="upper left")
        self._annotate_seed(ax, seed)
        return self._to_svg(figure)

    @_themed
    def scaling(self, lambdas: Sequence[float], norms: Dict[str, Sequence[float]],
                slopes: Optional[Dict[str, float]] = None, seed: Optional[int] = None) -> bytes:
        """Log-log norms against lambda with the expected decay slopes"""
        if not len(lambdas) or not norms:
            raise PlotError("scaling plot needs lambdas and at least one norm series")
        figure, ax = self._figure()
        lam = np.asarray(lambdas, dtype=float)
        for i, (label, values) in enumerate(sorted(norms.items())):
            values = np.asarray(values, dtype=float)
            ax.loglog(lam, values, marker="o", color=self.theme.series_color(i), label=label)
            if slopes and label in slopes:
                reference = values[0] * (lam / lam[0]) ** slopes[label]
                ax.loglog(lam, reference, linestyle="--", color=self.theme.colors['reference'],
                          label=f"{label} slope {slopes[label]:.3g}")
        ax.set_xlabel("lambda")
        ax.set_ylabel("localized norm")
        ax.set_title("A-priori scaling")
        ax.legend(loc="lower left")
        self._annotate_seed(ax, seed)
        return self._to_svg(figure)

    @_themed
    def heatmap(self, matrix: Sequence[Sequence[float]], row_labels: Sequence[float],
                col_labels: Sequence[float], seed: Optional[int] = None, title: str = "P(pullback in B_R)") -> bytes:
        """Coloured cells with a colour-bar legend"""
        data = np.asarray(matrix, dtype=float)
        if data.size == 0 or data.ndim != 2:
            raise PlotError("heat map needs a non-empty 2-D matrix")
        figure, ax = self._figure()
        image = ax.imshow(data, cmap=self.theme.heat_map(), vmin=0.0, vmax=1.0, origin="lower",
                          interpolation="nearest")
        ax.set_xticks(range(data.shape[1]), [f"{v:g}" for v in col_labels])
        ax.set_yticks(range(data.shape[0]), [f"{v:g}" for v in row_labels])
        ax.set_xlabel("R")
        ax.set_ylabel("r")
        ax.set_title(title)
        ax.grid(False)
        figure.colorbar(image, ax=ax, label="probability")
        self._annotate_seed(ax, seed)
        return self._to_svg(figure)

    def render(self, kind: str, data: Dict, seed: Optional[int] = None) -> bytes:
        """Dispatch by plot kind"""
        if not data:
            raise PlotError("empty report")
        if kind == "dispersion":
            return self.dispersion(data["times"], data["series"], seed)
        if kind == "scaling":
            return self.scaling(data["lambdas"], data["norms"], data.get("slopes"), seed)
        if kind == "heatmap":
            return self.heatmap(data["matrix"], data["rows"], data["cols"], seed)
        raise PlotError(f"unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
