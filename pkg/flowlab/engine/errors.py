"""
Engine Errors
Exception hierarchy shared by the numerical modules and services.
"""


class FlowLabError(Exception):
    """Base class for every error raised by flowlab"""


class ModelError(FlowLabError):
    """Invalid model declaration or coefficient evaluation"""


class NormEstimationError(FlowLabError):
    """Localized norm quadrature could not be evaluated"""


class SimulationError(FlowLabError):
    """Flow integration received inconsistent inputs"""


class MisalignedGridError(SimulationError):
    """Times that must fall on grid points do not"""


class ConstantsError(FlowLabError):
    """A constant formula is undefined for the given inputs"""


class KrylovError(FlowLabError):
    """Occupation functional inconsistent with its declared norm"""


class SolverError(FlowLabError):
    """Finite-difference assembly or linear solve failed"""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class CertificateError(FlowLabError):
    """Zvonkin inverse map could not be computed"""


class AttractorError(FlowLabError):
    """Invalid attractor scenario or excursion bound parameters"""


class ConfigError(FlowLabError):
    """Scenario file could not be parsed or validated"""


class PlotError(FlowLabError):
    """Report cannot be rendered"""


class DispersionError(FlowLabError):
    """Invalid rate-function or dispersion parameters"""
