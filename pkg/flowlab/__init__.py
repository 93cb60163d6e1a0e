"""
flowlab - stochastic-flow laboratory for singular SDEs.
"""

__version__ = "1.0.0"
