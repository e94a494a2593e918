"""Expectations of uncertain dynamical systems by quadrature of the Koopman action."""
from .dynsys import Event, OdeSystem, SystemMap, integrate, integrate_batch
from .koopman import (
    Observable,
    UncertaintyProblem,
    central_moments,
    correlation,
    covariance,
    koopman_expectation,
)
from .mc import compare, mc_expectation
from .prob import ProductDensity, TruncatedNormal, Uniform
from .quad import integrate_1d, integrate_nd
from .scenarios import SCENARIOS, get_scenario

__all__ = [
    "Event", "OdeSystem", "SystemMap", "integrate", "integrate_batch",
    "Observable", "UncertaintyProblem", "central_moments", "correlation", "covariance", "koopman_expectation",
    "compare", "mc_expectation", "ProductDensity", "TruncatedNormal", "Uniform",
    "integrate_1d", "integrate_nd", "SCENARIOS", "get_scenario",
]
