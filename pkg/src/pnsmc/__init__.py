"""Joint state and parameter estimation for ODE models.

Probabilistic-numerics ODE filters supply per-particle likelihoods to an
iterated batch importance sampler over the model parameters.
"""
from .estimator import PNSMCIdentifier
from .models import PriorSpec, get_model
from .odefilter import SolverConfig, solve_and_score
from .smc import SmcConfig

__all__ = ["PNSMCIdentifier", "PriorSpec", "SmcConfig", "SolverConfig", "get_model",
           "solve_and_score"]
__version__ = "0.1.0"
