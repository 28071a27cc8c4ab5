"""Simulation of martingale deflators in an Ito-process market.

The package simulates Brownian paths, the general Ito market and a Bessel
counterexample market. It builds stochastic exponentials of kernel processes
and checks the resulting claims against closed-form and quadrature oracles.
"""

from .errors import (
    DeflabError, InvalidArgumentError, NumericFailureError, SingularVolatilityError, StabilityError,
)

__version__ = "0.1.0"

__all__ = [
    "DeflabError", "InvalidArgumentError", "NumericFailureError", "SingularVolatilityError",
    "StabilityError", "__version__",
]
