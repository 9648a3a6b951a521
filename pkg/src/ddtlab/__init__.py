"""Desk-scale decoupled diffusion transformer laboratory.

A condition-encoder / velocity-decoder transformer trained with linear
flow matching, plus ODE samplers, an encoder-sharing planner, and
spectral diagnostics. Everything runs in float64 on CPU so that results
can be checked against closed-form oracles.
"""

from ddtlab.errors import FormatError, NumericalError, UsageError

__version__ = "0.1.0"

__all__ = ["FormatError", "NumericalError", "UsageError", "__version__"]
