"""Bayesian inversion of steady Darcy flow with a neural surrogate.

The package covers the full pipeline: a P1 finite-element forward model
on the unit square, a truncated Karhunen-Loeve parametrization of the
log-transmissivity field, a small feedforward network trained as a
cheap stand-in for the forward map, preconditioned Crank-Nicolson and
adaptive-Metropolis samplers, a two-stage delayed-acceptance sampler
with an adaptively estimated model-error term, and autocorrelation
based effective-sample-size diagnostics.
"""

__version__ = "0.1.0"

from . import diagnostics, fem, random_field, samplers, surrogate  # noqa: F401
from ._core import HAVE_COMPILED_KERNELS  # noqa: F401
