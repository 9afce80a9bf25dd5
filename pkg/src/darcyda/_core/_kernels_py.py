"""Pure-numpy implementations of the compiled kernels.

Kept signature-compatible with darcyda._core._kernels so either module
can back darcyda._core; results agree to floating-point roundoff.
"""

import numpy as np
from scipy.linalg import solve_triangular

_ACT_SIGMOID = 1
_ACT_RELU = 2
_ACT_EXPONENTIAL = 3
_EXP_CLAMP = 50.0


def nn_forward(x, weights, biases, acts):
    """Propagate one input vector through the network.

    Returns (output, n_clamped); raises FloatingPointError on a
    non-finite pre-activation.
    """
    y = x
    clamped = 0
    for layer, (W, b, act) in enumerate(zip(weights, biases, acts)):
        z = W @ y + b
        if not np.isfinite(z).all():
            raise FloatingPointError(
                "non-finite pre-activation in layer %d" % layer
            )
        if act == _ACT_SIGMOID:
            y = 1.0 / (1.0 + np.exp(-z))
        elif act == _ACT_RELU:
            y = np.maximum(z, 0.0)
        elif act == _ACT_EXPONENTIAL:
            over = z > _EXP_CLAMP
            if over.any():
                clamped += int(over.sum())
                z = np.minimum(z, _EXP_CLAMP)
            y = np.exp(z)
        else:
            y = z
    return y, clamped


def chol_quadform(L, r):
    """Return r^T (L L^T)^{-1} r for lower-triangular L."""
    y = solve_triangular(L, r, lower=True, check_finite=False)
    return float(y @ y)
