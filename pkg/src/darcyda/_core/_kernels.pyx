# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot-path kernels.

Two operations dominate the coarse subchain of the delayed-acceptance
sampler: the single-input forward pass of the surrogate network and the
quadratic form of a residual under a Cholesky-factored covariance.
Both are small problems where per-call dispatch overhead rivals the
arithmetic.  The forward pass keeps one direct BLAS matvec per layer
and fuses the bias, overflow guard, and activation into a single C
loop; the quadratic form is a hand-rolled triangular solve.

darcyda._core._kernels_py provides the same API in pure numpy.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, isfinite
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

# activation codes shared with the fallback (see darcyda._core)
DEF ACT_LINEAR = 0
DEF ACT_SIGMOID = 1
DEF ACT_RELU = 2
DEF ACT_EXPONENTIAL = 3
DEF EXP_CLAMP = 50.0


def nn_forward(double[::1] x, list weights, list biases, int[::1] acts):
    """Propagate one input vector through the network.

    Returns (output, n_clamped) where n_clamped counts exponential
    pre-activations truncated at the overflow guard.  Raises
    FloatingPointError on a non-finite pre-activation.
    """
    cdef Py_ssize_t nl = len(weights)
    cdef double[:, ::1] W
    cdef double[::1] b
    cdef double[::1] y = x
    cdef double[::1] z
    cdef Py_ssize_t l, i, rows, cols
    cdef double s
    cdef int act
    cdef long clamped = 0
    cdef char trans = b'T'
    cdef int m_, n_, lda, inc = 1
    cdef double one = 1.0
    out = None

    for l in range(nl):
        W = weights[l]
        b = biases[l]
        act = acts[l]
        rows = W.shape[0]
        cols = W.shape[1]
        out = np.empty(rows, dtype=np.float64)
        z = out
        if rows > 0:
            # seed with the bias, then accumulate W @ y on top; W is
            # row-major so it is passed as its column-major transpose
            z[:] = b
            if cols > 0:
                m_ = <int> cols
                n_ = <int> rows
                lda = <int> cols
                dgemv(&trans, &m_, &n_, &one, &W[0, 0], &lda,
                      &y[0], &inc, &one, &z[0], &inc)
        for i in range(rows):
            s = z[i]
            if not isfinite(s):
                raise FloatingPointError(
                    "non-finite pre-activation in layer %d" % l
                )
            if act == ACT_SIGMOID:
                s = 1.0 / (1.0 + exp(-s))
            elif act == ACT_RELU:
                if s < 0.0:
                    s = 0.0
            elif act == ACT_EXPONENTIAL:
                if s > EXP_CLAMP:
                    s = EXP_CLAMP
                    clamped += 1
                s = exp(s)
            z[i] = s
        y = z
    return out, clamped


def chol_quadform(double[:, ::1] L, double[::1] r):
    """Return r^T (L L^T)^{-1} r for lower-triangular L."""
    cdef Py_ssize_t n = L.shape[0]
    cdef double[::1] y = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double s
    cdef double q = 0.0
    for i in range(n):
        s = r[i]
        for j in range(i):
            s -= L[i, j] * y[j]
        y[i] = s / L[i, i]
        q += y[i] * y[i]
    return q
