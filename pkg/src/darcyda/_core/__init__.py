"""Kernel backend selection.

The compiled Cython kernels are used when the extension built; setting
the environment variable DARCYDA_PURE_PYTHON forces the numpy fallback.
Both backends implement the same API and agree to roundoff, so the
choice affects speed only.
"""

import os

from . import _kernels_py

if os.environ.get("DARCYDA_PURE_PYTHON"):
    _impl = _kernels_py
    HAVE_COMPILED_KERNELS = False
else:
    try:
        from . import _kernels as _impl

        HAVE_COMPILED_KERNELS = True
    except ImportError:
        _impl = _kernels_py
        HAVE_COMPILED_KERNELS = False

ACT_LINEAR = 0
ACT_SIGMOID = 1
ACT_RELU = 2
ACT_EXPONENTIAL = 3
EXP_CLAMP = 50.0

nn_forward = _impl.nn_forward
chol_quadform = _impl.chol_quadform
