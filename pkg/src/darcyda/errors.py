"""Exception types raised by the library.

Each class maps to one failure mode so callers (and the CLI error
reporter) can distinguish bad input from numerical breakdown.
"""


class DarcydaError(Exception):
    """Base class; carries a short machine-readable code."""

    code = "error"


class InvalidArgumentError(DarcydaError, ValueError):
    code = "invalid-argument"


class InvalidTransmissivityError(DarcydaError, ValueError):
    code = "invalid-transmissivity"


class OutOfDomainError(DarcydaError, ValueError):
    code = "out-of-domain"


class SingularSystemError(DarcydaError, RuntimeError):
    code = "singular-system"


class SolverFailureError(DarcydaError, RuntimeError):
    """Iterative solve did not reach the residual tolerance."""

    code = "solver-failure"

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SizeLimitError(DarcydaError, ValueError):
    code = "size-limit"


class DecompositionError(DarcydaError, RuntimeError):
    code = "decomposition-failure"


class NumericOverflowError(DarcydaError, FloatingPointError):
    code = "numeric-overflow"


class TrainingDivergedError(DarcydaError, RuntimeError):
    """Training loss became non-finite.

    ``checkpoint`` holds the parameters of the best epoch seen before
    the divergence, ``epoch`` the epoch at which it occurred.
    """

    code = "training-diverged"

    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


class ErrorModelDegenerateError(DarcydaError, RuntimeError):
    code = "error-model-degenerate"


class SubchainStallError(DarcydaError, RuntimeError):
    """Coarse subchain hit its iteration cap before reaching the
    required number of acceptances."""

    code = "subchain-stall"

    def __init__(self, message, coarse_steps=None, coarse_accepts=None):
        super().__init__(message)
        self.coarse_steps = coarse_steps
        self.coarse_accepts = coarse_accepts


class DegenerateSeriesError(DarcydaError, ValueError):
    code = "degenerate-series"


class ManifestIncompleteError(DarcydaError, RuntimeError):
    code = "manifest-incomplete"
