"""Chain quality and cost diagnostics.

Integrated autocorrelation times use the automatic windowing rule:
the window W is the smallest lag with W >= c * tau(W), where
tau(W) = 1 + 2 sum_{t<=W} rho(t).  The effective sample size of a
multivariate chain is scalarized conservatively through its slowest
component.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSeriesError, InvalidArgumentError
from .random_field import log_t_samples

WINDOW_FACTOR = 4.0


def autocovariance(series):
    """Biased (1/N) autocovariance at all lags, via FFT."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / n


def integrated_autocorrelation(series, c=WINDOW_FACTOR):
    """Integrated autocorrelation time with automatic windowing.

    Returns max(tau(W*), 1): a tau below one (attainable for
    anticorrelated chains) is floored so downstream effective sample
    sizes never exceed the chain length.  A constant series has no
    autocorrelation structure and raises DegenerateSeriesError.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise InvalidArgumentError("need a 1-d series of length >= 2")
    acov = autocovariance(x)
    if acov[0] <= 0.0 or not np.isfinite(acov[0]):
        raise DegenerateSeriesError("series has zero variance")
    rho = acov / acov[0]
    taus = 1.0 + 2.0 * np.cumsum(rho[1:])          # taus[W-1] = tau(W)
    windows = np.arange(1, x.shape[0])
    satisfied = np.flatnonzero(windows >= c * taus)
    idx = satisfied[0] if satisfied.size else taus.shape[0] - 1
    return float(max(taus[idx], 1.0))


def effective_sample_size(chain, c=WINDOW_FACTOR):
    """N_eff = N / max_j tau_j over the chain's components.

    Returns (n_eff, taus).  ``chain`` is (N,) or (N, d).
    """
    x = np.asarray(chain, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidArgumentError("need a chain of length >= 2")
    taus = np.array([integrated_autocorrelation(x[:, j], c=c)
                     for j in range(x.shape[1])])
    return float(x.shape[0] / taus.max()), taus


def prune(chain, tau):
    """Keep every ceil(tau)-th state, starting from the first."""
    if not np.isfinite(tau) or tau < 1.0:
        raise InvalidArgumentError(f"tau must be finite and >= 1, got {tau!r}")
    x = np.asarray(chain)
    return x[::math.ceil(tau)]


@dataclass
class CostSummary:
    """Cost per effectively independent sample, two accounting modes.

    ``conservative`` charges the full offline cost (training-data
    generation + training) to each chain; ``normalized`` spreads it
    across the ensemble first.
    """

    conservative: float
    normalized: float


def chain_cost(t_fine, t_train, t_run, n_eff, n_chains=1):
    if n_eff <= 0 or n_chains < 1:
        raise InvalidArgumentError("need n_eff > 0 and n_chains >= 1")
    offline = t_fine + t_train
    return CostSummary(conservative=(offline + t_run) / n_eff,
                       normalized=(offline / n_chains + t_run) / n_eff)


def field_statistics(basis, thetas, block=1024):
    """Nodal mean and (unbiased) variance of log-transmissivity over
    coefficient samples, streamed in blocks.

    Returns (mean, var), each (M,).
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != basis.n_modes:
        raise InvalidArgumentError(
            f"samples must be (N, {basis.n_modes}), got {thetas.shape}")
    n = thetas.shape[0]
    if n < 2:
        raise InvalidArgumentError("need at least two samples for a variance")
    m = basis.n_nodes
    total = np.zeros(m)
    total_sq = np.zeros(m)
    for start in range(0, n, block):
        fields = log_t_samples(basis, thetas[start:start + block])
        total += fields.sum(axis=0)
        total_sq += (fields ** 2).sum(axis=0)
    mean = total / n
    var = (total_sq - n * mean ** 2) / (n - 1)
    return mean, np.maximum(var, 0.0)
