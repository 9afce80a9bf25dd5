"""MCMC kernels for the Darcy inverse problem.

Two proposal families target the posterior over KL coefficients: the
preconditioned Crank-Nicolson kernel (prior-reversible, acceptance
depends on the likelihood alone) and the adaptive Metropolis kernel of
the Haario family (symmetric, acceptance includes the prior ratio).

On top of plain Metropolis-Hastings sits a two-stage delayed-acceptance
step: a subchain on the leading ("coarse") coefficients driven by a
cheap approximate likelihood runs until a fixed number of acceptances,
its end point is promoted to a full-dimensional proposal, and a second
acceptance test against the exact likelihood compensates the
approximation error (exact up to the stopping rule's acceptance tilt;
see da_step).  An adaptively estimated additive error model (mean and
covariance of exact-minus-approximate predictions) can be folded into
the approximate likelihood.

All acceptance arithmetic is carried in log space.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ._core import chol_quadform
from .errors import (
    ErrorModelDegenerateError,
    InvalidArgumentError,
    SubchainStallError,
)


@dataclass
class GaussianPrior:
    """Standard normal prior; logpdf is unnormalized (-0.5 |theta|^2),
    which is all ratio-based acceptance tests need."""

    dim: int

    def logpdf(self, theta):
        return -0.5 * float(theta @ theta)

    def sample(self, rng, dim=None):
        return rng.standard_normal(self.dim if dim is None else dim)


class StatModel:
    """Observation model tying the samplers to the forward maps.

    Parameters
    ----------
    d_obs : array (m,)
        Observed data.
    noise_cov : array (m,) or (m, m)
        Observation noise covariance; a vector means diagonal.
    fine : callable (k_fine,) -> (m,)
        Exact forward map on the full coefficient vector.
    coarse : callable (k_coarse,) -> (m,)
        Approximate map on the leading coefficients.
    """

    def __init__(self, d_obs, noise_cov, fine, coarse=None,
                 k_fine=None, k_coarse=None):
        self.d_obs = np.asarray(d_obs, dtype=np.float64)
        self.m = self.d_obs.shape[0]
        cov = np.asarray(noise_cov, dtype=np.float64)
        if cov.ndim == 1:
            if cov.shape != (self.m,) or np.any(cov <= 0):
                raise InvalidArgumentError("diagonal noise variances must be positive, one per datum")
            self.noise_diag = cov
            self._noise_dense = None
        elif cov.ndim == 2 and cov.shape == (self.m, self.m):
            self.noise_diag = None
            self._noise_dense = cov
            try:
                self._noise_chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ErrorModelDegenerateError("noise covariance is not positive definite") from exc
        else:
            raise InvalidArgumentError(f"noise covariance shape {cov.shape} does not match m={self.m}")
        self.fine = fine
        self.coarse = coarse
        self.k_fine = k_fine
        self.k_coarse = k_coarse

    def noise_dense(self):
        if self._noise_dense is None:
            return np.diag(self.noise_diag)
        return self._noise_dense


def log_likelihood(model, prediction):
    """Unnormalized Gaussian log-likelihood -0.5 r^T Sigma_e^{-1} r
    for r = prediction - d_obs."""
    r = prediction - model.d_obs
    if model.noise_diag is not None:
        return -0.5 * float(np.sum(r * r / model.noise_diag))
    return -0.5 * chol_quadform(model._noise_chol, np.ascontiguousarray(r))


class ErrorModel:
    """Running mean and covariance of the model discrepancy
    B = fine(theta) - coarse(theta_hat).

    The running (Welford) update reproduces the batch statistics
    mu = mean(B_i) and Sigma = sum (B_i - mu)(B_i - mu)^T / (N - 1)
    to floating-point accuracy; with fewer than two samples the
    covariance is zero, with none the mean is too.
    """

    def __init__(self, m):
        self.m = int(m)
        self.count = 0
        self._mean = np.zeros(self.m)
        self._m2 = np.zeros((self.m, self.m))
        self.version = 0
        self._chol_cache = None

    @property
    def mu_bias(self):
        return self._mean

    @property
    def sigma_bias(self):
        if self.count < 2:
            return np.zeros((self.m, self.m))
        return self._m2 / (self.count - 1)

    def update(self, bias_sample):
        b = np.asarray(bias_sample, dtype=np.float64)
        if b.shape != (self.m,):
            raise InvalidArgumentError(f"bias sample must have shape ({self.m},)")
        if not np.all(np.isfinite(b)):
            raise InvalidArgumentError("bias sample must be finite")
        self.count += 1
        delta = b - self._mean
        self._mean = self._mean + delta / self.count
        self._m2 = self._m2 + np.outer(delta, b - self._mean)
        self.version += 1

    def combined_chol(self, model):
        """Cholesky factor of Sigma_bias + Sigma_e, refreshed only when
        the model has absorbed new samples."""
        if self._chol_cache is not None and self._chol_cache[0] == self.version:
            return self._chol_cache[1]
        cov = self.sigma_bias + model.noise_dense()
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ErrorModelDegenerateError(
                "combined bias+noise covariance is not positive definite") from exc
        self._chol_cache = (self.version, np.ascontiguousarray(chol))
        return chol


def log_likelihood_eem(model, coarse_prediction, em):
    """Approximate log-likelihood with the error model folded in:
    r = coarse_prediction + mu_bias - d_obs under Sigma_bias + Sigma_e."""
    r = coarse_prediction + em.mu_bias - model.d_obs
    return -0.5 * chol_quadform(em.combined_chol(model), np.ascontiguousarray(r))


def eem_from_prior(model, n_samples, rng):
    """Initialize an error model from prior draws instead of chain
    history: theta ~ N(0, I_{k_fine}), one fine and one coarse solve
    per draw."""
    if n_samples < 1:
        raise InvalidArgumentError("need at least one prior sample")
    em = ErrorModel(model.m)
    for _ in range(n_samples):
        theta = rng.standard_normal(model.k_fine)
        bias = model.fine(theta) - model.coarse(theta[:model.k_coarse])
        em.update(bias)
    return em


# ---------------------------------------------------------------------------
# proposal kernels

class PcnKernel:
    """Preconditioned Crank-Nicolson proposal
    theta' = sqrt(1 - beta^2) theta + beta xi, xi ~ N(0, I).

    Prior-reversible, so the MH ratio reduces to the likelihood ratio.
    """

    uses_prior_ratio = False
    adaptive = False

    def __init__(self, beta):
        if not (0.0 <= beta <= 1.0):
            raise InvalidArgumentError(f"beta must lie in [0, 1], got {beta!r}")
        self.beta = float(beta)
        self._contraction = np.sqrt(1.0 - self.beta ** 2)

    @classmethod
    def from_step_size(cls, delta):
        """beta = sqrt(8 delta) / (2 + delta), the map from the
        discretized-Langevin step size."""
        if delta <= 0:
            raise InvalidArgumentError(f"step size must be positive, got {delta!r}")
        return cls(np.sqrt(8.0 * delta) / (2.0 + delta))

    def propose(self, theta, rng):
        return self._contraction * theta + self.beta * rng.standard_normal(theta.shape[0])

    def update(self, theta):
        pass


class AmKernel:
    """Adaptive Metropolis: Gaussian random walk whose covariance is
    the scaled running covariance of the chain history.

    The proposal covariance is sigma0 (times identity) for the first
    i0 absorbed states and s_d Cov(history) + s_d gamma I afterwards,
    with s_d = 2.4^2 / dim.  History is accumulated in Welford form so
    the streaming covariance equals the batch formula to roundoff.
    """

    uses_prior_ratio = True
    adaptive = True

    def __init__(self, dim, sigma0=0.01, i0=100, gamma=1e-6):
        if dim < 1 or i0 < 1 or gamma < 0 or sigma0 <= 0:
            raise InvalidArgumentError("bad adaptive-Metropolis constants")
        self.dim = int(dim)
        self.sigma0 = float(sigma0)
        self.i0 = int(i0)
        self.gamma = float(gamma)
        self.s_d = 2.4 ** 2 / self.dim
        self.count = 0
        self._mean = np.zeros(self.dim)
        self._m2 = np.zeros((self.dim, self.dim))
        self._chol = None
        self._chol_count = -1

    def update(self, theta):
        """Absorb a chain state (repeats included) into the history."""
        th = np.asarray(theta, dtype=np.float64)
        if th.shape != (self.dim,):
            raise InvalidArgumentError(f"state must have shape ({self.dim},)")
        self.count += 1
        delta = th - self._mean
        self._mean = self._mean + delta / self.count
        self._m2 = self._m2 + np.outer(delta, th - self._mean)

    def proposal_cov(self):
        if self.count <= self.i0 or self.count < 2:
            return self.sigma0 * np.eye(self.dim)
        cov = self._m2 / (self.count - 1)
        return self.s_d * cov + self.s_d * self.gamma * np.eye(self.dim)

    def propose(self, theta, rng):
        if self._chol_count != self.count:
            self._chol = np.linalg.cholesky(self.proposal_cov())
            self._chol_count = self.count
        return theta + self._chol @ rng.standard_normal(self.dim)


# ---------------------------------------------------------------------------
# Metropolis-Hastings

@dataclass
class ChainState:
    """Current position with its cached log-likelihoods and the chain's
    private RNG stream.  ``log_like_coarse``/``em_version`` are only
    meaningful for delayed-acceptance chains."""

    theta: np.ndarray
    rng: np.random.Generator
    log_like: float = np.nan
    log_like_coarse: float = np.nan
    em_version: int = -1


def mh_step(state, kernel, prior, loglike_fn):
    """One Metropolis-Hastings step, in place.

    The kernel decides the ratio structure: prior-reversible kernels
    contribute the likelihood ratio alone, symmetric kernels add the
    prior ratio.  Adaptive kernels absorb the post-decision state.
    Returns True on acceptance; a rejection leaves ``state.theta`` and
    the cached log-likelihood untouched.
    """
    proposal = kernel.propose(state.theta, state.rng)
    ll = loglike_fn(proposal)
    log_ratio = ll - state.log_like
    if kernel.uses_prior_ratio:
        log_ratio += prior.logpdf(proposal) - prior.logpdf(state.theta)
    accepted = np.log(state.rng.uniform()) <= log_ratio
    if accepted:
        state.theta = proposal
        state.log_like = ll
    if kernel.adaptive:
        kernel.update(state.theta)
    return bool(accepted)


@dataclass
class DaStepInfo:
    accepted: bool
    coarse_steps: int
    coarse_accepts: int
    bias_sample: np.ndarray


def da_step(state, model, prior, coarse_kernel, tilde_kernel, offset,
            em=None, cap_factor=100):
    """One two-stage delayed-acceptance step, in place.

    First stage: restart a subchain at the current leading block
    theta_hat and advance it under the approximate likelihood (error
    model folded in when ``em`` is given) until exactly ``offset``
    proposals have been accepted; its end point is the coarse part of
    the promoted proposal.  The trailing block gets one fresh
    ``tilde_kernel`` proposal.

    Second stage: accept with ratio
    [L(theta') / L(theta)] * [L_hat(theta_hat) / L_hat(theta_hat')].
    This treats the subchain end point as a draw whose proposal ratio
    is the coarse posterior's inverse ratio.  That holds exactly for
    the accepted-move flow of the subchain's Metropolis-Hastings
    kernel; stopping on a count of acceptances additionally conditions
    the end point on acceptance, which tilts the stationary law by the
    coarse acceptance probability at theta_hat.  The tilt vanishes as
    that probability flattens (small kernel steps) and is below Monte
    Carlo noise at the production step sizes; the subchain-tilt test
    in the test suite pins both regimes.  The only kernel-dependent
    ratio term is the trailing block's, which for a symmetric kernel
    adds the prior ratio of the trailing coefficients (for the
    factorized standard normal prior this equals the full-prior-ratio
    form).

    The discrepancy sample fine(theta') - coarse(theta_hat') of the
    promoted proposal is returned whether or not it is accepted; the
    caller decides what the error model absorbs.  Raises
    SubchainStallError when the subchain exceeds cap_factor * offset
    iterations.
    """
    if offset < 1:
        raise InvalidArgumentError(f"offset must be >= 1, got {offset}")
    kc = model.k_coarse
    theta_hat = state.theta[:kc].copy()
    theta_tilde = state.theta[kc:]

    if em is None:
        def coarse_ll(th):
            return log_likelihood(model, model.coarse(th))
    else:
        def coarse_ll(th):
            return log_likelihood_eem(model, model.coarse(th), em)
        if state.em_version != em.version:
            state.log_like_coarse = coarse_ll(theta_hat)
            state.em_version = em.version

    cur_hat = theta_hat
    cur_ll = state.log_like_coarse
    accepts = 0
    steps = 0
    cap = cap_factor * offset
    while accepts < offset:
        if steps >= cap:
            raise SubchainStallError(
                f"subchain reached {steps} iterations with {accepts}/{offset} acceptances",
                coarse_steps=steps, coarse_accepts=accepts)
        steps += 1
        prop = coarse_kernel.propose(cur_hat, state.rng)
        ll = coarse_ll(prop)
        log_ratio = ll - cur_ll
        if coarse_kernel.uses_prior_ratio:
            log_ratio += prior.logpdf(prop) - prior.logpdf(cur_hat)
        if np.log(state.rng.uniform()) <= log_ratio:
            cur_hat = prop
            cur_ll = ll
            accepts += 1
        if coarse_kernel.adaptive:
            coarse_kernel.update(cur_hat)

    tilde_prop = tilde_kernel.propose(theta_tilde, state.rng)
    proposal = np.concatenate([cur_hat, tilde_prop])
    fine_pred = model.fine(proposal)
    fine_ll = log_likelihood(model, fine_pred)
    bias = fine_pred - model.coarse(cur_hat)

    # promotion ratio: fine ratio corrected by the inverse coarse ratio
    log_ratio = (fine_ll - state.log_like) + (state.log_like_coarse - cur_ll)
    if tilde_kernel.uses_prior_ratio:
        log_ratio += prior.logpdf(tilde_prop) - prior.logpdf(theta_tilde)

    accepted = np.log(state.rng.uniform()) <= log_ratio
    if accepted:
        state.theta = proposal
        state.log_like = fine_ll
        state.log_like_coarse = cur_ll
    if tilde_kernel.adaptive:
        tilde_kernel.update(state.theta[kc:])
    return DaStepInfo(accepted=bool(accepted), coarse_steps=steps,
                      coarse_accepts=accepts, bias_sample=bias)


# ---------------------------------------------------------------------------
# chain drivers

@dataclass
class ChainRun:
    """Trace and bookkeeping of one chain.

    ``trace[i]`` is the state after step i+1; ``log_likes`` follows the
    exact (fine) likelihood.  ``stalled`` flags a delayed-acceptance
    chain whose subchain hit its cap; the trace is truncated there.
    """

    trace: np.ndarray
    log_likes: np.ndarray
    accepts: np.ndarray
    wall_time_s: float
    coarse_steps: int = 0
    coarse_accepts: int = 0
    stalled: bool = False
    stall_message: str = ""

    @property
    def n_steps(self):
        return self.trace.shape[0]

    @property
    def acceptance_rate(self):
        return float(self.accepts.mean()) if self.accepts.size else 0.0

    @property
    def coarse_acceptance_rate(self):
        return self.coarse_accepts / self.coarse_steps if self.coarse_steps else 0.0


def run_mh(theta0, kernel, prior, loglike_fn, n_steps, rng):
    """Drive a single-stage MH chain for ``n_steps`` proposals."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    state = ChainState(theta=theta0.copy(), rng=rng, log_like=loglike_fn(theta0))
    if kernel.adaptive:
        kernel.update(state.theta)
    dim = theta0.shape[0]
    trace = np.empty((n_steps, dim))
    log_likes = np.empty(n_steps)
    accepts = np.zeros(n_steps, dtype=np.int8)
    start = time.monotonic()
    for i in range(n_steps):
        accepts[i] = mh_step(state, kernel, prior, loglike_fn)
        trace[i] = state.theta
        log_likes[i] = state.log_like
    return ChainRun(trace=trace, log_likes=log_likes, accepts=accepts,
                    wall_time_s=time.monotonic() - start)


def run_da(theta0, model, prior, coarse_kernel, tilde_kernel, offset,
           n_steps, rng, em=None, harvest="all", cap_factor=100):
    """Drive a delayed-acceptance chain for ``n_steps`` fine steps.

    ``em`` switches the subchain to the error-model-corrected
    likelihood; ``harvest`` decides which discrepancy samples it
    absorbs ("all" fine evaluations or "accepted" moves only).  A
    subchain stall truncates the run and sets ``stalled`` instead of
    raising, so sibling chains can carry on.
    """
    if harvest not in ("all", "accepted"):
        raise InvalidArgumentError(f"harvest must be 'all' or 'accepted', got {harvest!r}")
    theta0 = np.asarray(theta0, dtype=np.float64)
    kc = model.k_coarse
    state = ChainState(theta=theta0.copy(), rng=rng,
                       log_like=log_likelihood(model, model.fine(theta0)))
    if em is None:
        state.log_like_coarse = log_likelihood(model, model.coarse(theta0[:kc]))
    else:
        state.log_like_coarse = log_likelihood_eem(model, model.coarse(theta0[:kc]), em)
        state.em_version = em.version
    if coarse_kernel.adaptive:
        coarse_kernel.update(state.theta[:kc])
    if tilde_kernel.adaptive:
        tilde_kernel.update(state.theta[kc:])

    trace = np.empty((n_steps, theta0.shape[0]))
    log_likes = np.empty(n_steps)
    accepts = np.zeros(n_steps, dtype=np.int8)
    coarse_steps = 0
    coarse_accepts = 0
    stalled = False
    stall_message = ""
    start = time.monotonic()
    done = 0
    for i in range(n_steps):
        try:
            info = da_step(state, model, prior, coarse_kernel, tilde_kernel,
                           offset, em=em, cap_factor=cap_factor)
        except SubchainStallError as exc:
            stalled = True
            stall_message = str(exc)
            coarse_steps += exc.coarse_steps
            coarse_accepts += exc.coarse_accepts
            break
        coarse_steps += info.coarse_steps
        coarse_accepts += info.coarse_accepts
        if em is not None and (harvest == "all" or info.accepted):
            em.update(info.bias_sample)
        accepts[i] = info.accepted
        trace[i] = state.theta
        log_likes[i] = state.log_like
        done = i + 1
    return ChainRun(trace=trace[:done], log_likes=log_likes[:done],
                    accepts=accepts[:done],
                    wall_time_s=time.monotonic() - start,
                    coarse_steps=coarse_steps, coarse_accepts=coarse_accepts,
                    stalled=stalled, stall_message=stall_message)
