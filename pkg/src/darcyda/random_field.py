"""Log-Gaussian transmissivity fields via truncated Karhunen-Loeve bases.

The log-field is mu + sigma * Psi Lambda^{1/2} theta with theta standard
normal: Psi/Lambda come from the leading eigenpairs of the anisotropic
squared-exponential covariance evaluated at the mesh nodes.  A coarse
parametrization is the same basis truncated to fewer modes, so a coarse
coefficient vector is just the leading block of the fine one.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist

from .errors import (
    DecompositionError,
    InvalidArgumentError,
    SizeLimitError,
)
from .fem import mesh_hash as _mesh_hash

COV_SIZE_LIMIT = 5000
# eigenvalues of a covariance matrix may round slightly negative
EIG_TOL = -1e-10


def _check_lengthscales(lengthscales, dim):
    ls = np.asarray(lengthscales, dtype=np.float64)
    if ls.shape == ():
        ls = np.full(dim, float(ls))
    if ls.shape != (dim,) or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
        raise InvalidArgumentError(
            f"lengthscales must be {dim} positive finite values, got {lengthscales!r}")
    return ls


def kernel_value(x, y, lengthscales):
    """Squared-exponential correlation exp(-0.5 sum ((x_j-y_j)/l_j)^2)
    with one lengthscale per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ls = _check_lengthscales(lengthscales, x.shape[-1])
    z = (x - y) / ls
    return float(np.exp(-0.5 * np.sum(z * z)))


def build_covariance(points, lengthscales, size_limit=COV_SIZE_LIMIT):
    """Dense covariance of the squared-exponential kernel at ``points``.

    Refuses matrices above ``size_limit`` rows: the decomposition below
    is dense and O(M^3).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise InvalidArgumentError("points must be a 2-d array")
    if pts.shape[0] > size_limit:
        raise SizeLimitError(
            f"{pts.shape[0]} points exceed the dense-covariance limit {size_limit}")
    ls = _check_lengthscales(lengthscales, pts.shape[1])
    scaled = pts / ls
    return np.exp(-0.5 * cdist(scaled, scaled, "sqeuclidean"))


@dataclass
class KLBasis:
    """Leading eigenpairs of the nodal covariance plus the log-field
    mean and amplitude; everything realize() needs."""

    eigenvalues: np.ndarray    # (k,) descending, nonnegative
    eigenvectors: np.ndarray   # (M, k) orthonormal columns
    mu: np.ndarray             # (M,)
    sigma: float
    lengthscales: np.ndarray   # (2,)
    mesh_hash: str
    total_trace: float

    @property
    def n_modes(self):
        return self.eigenvalues.shape[0]

    @property
    def n_nodes(self):
        return self.eigenvectors.shape[0]


def truncated_eig(cov, n_modes):
    """Leading ``n_modes`` eigenpairs of a symmetric PSD matrix.

    Eigenvalues come back descending; tiny negative values (roundoff)
    are clipped to zero, anything below -1e-10 aborts.  Each vector's
    largest-magnitude entry is made positive so the decomposition is
    sign-deterministic.
    """
    m = cov.shape[0]
    if not (1 <= n_modes <= m):
        raise InvalidArgumentError(f"need 1 <= n_modes <= {m}, got {n_modes}")
    vals, vecs = eigh(cov, subset_by_index=[m - n_modes, m - 1])
    vals, vecs = vals[::-1].copy(), vecs[:, ::-1].copy()
    if np.any(vals < EIG_TOL):
        raise DecompositionError(
            f"covariance eigenvalue {vals.min():.3e} below tolerance {EIG_TOL}")
    vals = np.maximum(vals, 0.0)
    for i in range(vecs.shape[1]):
        lead = np.argmax(np.abs(vecs[:, i]))
        if vecs[lead, i] < 0:
            vecs[:, i] = -vecs[:, i]
    return vals, vecs


def truncated_basis(mesh, n_modes, lengthscales, sigma=1.0, mu=0.0,
                    size_limit=COV_SIZE_LIMIT):
    """Build the KL basis of the log-transmissivity prior on a mesh.

    Parameters
    ----------
    mesh : fem.Mesh
    n_modes : int
        Number of leading modes kept.
    lengthscales : array-like (2,)
        Correlation lengths per coordinate.
    sigma, mu : float or array
        Amplitude and mean of the log-field (mu may be nodal).

    Returns
    -------
    KLBasis
    """
    if not np.isfinite(sigma) or sigma <= 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma!r}")
    cov = build_covariance(mesh.nodes, lengthscales, size_limit=size_limit)
    vals, vecs = truncated_eig(cov, n_modes)
    mu_vec = np.broadcast_to(np.asarray(mu, dtype=np.float64),
                             (mesh.n_nodes,)).copy()
    return KLBasis(eigenvalues=vals, eigenvectors=vecs, mu=mu_vec,
                   sigma=float(sigma),
                   lengthscales=_check_lengthscales(lengthscales, 2),
                   mesh_hash=_mesh_hash(mesh), total_trace=float(np.trace(cov)))


def energy_ratio(basis):
    """Fraction of the prior variance carried by the retained modes."""
    return float(basis.eigenvalues.sum() / basis.total_trace)


def truncate_basis(basis, n_modes):
    """Restrict a basis to its leading ``n_modes`` (shared eigenpairs)."""
    if not (1 <= n_modes <= basis.n_modes):
        raise InvalidArgumentError(
            f"need 1 <= n_modes <= {basis.n_modes}, got {n_modes}")
    return KLBasis(eigenvalues=basis.eigenvalues[:n_modes].copy(),
                   eigenvectors=basis.eigenvectors[:, :n_modes].copy(),
                   mu=basis.mu, sigma=basis.sigma,
                   lengthscales=basis.lengthscales,
                   mesh_hash=basis.mesh_hash, total_trace=basis.total_trace)


def leading_coefficients(theta, n_modes):
    """Coarse restriction: the first ``n_modes`` coefficients."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[0] < n_modes:
        raise InvalidArgumentError("coefficient vector shorter than requested modes")
    return theta[:n_modes]


@dataclass
class FieldRealization:
    log_t: np.ndarray
    t: np.ndarray


def realize(basis, theta):
    """Realize the transmissivity field for coefficient vector theta.

    log t = mu + sigma * Psi Lambda^{1/2} theta, t = exp(log t).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (basis.n_modes,):
        raise InvalidArgumentError(
            f"theta must have shape ({basis.n_modes},), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("theta must be finite")
    log_t = basis.mu + basis.sigma * (
        basis.eigenvectors @ (np.sqrt(basis.eigenvalues) * theta))
    return FieldRealization(log_t=log_t, t=np.exp(log_t))


def log_t_samples(basis, thetas):
    """Realize log-fields for a batch of coefficient rows, (N, M)."""
    thetas = np.asarray(thetas, dtype=np.float64)
    scaled = thetas * np.sqrt(basis.eigenvalues)
    return basis.mu + basis.sigma * (scaled @ basis.eigenvectors.T)


# ---------------------------------------------------------------------------
# serialization

def save_basis(path, basis):
    payload = {"eigenvalues": basis.eigenvalues.tolist(),
               "eigenvectors": basis.eigenvectors.T.tolist(),  # one vector per row
               "mu": basis.mu.tolist(),
               "sigma": basis.sigma,
               "lengthscales": basis.lengthscales.tolist(),
               "mesh_hash": basis.mesh_hash,
               "total_trace": basis.total_trace}
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def load_basis(path, mesh=None):
    """Load a basis; with ``mesh`` given, refuse one built elsewhere."""
    with open(path) as f:
        data = json.load(f)
    try:
        basis = KLBasis(
            eigenvalues=np.asarray(data["eigenvalues"], dtype=np.float64),
            eigenvectors=np.asarray(data["eigenvectors"], dtype=np.float64).T.copy(),
            mu=np.asarray(data["mu"], dtype=np.float64),
            sigma=float(data["sigma"]),
            lengthscales=np.asarray(data["lengthscales"], dtype=np.float64),
            mesh_hash=data["mesh_hash"],
            total_trace=float(data["total_trace"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed basis file {path}: {exc}") from exc
    if basis.eigenvectors.shape[1] != basis.n_modes \
            or basis.mu.shape[0] != basis.n_nodes:
        raise InvalidArgumentError(f"malformed basis file {path}: bad shapes")
    if mesh is not None and _mesh_hash(mesh) != basis.mesh_hash:
        raise InvalidArgumentError(
            "basis was built for a different mesh (hash mismatch)")
    return basis
