"""P1 finite elements for steady Darcy flow on the unit square.

The weak form of -div(T grad h) = g with fixed-head (Dirichlet) and
prescribed-flux (Neumann) boundaries is discretized with linear
triangles: A_ij = int grad(phi_i) . T grad(phi_j) dx and
b_i = int phi_i g dx - int_Gamma_N phi_i q_N ds.  Transmissivity and
source are carried as nodal values and interpolated linearly, so every
element integral here is exact.
"""

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .errors import (
    InvalidArgumentError,
    InvalidTransmissivityError,
    OutOfDomainError,
    SingularSystemError,
    SolverFailureError,
)

INTERIOR, LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3, 4
MARKER_NAMES = {INTERIOR: "interior", LEFT: "left", RIGHT: "right",
                BOTTOM: "bottom", TOP: "top"}
MARKER_CODES = {v: k for k, v in MARKER_NAMES.items()}
SIDE_TAGS = ("left", "right", "bottom", "top")

# guaranteed bound on the relative residual of solve_head
RESIDUAL_TOL = 1e-10


@dataclass
class Mesh:
    """Triangulation: node coordinates, element connectivity, and a
    boundary marker per node."""

    nodes: np.ndarray      # (M, 2) float64
    elements: np.ndarray   # (E, 3) int32, counterclockwise
    markers: np.ndarray    # (M,) int8, marker codes
    _geom: dict = field(default=None, init=False, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]


def build_unit_square_mesh(n):
    """Structured triangulation of [0,1]^2 with n cells per side.

    Nodes lie on an (n+1) x (n+1) grid in row-major order; each cell is
    split along its lower-left to upper-right diagonal.  Corner nodes
    are tagged left/right (the fixed-head sides take precedence over
    the no-flow sides).

    Parameters
    ----------
    n : int
        Cells per side, n >= 1.

    Returns
    -------
    Mesh
        (n+1)^2 nodes and 2 n^2 positively oriented triangles.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"mesh subdivision must be a positive integer, got {n!r}")
    ticks = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(ticks, ticks)           # row-major: node = iy*(n+1)+ix
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    ll = (iy * (n + 1) + ix).ravel()
    lr, ul = ll + 1, ll + n + 1
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.empty((2 * n * n, 3), dtype=np.int32)
    elements[0::2] = lower
    elements[1::2] = upper

    gx, gy = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    gx, gy = gx.ravel(), gy.ravel()
    markers = np.full(nodes.shape[0], INTERIOR, dtype=np.int8)
    markers[gy == 0] = BOTTOM
    markers[gy == n] = TOP
    markers[gx == 0] = LEFT
    markers[gx == n] = RIGHT
    return Mesh(nodes=nodes, elements=elements, markers=markers)


def _geometry(mesh):
    """Per-element shape-function coefficients, cached on the mesh.

    phi_i(x, y) = (a_i + b_i x + c_i y) / (2 A); k0[e] is the local
    stiffness for unit transmissivity, (b_a b_b + c_a c_b) / (4 A).
    """
    if mesh._geom is not None:
        return mesh._geom
    pts = mesh.nodes[mesh.elements]              # (E, 3, 2)
    x, y = pts[..., 0], pts[..., 1]
    j, k = [1, 2, 0], [2, 0, 1]
    a = x[:, j] * y[:, k] - x[:, k] * y[:, j]    # (E, 3)
    b = y[:, j] - y[:, k]
    c = x[:, k] - x[:, j]
    two_area = a.sum(axis=1)
    if np.any(two_area <= 0):
        raise InvalidArgumentError("mesh contains a degenerate or misoriented element")
    k0 = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) \
        / (2.0 * two_area)[:, None, None]
    mesh._geom = {"a": a, "b": b, "c": c, "two_area": two_area,
                  "area": 0.5 * two_area, "k0": k0}
    return mesh._geom


def _check_transmissivity(mesh, t):
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (mesh.n_nodes,):
        raise InvalidArgumentError(
            f"transmissivity must have one value per node ({mesh.n_nodes}), got shape {t.shape}")
    if not np.all(np.isfinite(t)) or np.any(t <= 0.0):
        raise InvalidTransmissivityError("nodal transmissivity must be finite and positive")
    return t


def stiffness_matrix(mesh, t):
    """Assemble the stiffness matrix (no boundary conditions).

    The integrand T grad(phi_a).grad(phi_b) is linear on each element,
    so the element integral reduces to the vertex mean of T times the
    constant-gradient Gram term.
    """
    t = _check_transmissivity(mesh, t)
    geom = _geometry(mesh)
    tbar = t[mesh.elements].mean(axis=1)         # (E,)
    vals = tbar[:, None, None] * geom["k0"]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    m = mesh.n_nodes
    return sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(m, m)).tocsr()


def source_load(mesh, g):
    """Load vector int phi_i g dx for nodal source values g
    interpolated linearly (exact for that interpolant)."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (mesh.n_nodes,):
        raise InvalidArgumentError("source must have one value per node")
    geom = _geometry(mesh)
    ge = g[mesh.elements]                        # (E, 3)
    local = geom["area"][:, None] / 12.0 * (ge.sum(axis=1, keepdims=True) + ge)
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.elements.ravel(), local.ravel())
    return b


def _boundary_edges(mesh):
    """Edges that belong to exactly one element, as node-index pairs."""
    e = mesh.elements
    edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    _, idx, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    return edges[idx[counts == 1]]


def _edge_side(mesh, edge):
    """Geometric side of a boundary edge, or None."""
    p, q = mesh.nodes[edge[0]], mesh.nodes[edge[1]]
    if p[0] == 0.0 and q[0] == 0.0:
        return "left"
    if p[0] == 1.0 and q[0] == 1.0:
        return "right"
    if p[1] == 0.0 and q[1] == 0.0:
        return "bottom"
    if p[1] == 1.0 and q[1] == 1.0:
        return "top"
    return None


@dataclass
class BoundaryConditions:
    """Fixed heads and prescribed boundary fluxes, keyed by side tag.

    ``dirichlet`` maps a side to its head value; ``neumann`` maps a
    side to the outward flux density q_N = (-T grad h) . n.  A side
    may appear in at most one of the two; sides in neither default to
    the natural (zero-flux) condition.
    """

    dirichlet: dict
    neumann: dict = field(default_factory=dict)

    def __post_init__(self):
        for tag in list(self.dirichlet) + list(self.neumann):
            if tag not in SIDE_TAGS:
                raise InvalidArgumentError(f"unknown boundary tag {tag!r}")
        overlap = set(self.dirichlet) & set(self.neumann)
        if overlap:
            raise InvalidArgumentError(
                f"sides {sorted(overlap)} given both fixed head and fixed flux")
        if not self.dirichlet:
            raise SingularSystemError("at least one side must have a fixed head")


@dataclass
class FemSystem:
    """Linear system after symmetric Dirichlet elimination.

    ``matrix`` is symmetric positive definite; eliminated rows/columns
    carry a unit diagonal and ``rhs`` holds the fixed head there.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray


def assemble(mesh, t, bc, source=None):
    """Assemble the eliminated system A h = b.

    Parameters
    ----------
    mesh : Mesh
    t : array (M,)
        Nodal transmissivity, finite and positive.
    bc : BoundaryConditions
    source : array (M,), optional
        Nodal recharge density g; omitted means g = 0.

    Returns
    -------
    FemSystem
    """
    t = _check_transmissivity(mesh, t)
    geom = _geometry(mesh)

    b = np.zeros(mesh.n_nodes) if source is None else source_load(mesh, source)

    if any(q != 0.0 for q in bc.neumann.values()):
        for edge in _boundary_edges(mesh):
            side = _edge_side(mesh, edge)
            q = bc.neumann.get(side, 0.0)
            if q != 0.0:
                length = np.linalg.norm(mesh.nodes[edge[1]] - mesh.nodes[edge[0]])
                b[edge] -= 0.5 * q * length

    dir_mask = np.zeros(mesh.n_nodes, dtype=bool)
    dir_val = np.zeros(mesh.n_nodes)
    for tag, value in bc.dirichlet.items():
        on = mesh.markers == MARKER_CODES[tag]
        dir_mask |= on
        dir_val[on] = value
    if not dir_mask.any():
        raise SingularSystemError("no mesh node carries a fixed-head marker")

    # stiffness triplets; lift Dirichlet columns into the rhs, then drop
    # every eliminated row/column and put ones on the eliminated diagonal
    tbar = t[mesh.elements].mean(axis=1)
    vals = (tbar[:, None, None] * geom["k0"]).ravel()
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()

    lift = ~dir_mask[rows] & dir_mask[cols]
    np.subtract.at(b, rows[lift], vals[lift] * dir_val[cols[lift]])

    keep = ~dir_mask[rows] & ~dir_mask[cols]
    d_idx = np.flatnonzero(dir_mask)
    m = mesh.n_nodes
    a = sp.coo_matrix(
        (np.concatenate([vals[keep], np.ones(d_idx.size)]),
         (np.concatenate([rows[keep], d_idx]),
          np.concatenate([cols[keep], d_idx]))),
        shape=(m, m)).tocsr()
    b[d_idx] = dir_val[d_idx]
    return FemSystem(matrix=a, rhs=b,
                     dirichlet_nodes=d_idx, dirichlet_values=dir_val[d_idx])


def solve_head(system, tol=1e-12, maxiter=None):
    """Solve for nodal heads with diagonally preconditioned CG.

    The fixed-head entries of the initial guess already satisfy their
    (decoupled) equations, so they are reproduced exactly.  Raises
    SolverFailureError unless the relative residual reaches 1e-10;
    ``tol`` only sets the tighter target the iteration aims for.
    """
    a, b = system.matrix, system.rhs
    m = b.shape[0]
    if maxiter is None:
        maxiter = 10 * m
    diag = a.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("nonpositive diagonal in assembled system")
    precond = sp.diags(1.0 / diag)
    x0 = np.zeros(m)
    x0[system.dirichlet_nodes] = system.dirichlet_values
    x, info = cg(a, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=precond)
    bnorm = np.linalg.norm(b)
    relres = np.linalg.norm(b - a @ x) / bnorm if bnorm > 0 else np.linalg.norm(b - a @ x)
    if relres > RESIDUAL_TOL:
        raise SolverFailureError(
            f"PCG stalled at relative residual {relres:.3e} (cap {maxiter} iterations)",
            residual=relres, iterations=maxiter if info > 0 else info)
    return x


def observe(mesh, h, points):
    """Interpolate nodal heads at observation points.

    Each point is resolved to the first element (in element order)
    whose barycentric coordinates are all >= -1e-12, so points on
    shared edges are owned deterministically; continuity of the P1
    interpolant makes the value independent of that choice.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (mesh.n_nodes,):
        raise InvalidArgumentError("head vector length does not match mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidArgumentError("observation points must be (P, 2)")
    eps = 1e-12
    if np.any(pts < -eps) or np.any(pts > 1.0 + eps):
        raise OutOfDomainError("observation point outside the unit square")
    geom = _geometry(mesh)
    two_area = geom["two_area"][:, None]
    out = np.empty(pts.shape[0])
    for i, (px, py) in enumerate(pts):
        lam = (geom["a"] + geom["b"] * px + geom["c"] * py) / two_area
        inside = np.flatnonzero((lam >= -eps).all(axis=1))
        if inside.size == 0:
            raise OutOfDomainError(f"point ({px}, {py}) not inside any element")
        e = inside[0]
        out[i] = lam[e] @ h[mesh.elements[e]]
    return out


# ---------------------------------------------------------------------------
# serialization

def mesh_to_dict(mesh):
    return {"nodes": mesh.nodes.tolist(),
            "elements": mesh.elements.tolist(),
            "markers": [MARKER_NAMES[c] for c in mesh.markers.tolist()]}


def mesh_hash(mesh):
    """SHA-256 of the canonical JSON encoding; identifies a mesh in
    downstream artifacts."""
    payload = json.dumps(mesh_to_dict(mesh), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def save_mesh(path, mesh):
    with open(path, "w") as f:
        json.dump(mesh_to_dict(mesh), f, sort_keys=True, separators=(",", ":"))


def load_mesh(path):
    with open(path) as f:
        data = json.load(f)
    try:
        nodes = np.asarray(data["nodes"], dtype=np.float64)
        elements = np.asarray(data["elements"], dtype=np.int32)
        markers = np.asarray([MARKER_CODES[m] for m in data["markers"]], dtype=np.int8)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed mesh file {path}: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != 2 or elements.ndim != 2 \
            or elements.shape[1] != 3 or markers.shape[0] != nodes.shape[0]:
        raise InvalidArgumentError(f"malformed mesh file {path}: bad shapes")
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= nodes.shape[0]:
        raise InvalidArgumentError(f"malformed mesh file {path}: element index out of range")
    return Mesh(nodes=nodes, elements=elements, markers=markers)


def save_head_csv(path, h):
    """One head value per line, node order, full float64 precision."""
    np.savetxt(path, np.asarray(h, dtype=np.float64), fmt="%.17g")


def load_head_csv(path):
    h = np.loadtxt(path, dtype=np.float64)
    return np.atleast_1d(h)
