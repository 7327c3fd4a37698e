"""Bilinear forms, load functionals, and the variational conormal derivative.

Coefficients are sampled once per cell (centroid); with that freezing every
integrand is a polynomial in barycentric coordinates, so the local matrices
below are exact (factorial formula), including the MINI bubble blocks.  The
bubble is stiffness-orthogonal to the linears for frozen coefficients, which
the local constructor exploits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .quadrature import barycentric_monomial_integral, grundmann_moller
from .spaces import (
    BUBBLE_SCALE,
    FunctionSpaces,
    TraceDensity,
    evaluate_velocity,
    evaluate_velocity_gradient,
    rho_squared_inv,
)
from .tensor import CoeffTensor
import warnings


@dataclass
class LoadFunctional:
    """Moment vector over velocity DOFs with a provenance tag."""

    spaces: FunctionSpaces
    moments: np.ndarray
    tag: str = "volume-force"
    side: int = 0  # +1 / -1 support, 0 for global

    def __post_init__(self):
        self.moments = np.asarray(self.moments, dtype=float)
        if self.moments.shape != (self.spaces.n_velocity,):
            raise ValueError("moment vector length mismatch")
        if not np.all(np.isfinite(self.moments)):
            raise ValueError("non-finite load moments")

    @classmethod
    def zero(cls, spaces, tag="zero", side=0):
        return cls(spaces, np.zeros(spaces.n_velocity), tag=tag, side=side)

    def __add__(self, other: "LoadFunctional") -> "LoadFunctional":
        side = self.side if self.side == other.side else 0
        return LoadFunctional(
            self.spaces, self.moments + other.moments, tag=f"{self.tag}+{other.tag}", side=side
        )

    def scaled(self, a: float) -> "LoadFunctional":
        return LoadFunctional(self.spaces, a * self.moments, tag=self.tag, side=self.side)


def evaluate_pointwise(func, pts: np.ndarray, dim: int) -> np.ndarray:
    """Evaluate a vector field on (..., dim) points, vectorized when possible."""
    try:
        out = np.asarray(func(pts), dtype=float)
        if out.shape == pts.shape:
            return out
    except Exception:
        pass
    flat = pts.reshape(-1, dim)
    out = np.asarray([func(x) for x in flat], dtype=float)
    return out.reshape(pts.shape)


def _tensor_samples(spaces: FunctionSpaces, tensor: CoeffTensor, cells: np.ndarray) -> np.ndarray:
    cents = spaces.mesh.cell_centroids()[cells]
    E = np.empty((len(cells), tensor.dim, tensor.dim, tensor.dim, tensor.dim))
    for k, x in enumerate(cents):
        E[k] = tensor.at(x)
    return E


def _grad_pair_integrals(spaces: FunctionSpaces, cells: np.ndarray) -> np.ndarray:
    """P[c, p, q, a, b] = integral over the cell of d_a N_p d_b N_q (exact)."""
    geom = spaces.geometry()
    dim = spaces.dim
    g = geom.grads[cells]  # (nc, dim+1, dim)
    V = geom.volumes[cells]
    nloc = dim + 1
    m = nloc + (1 if spaces.velocity_bubbles else 0)
    P = np.zeros((len(cells), m, m, dim, dim))
    P[:, :nloc, :nloc] = np.einsum("c,cpa,cqb->cpqab", V, g, g)
    if spaces.velocity_bubbles:
        scale = BUBBLE_SCALE[dim] ** 2
        i_kk = barycentric_monomial_integral((2,) * dim + (0,), dim)
        i_kl = barycentric_monomial_integral((1, 1) + (2,) * (dim - 1), dim)
        bub = scale * (i_kk - i_kl) * np.einsum("c,cka,ckb->cab", V, g, g)
        P[:, nloc, nloc] = bub
    return P


def _local_nodes(spaces: FunctionSpaces, cells: np.ndarray) -> np.ndarray:
    """Scalar node index per local basis function, (nc, m)."""
    conn = spaces.mesh.cells[cells]
    if spaces.velocity_bubbles:
        return np.concatenate([conn, spaces.bubble_node(cells)[:, None]], axis=1)
    return conn


def _assemble_gradgrad(spaces: FunctionSpaces, E: np.ndarray, cells: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of sum_cells int a_ij^{ab} d_b N_q^j d_a N_p^i."""
    dim = spaces.dim
    P = _grad_pair_integrals(spaces, cells)
    A_loc = np.einsum("cijab,cpqab->cpiqj", E, P)
    nodes = _local_nodes(spaces, cells)
    m = nodes.shape[1]
    dofs = nodes[:, :, None] * dim + np.arange(dim)[None, None, :]  # (nc, m, dim)
    rows = np.broadcast_to(dofs[:, :, :, None, None], A_loc.shape).ravel()
    cols = np.broadcast_to(dofs[:, None, None, :, :], A_loc.shape).ravel()
    N = spaces.n_velocity
    return sp.csr_matrix((A_loc.ravel(), (rows, cols)), shape=(N, N))


def assemble_a(spaces: FunctionSpaces, tensor: CoeffTensor, side: int | None = None) -> sp.csr_matrix:
    """Velocity-velocity form a(u, v) = <A^{ab} d_b u, d_a v>.

    Entry ((p,i),(q,j)) pairs trial (q,j) against test (p,i).  `side`
    restricts the integration to one subdomain; None assembles the whole box.
    Warns when a general tensor carries no ellipticity certificate.
    """
    if tensor.kind == "general" and tensor.certificate is None:
        warnings.warn("assembling with an uncertified general tensor", stacklevel=2)
    mesh = spaces.mesh
    cells = (
        np.arange(mesh.num_cells) if side is None else np.nonzero(mesh.cell_tags == side)[0]
    )
    E = _tensor_samples(spaces, tensor, cells)
    return _assemble_gradgrad(spaces, E, cells)


def velocity_stiffness(spaces: FunctionSpaces, side: int | None = None) -> sp.csr_matrix:
    """Plain gradient stiffness (identity tensor), used for norm Grams."""
    mesh = spaces.mesh
    cells = (
        np.arange(mesh.num_cells) if side is None else np.nonzero(mesh.cell_tags == side)[0]
    )
    dim = spaces.dim
    eye4 = np.einsum("ij,ab->ijab", np.eye(dim), np.eye(dim))
    E = np.broadcast_to(eye4, (len(cells),) + eye4.shape)
    return _assemble_gradgrad(spaces, E, cells)


def assemble_b(spaces: FunctionSpaces, side: int | None = None) -> sp.csr_matrix:
    """Pressure-velocity form b(v, q) = -<div v, q>, rows = pressure DOFs.

    Exact quadrature; the pressure test function of a cell is the copy that
    lives on the cell's side of the interface.
    """
    mesh = spaces.mesh
    dim = spaces.dim
    geom = spaces.geometry()
    sides = (side,) if side is not None else (1, -1)
    rows, cols, vals = [], [], []
    w_bub = BUBBLE_SCALE[dim] * barycentric_monomial_integral((1,) * (dim + 1), dim)
    for s in sides:
        cells = np.nonzero(mesh.cell_tags == s)[0]
        if len(cells) == 0:
            continue
        conn = mesh.cells[cells]
        g = geom.grads[cells]
        V = geom.volumes[cells]
        pmap = spaces.p_plus if s > 0 else spaces.p_minus
        pdofs = pmap[conn]  # (nc, dim+1)
        # P1 velocity block: -int lambda_p d_j lambda_q = -(V/(dim+1)) g_q[j]
        loc = -np.einsum("c,cqj->cqj", V / (dim + 1), g)
        for p in range(dim + 1):
            r = np.repeat(pdofs[:, p], (dim + 1) * dim)
            c = (conn[:, :, None] * dim + np.arange(dim)[None, None, :]).ravel()
            rows.append(r)
            cols.append(c)
            vals.append(loc.ravel())  # entry independent of the pressure hat p
        if spaces.velocity_bubbles:
            # -int lambda_p d_j bubble = + w_bub * V * g_p[j]
            locb = np.einsum("c,cpj->cpj", w_bub * V, g)
            bn = spaces.bubble_node(cells)
            r = pdofs.ravel().repeat(dim)
            c = np.broadcast_to(
                (bn[:, None] * dim + np.arange(dim)[None, :])[:, None, :],
                (len(cells), dim + 1, dim),
            ).ravel()
            rows.append(r)
            cols.append(c)
            vals.append(locb.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(spaces.n_pressure, spaces.n_velocity))


def velocity_rho_mass(spaces: FunctionSpaces, side: int | None = None, degree: int = 5) -> sp.csr_matrix:
    """Vector mass matrix weighted by rho^-2 (quadrature; a measuring stick)."""
    mesh = spaces.mesh
    dim = spaces.dim
    cells = (
        np.arange(mesh.num_cells) if side is None else np.nonzero(mesh.cell_tags == side)[0]
    )
    B, w = grundmann_moller(dim, degree)
    pts = np.einsum("qa,cad->cqd", B, mesh.vertices[mesh.cells[cells]])
    rho2 = rho_squared_inv(pts)  # (nc, nq)
    geom = spaces.geometry()
    V = geom.volumes[cells]
    nloc = dim + 1
    m = nloc + (1 if spaces.velocity_bubbles else 0)
    Nvals = np.zeros((len(B), m))
    Nvals[:, :nloc] = B
    if spaces.velocity_bubbles:
        Nvals[:, nloc] = BUBBLE_SCALE[dim] * np.prod(B, axis=1)
    M_loc = np.einsum("cq,q,qp,qr,c->cpr", rho2, w, Nvals, Nvals, V)
    nodes = _local_nodes(spaces, cells)
    N = spaces.n_velocity
    rows, cols, vals = [], [], []
    for comp in range(dim):
        dofs = nodes * dim + comp
        rows.append(np.broadcast_to(dofs[:, :, None], M_loc.shape).ravel())
        cols.append(np.broadcast_to(dofs[:, None, :], M_loc.shape).ravel())
        vals.append(M_loc.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )


def pressure_mass(spaces: FunctionSpaces, side: int | None = None) -> sp.csr_matrix:
    """Exact P1 mass on the (broken) pressure space."""
    mesh = spaces.mesh
    dim = spaces.dim
    geom = spaces.geometry()
    sides = (side,) if side is not None else (1, -1)
    rows, cols, vals = [], [], []
    base = (np.ones((dim + 1, dim + 1)) + np.eye(dim + 1)) / ((dim + 1) * (dim + 2))
    for s in sides:
        cells = np.nonzero(mesh.cell_tags == s)[0]
        if len(cells) == 0:
            continue
        pmap = spaces.p_plus if s > 0 else spaces.p_minus
        pdofs = pmap[mesh.cells[cells]]
        M_loc = np.einsum("c,pq->cpq", geom.volumes[cells], base)
        rows.append(np.broadcast_to(pdofs[:, :, None], M_loc.shape).ravel())
        cols.append(np.broadcast_to(pdofs[:, None, :], M_loc.shape).ravel())
        vals.append(M_loc.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(spaces.n_pressure, spaces.n_pressure),
    )


def velocity_h1_gram(spaces: FunctionSpaces, side: int | None = None) -> sp.csr_matrix:
    """Weighted H1 Gram: gradient stiffness + rho-weighted mass."""
    return (velocity_stiffness(spaces, side) + velocity_rho_mass(spaces, side)).tocsr()


def boundary_pairing(psi: TraceDensity, spaces: FunctionSpaces) -> LoadFunctional:
    """The functional v -> <psi, gamma v> over velocity DOFs.

    Supported on interface velocity DOFs only (bubbles have no trace).
    """
    if len(spaces.interface_vertices) == 0:
        raise ValueError("mesh has an empty interface")
    moments = np.zeros(spaces.n_velocity)
    moments[spaces.velocity_trace_dofs()] = psi.moments
    return LoadFunctional(spaces, moments, tag="boundary-pairing")


def outer_boundary_moments(spaces: FunctionSpaces) -> sp.csr_matrix:
    """Constraint rows C (dim x Nu): C[c] v = integral of v_c over the outer boundary."""
    mesh = spaces.mesh
    dim = spaces.dim
    areas, _ = mesh.outer_geometry()
    weights = np.zeros(spaces.n_vertices)
    for f, facet in enumerate(mesh.outer_facets):
        weights[facet] += areas[f] / dim  # int of a hat over the facet
    rows, cols, vals = [], [], []
    nz = np.nonzero(weights)[0]
    for c in range(dim):
        rows.append(np.full(len(nz), c))
        cols.append(nz * dim + c)
        vals.append(weights[nz])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, spaces.n_velocity),
    )


def assemble_convection(
    spaces: FunctionSpaces,
    lam,
    v: np.ndarray,
    w: np.ndarray | None = None,
    degree: int = 6,
) -> LoadFunctional:
    """Moments of the zero-extended convection load E+(lam (v . grad) w).

    `lam` is a scalar field on Omega_plus (callable or constant); per-cell
    arrays are accepted but must vanish on minus cells.  With w omitted this
    is the quadratic load of the momentum equation.
    """
    mesh = spaces.mesh
    dim = spaces.dim
    if w is None:
        w = v
    cells = np.nonzero(mesh.cell_tags > 0)[0]
    if isinstance(lam, np.ndarray) and lam.shape == (mesh.num_cells,):
        if np.any(lam[mesh.cell_tags < 0] != 0.0):
            raise ValueError("convection coefficient defined on minus cells")
        lam_cells = lam[cells]
    elif callable(lam):
        cents = mesh.cell_centroids()[cells]
        lam_cells = np.asarray([float(lam(x)) for x in cents])
    else:
        lam_cells = np.full(len(cells), float(lam))
    B, wq = grundmann_moller(dim, degree)
    vv = evaluate_velocity(spaces, np.asarray(v, float), cells, B)  # (nc, nq, dim)
    Gw = evaluate_velocity_gradient(spaces, np.asarray(w, float), cells, B)  # (nc,nq,i,b)
    conv = np.einsum("cqb,cqib->cqi", vv, Gw)  # (v . grad) w
    geom = spaces.geometry()
    V = geom.volumes[cells]
    nloc = dim + 1
    m = nloc + (1 if spaces.velocity_bubbles else 0)
    Nvals = np.zeros((len(B), m))
    Nvals[:, :nloc] = B
    if spaces.velocity_bubbles:
        Nvals[:, nloc] = BUBBLE_SCALE[dim] * np.prod(B, axis=1)
    loc = np.einsum("c,c,q,cqi,qp->cpi", lam_cells, V, wq, conv, Nvals)
    nodes = _local_nodes(spaces, cells)
    moments = np.zeros(spaces.n_velocity)
    np.add.at(moments, (nodes[:, :, None] * dim + np.arange(dim)[None, None, :]).ravel(), loc.ravel())
    return LoadFunctional(spaces, moments, tag="convection", side=+1)


def volume_load(spaces: FunctionSpaces, force, side: int | None = None, degree: int = 6) -> LoadFunctional:
    """Moments of an analytic volume force against the velocity basis."""
    mesh = spaces.mesh
    dim = spaces.dim
    cells = (
        np.arange(mesh.num_cells) if side is None else np.nonzero(mesh.cell_tags == side)[0]
    )
    B, wq = grundmann_moller(dim, degree)
    pts = np.einsum("qa,cad->cqd", B, mesh.vertices[mesh.cells[cells]])
    fv = evaluate_pointwise(force, pts, dim)
    geom = spaces.geometry()
    V = geom.volumes[cells]
    nloc = dim + 1
    m = nloc + (1 if spaces.velocity_bubbles else 0)
    Nvals = np.zeros((len(B), m))
    Nvals[:, :nloc] = B
    if spaces.velocity_bubbles:
        Nvals[:, nloc] = BUBBLE_SCALE[dim] * np.prod(B, axis=1)
    loc = np.einsum("c,q,cqi,qp->cpi", V, wq, fv, Nvals)
    nodes = _local_nodes(spaces, cells)
    moments = np.zeros(spaces.n_velocity)
    np.add.at(moments, (nodes[:, :, None] * dim + np.arange(dim)[None, None, :]).ravel(), loc.ravel())
    tag = "volume-force"
    return LoadFunctional(spaces, moments, tag=tag, side=0 if side is None else side)


@dataclass
class VolumeForms:
    """Cached per-side form matrices for one (spaces, tensor) pair."""

    spaces: FunctionSpaces
    tensor: CoeffTensor
    _cache: dict = field(default_factory=dict, repr=False)

    def a(self, side: int | None = None) -> sp.csr_matrix:
        key = ("a", side)
        if key not in self._cache:
            if side is None:
                self._cache[key] = (self.a(1) + self.a(-1)).tocsr()
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    self._cache[key] = assemble_a(self.spaces, self.tensor, side)
        return self._cache[key]

    def b(self, side: int | None = None) -> sp.csr_matrix:
        key = ("b", side)
        if key not in self._cache:
            if side is None:
                self._cache[key] = (self.b(1) + self.b(-1)).tocsr()
            else:
                self._cache[key] = assemble_b(self.spaces, side)
        return self._cache[key]

    def adjoint(self) -> "VolumeForms":
        """Forms of the adjoint tensor: transposes of the a-blocks."""
        from .tensor import adjoint as tensor_adjoint

        if "adjoint" not in self._cache:
            adj = VolumeForms(self.spaces, tensor_adjoint(self.tensor))
            for side in (1, -1):
                adj._cache[("a", side)] = self.a(side).T.tocsr()
                adj._cache[("b", side)] = self.b(side)
            self._cache["adjoint"] = adj
        return self._cache["adjoint"]


def conormal_derivative(
    forms: VolumeForms,
    u_side: np.ndarray,
    p: np.ndarray,
    f_side: LoadFunctional | None,
    side: int,
) -> TraceDensity:
    """Canonical boundary flux T_side of the triple (u, pi, f~).

    Defined through the discrete Green identity: the returned density's
    moment on the k-th trace basis function is +-[A_side u + B_side^T pi +
    f~] at the matching interface velocity DOF (the canonical hat
    extension).  For PDE-consistent triples this is extension independent;
    `conormal_residual` measures the defect for anything else.
    """
    dens, _ = conormal_with_residual(forms, u_side, p, f_side, side)
    return dens


def conormal_with_residual(forms, u_side, p, f_side, side):
    spaces = forms.spaces
    R = forms.a(side) @ u_side + forms.b(side).T @ p
    if f_side is not None:
        R = R + f_side.moments
    tdofs = spaces.velocity_trace_dofs()
    moments = float(side) * R[tdofs]
    side_dofs = spaces.side_velocity_dofs(side)
    interior = np.setdiff1d(side_dofs, tdofs, assume_unique=False)
    resid = float(np.linalg.norm(R[interior]))
    return TraceDensity(spaces, moments), resid
