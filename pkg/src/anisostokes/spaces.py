"""Degree-of-freedom maps, interface traces, and weighted norms.

Velocity: continuous piecewise-linear vector field plus one interior bubble
per cell and component (the MINI pair), DOFs interleaved node-major as
node*dim + comp with bubbles numbered after the vertices.  Pressure:
piecewise linear, continuous within each subdomain and duplicated across the
interface.  Trace space: piecewise linear on the interface facets, one DOF
per interface vertex and component, vertices ordered lexicographically by
coordinate so trace data is comparable across meshes sharing an interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh
from .quadrature import grundmann_moller

BUBBLE_SCALE = {2: 27.0, 3: 256.0}


@dataclass
class CellGeometry:
    """Per-cell reference data: barycentric gradients and volumes."""

    grads: np.ndarray  # (nc, dim+1, dim)
    volumes: np.ndarray  # (nc,)

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "CellGeometry":
        v = mesh.vertices[mesh.cells]
        edges = np.swapaxes(v[:, 1:, :] - v[:, :1, :], 1, 2)  # (nc, dim, dim) columns
        inv = np.linalg.inv(edges)  # row k of T^-1 is grad lambda_{k+1}
        g_rest = inv
        g0 = -g_rest.sum(axis=1, keepdims=True)
        grads = np.concatenate([g0, g_rest], axis=1)
        vols = np.linalg.det(edges) / np.prod(range(1, mesh.dim + 1))
        return cls(grads=grads, volumes=vols)


@dataclass
class FunctionSpaces:
    """DOF bookkeeping for the velocity/pressure/trace triple on one mesh."""

    mesh: Mesh
    velocity_bubbles: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mesh = self.mesh
        self.dim = mesh.dim
        self.n_vertices = mesh.num_vertices
        self.n_cells = mesh.num_cells
        self.n_scalar = self.n_vertices + (self.n_cells if self.velocity_bubbles else 0)
        self.n_velocity = self.dim * self.n_scalar

        plus_verts = np.unique(mesh.cells[mesh.cell_tags > 0])
        minus_verts = np.unique(mesh.cells[mesh.cell_tags < 0])
        self.p_plus = np.full(self.n_vertices, -1, dtype=int)
        self.p_minus = np.full(self.n_vertices, -1, dtype=int)
        k = 0
        on_plus = np.zeros(self.n_vertices, dtype=bool)
        on_minus = np.zeros(self.n_vertices, dtype=bool)
        on_plus[plus_verts] = True
        on_minus[minus_verts] = True
        for v in range(self.n_vertices):
            if on_plus[v]:
                self.p_plus[v] = k
                k += 1
            if on_minus[v]:
                self.p_minus[v] = k
                k += 1
        self.n_pressure = k

        iverts = np.unique(mesh.interface_facets) if len(mesh.interface_facets) else np.zeros(0, int)
        order = np.lexsort(mesh.vertices[iverts].T[::-1]) if len(iverts) else np.zeros(0, int)
        self.interface_vertices = iverts[order]
        self.iv_local = {int(v): i for i, v in enumerate(self.interface_vertices)}
        self.n_trace = self.dim * len(self.interface_vertices)

        self.outer_vertices = (
            np.unique(mesh.outer_facets) if len(mesh.outer_facets) else np.zeros(0, int)
        )

    # --- indexing helpers -------------------------------------------------
    def vdof(self, node, comp):
        return np.asarray(node) * self.dim + comp

    def bubble_node(self, cell):
        if not self.velocity_bubbles:
            raise ValueError("space has no bubbles")
        return self.n_vertices + np.asarray(cell)

    def tdof(self, local_vertex, comp):
        return np.asarray(local_vertex) * self.dim + comp

    def velocity_trace_dofs(self) -> np.ndarray:
        """Velocity DOF index for each trace DOF, in trace order."""
        iv = self.interface_vertices
        out = np.empty(self.n_trace, dtype=int)
        for c in range(self.dim):
            out[c :: self.dim] = iv * self.dim + c
        return out

    def side_scalar_nodes(self, side: int) -> np.ndarray:
        """Vertex+bubble node indices whose basis functions touch the side."""
        cells = np.nonzero(self.mesh.cell_tags == side)[0]
        verts = np.unique(self.mesh.cells[cells])
        if self.velocity_bubbles:
            return np.concatenate([verts, self.n_vertices + cells])
        return verts

    def side_velocity_dofs(self, side: int) -> np.ndarray:
        nodes = self.side_scalar_nodes(side)
        return (nodes[:, None] * self.dim + np.arange(self.dim)[None, :]).ravel()

    def geometry(self) -> CellGeometry:
        if "geom" not in self._cache:
            self._cache["geom"] = CellGeometry.from_mesh(self.mesh)
        return self._cache["geom"]

    # --- interface matrices ----------------------------------------------
    def _facet_frames(self):
        """Per-facet areas and in-plane P1 gradients of the facet hats."""
        if "facet_frames" in self._cache:
            return self._cache["facet_frames"]
        mesh = self.mesh
        pts = mesh.vertices[mesh.interface_facets]
        areas, _ = mesh.interface_geometry()
        grads = np.zeros((len(pts), mesh.dim, mesh.dim))  # (nf, dim verts, dim coords)
        for f, p in enumerate(pts):
            E = (p[1:] - p[0]).T  # (dim, dim-1)
            Gp = E @ np.linalg.inv(E.T @ E)  # parametric gradient lift
            grads[f, 1:, :] = Gp.T
            grads[f, 0, :] = -Gp.T.sum(axis=0)
        diam = np.zeros(len(pts))
        m = mesh.dim
        for a in range(m):
            for b in range(a + 1, m):
                diam = np.maximum(diam, np.linalg.norm(pts[:, a] - pts[:, b], axis=1))
        self._cache["facet_frames"] = (areas, grads, diam)
        return self._cache["facet_frames"]

    def _scalar_surface_matrix(self, weight: str) -> sp.csr_matrix:
        mesh = self.mesh
        areas, grads, diam = self._facet_frames()
        d = mesh.dim  # facet has d vertices
        rows, cols, vals = [], [], []
        mass_loc = (np.ones((d, d)) + np.eye(d)) / (d * (d + 1))
        for f, facet in enumerate(mesh.interface_facets):
            loc = [self.iv_local[int(v)] for v in facet]
            if weight == "mass":
                M = areas[f] * mass_loc
            elif weight == "hmass":
                M = diam[f] * areas[f] * mass_loc
            elif weight == "stiffness":
                M = areas[f] * grads[f] @ grads[f].T
            else:
                raise ValueError(weight)
            for a in range(d):
                for b in range(d):
                    rows.append(loc[a])
                    cols.append(loc[b])
                    vals.append(M[a, b])
        n = len(self.interface_vertices)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def _vectorize(self, M: sp.csr_matrix) -> sp.csr_matrix:
        """Expand a scalar interface matrix to interleaved vector DOFs."""
        return sp.kron(M, sp.eye(self.dim), format="csr")

    def interface_mass(self, vector=True) -> sp.csr_matrix:
        key = ("imass", vector)
        if key not in self._cache:
            M = self._scalar_surface_matrix("mass")
            self._cache[key] = self._vectorize(M) if vector else M
        return self._cache[key]

    def interface_stiffness(self, vector=True) -> sp.csr_matrix:
        key = ("istiff", vector)
        if key not in self._cache:
            K = self._scalar_surface_matrix("stiffness")
            self._cache[key] = self._vectorize(K) if vector else K
        return self._cache[key]

    def interface_hmass(self, vector=True) -> sp.csr_matrix:
        key = ("ihmass", vector)
        if key not in self._cache:
            M = self._scalar_surface_matrix("hmass")
            self._cache[key] = self._vectorize(M) if vector else M
        return self._cache[key]

    def interface_mass_solver(self):
        if "imass_lu" not in self._cache:
            self._cache["imass_lu"] = splu(self.interface_mass().tocsc())
        return self._cache["imass_lu"]


def build_spaces(mesh: Mesh, velocity_bubbles: bool = True) -> FunctionSpaces:
    """Construct the DOF maps for `mesh` (MINI by default, P1/P1 if not)."""
    return FunctionSpaces(mesh=mesh, velocity_bubbles=velocity_bubbles)


# --- fields ---------------------------------------------------------------
@dataclass
class FieldPair:
    """Discrete (velocity, pressure) with per-side velocity views.

    For globally continuous velocity the two views coincide; double layer
    potentials carry a nodal jump and differ at interface DOFs.
    """

    spaces: FunctionSpaces
    u_plus: np.ndarray
    u_minus: np.ndarray
    p: np.ndarray

    @classmethod
    def continuous(cls, spaces, u, p):
        u = np.asarray(u, dtype=float)
        return cls(spaces=spaces, u_plus=u, u_minus=u, p=np.asarray(p, dtype=float))

    @classmethod
    def zero(cls, spaces):
        u = np.zeros(spaces.n_velocity)
        return cls.continuous(spaces, u, np.zeros(spaces.n_pressure))

    def velocity(self, side: int) -> np.ndarray:
        return self.u_plus if side > 0 else self.u_minus

    def velocity_jump_dofs(self) -> np.ndarray:
        return self.u_plus - self.u_minus

    def pressure_vertex_values(self, side: int) -> np.ndarray:
        """Nodal pressure on the side's vertices (nan where absent)."""
        idx = self.spaces.p_plus if side > 0 else self.spaces.p_minus
        out = np.full(self.spaces.n_vertices, np.nan)
        present = idx >= 0
        out[present] = self.p[idx[present]]
        return out


@dataclass
class TraceField:
    """Nodal values of a piecewise-linear interface function."""

    spaces: FunctionSpaces
    values: np.ndarray

    def norm_l2(self) -> float:
        M = self.spaces.interface_mass()
        return float(np.sqrt(abs(self.values @ (M @ self.values))))

    def norm_half(self) -> float:
        """Surrogate H^{1/2} norm: (L2^2 + surface H1 seminorm^2)^{1/2}."""
        M = self.spaces.interface_mass()
        K = self.spaces.interface_stiffness()
        v = self.values
        return float(np.sqrt(abs(v @ (M @ v)) + abs(v @ (K @ v))))


@dataclass
class TraceDensity:
    """Functional on the trace space stored by its moment vector.

    moments[i] is the action on the i-th trace basis function; the Riesz
    representative through the interface mass matrix gives a plottable
    TraceField and backs the surrogate H^{-1/2} norm.
    """

    spaces: FunctionSpaces
    moments: np.ndarray

    def pair(self, phi: TraceField | np.ndarray) -> float:
        vals = phi.values if isinstance(phi, TraceField) else np.asarray(phi)
        return float(self.moments @ vals)

    def representative(self) -> TraceField:
        lu = self.spaces.interface_mass_solver()
        return TraceField(self.spaces, lu.solve(self.moments))

    def norm_minus_half(self) -> float:
        """Facet-diameter-weighted L2 norm of the Riesz representative."""
        r = self.representative().values
        Mh = self.spaces.interface_hmass()
        return float(np.sqrt(abs(r @ (Mh @ r))))


def trace(obj, side: int, spaces: FunctionSpaces | None = None) -> TraceField:
    """Nodal restriction of a velocity (or FieldPair) to the interface."""
    if isinstance(obj, FieldPair):
        spaces = obj.spaces
        u = obj.velocity(side)
    else:
        if spaces is None:
            raise ValueError("spaces required for raw coefficient vectors")
        u = np.asarray(obj, dtype=float)
    if len(spaces.interface_vertices) == 0:
        raise ValueError("mesh has an empty interface")
    return TraceField(spaces, u[spaces.velocity_trace_dofs()])


def density_from_function(spaces: FunctionSpaces, func, degree: int = 4) -> TraceDensity:
    """Moments of an analytic interface function against the trace basis."""
    mesh = spaces.mesh
    B, w = grundmann_moller(mesh.dim - 1, degree)
    areas, _ = mesh.interface_geometry()
    r = np.zeros(spaces.n_trace)
    for f, facet in enumerate(mesh.interface_facets):
        pts = B @ mesh.vertices[facet]
        vals = np.asarray([func(p) for p in pts])  # (nq, dim)
        loc = [spaces.iv_local[int(v)] for v in facet]
        for a in range(mesh.dim):
            contrib = areas[f] * np.einsum("q,qd->d", w * B[:, a], vals)
            r[spaces.tdof(loc[a], np.arange(mesh.dim))] += contrib
    return TraceDensity(spaces, r)


def normal_density(spaces: FunctionSpaces) -> TraceDensity:
    """The outward normal nu as a trace density (exact facet moments)."""
    mesh = spaces.mesh
    areas, normals = mesh.interface_geometry()
    r = np.zeros(spaces.n_trace)
    d = mesh.dim
    for f, facet in enumerate(mesh.interface_facets):
        loc = [spaces.iv_local[int(v)] for v in facet]
        share = areas[f] / d  # exact for P1 against a per-facet constant
        for a in range(d):
            r[spaces.tdof(loc[a], np.arange(d))] += share * normals[f]
    return TraceDensity(spaces, r)


def trace_field_from_function(spaces: FunctionSpaces, func) -> TraceField:
    vals = np.zeros(spaces.n_trace)
    for k, v in enumerate(spaces.interface_vertices):
        vals[spaces.tdof(k, np.arange(spaces.dim))] = np.asarray(func(spaces.mesh.vertices[v]))
    return TraceField(spaces, vals)


# --- quadrature evaluation of discrete fields ------------------------------
def _bubble_values(bary: np.ndarray, dim: int) -> np.ndarray:
    return BUBBLE_SCALE[dim] * np.prod(bary, axis=1)


def evaluate_velocity(spaces, u, cells, bary):
    """Values of a discrete velocity on `cells` at barycentric points.

    Returns (ncells, nq, dim).
    """
    mesh = spaces.mesh
    conn = mesh.cells[cells]
    coeffs = u.reshape(-1, spaces.dim)
    vert_vals = np.einsum("qa,cad->cqd", bary, coeffs[conn])
    if spaces.velocity_bubbles:
        bub = _bubble_values(bary, spaces.dim)
        vert_vals += bub[None, :, None] * coeffs[spaces.bubble_node(cells)][:, None, :]
    return vert_vals


def evaluate_velocity_gradient(spaces, u, cells, bary):
    """Gradients G[c, q, i, b] = d_b u_i on `cells` at barycentric points."""
    geom = spaces.geometry()
    mesh = spaces.mesh
    conn = mesh.cells[cells]
    coeffs = u.reshape(-1, spaces.dim)
    g = geom.grads[cells]  # (nc, dim+1, dim)
    G = np.einsum("cad,cai->cid", g, coeffs[conn])[:, None, :, :]
    G = np.repeat(G, len(bary), axis=1)
    if spaces.velocity_bubbles:
        scale = BUBBLE_SCALE[spaces.dim]
        prods = np.stack(
            [np.prod(np.delete(bary, k, axis=1), axis=1) for k in range(spaces.dim + 1)],
            axis=1,
        )  # (nq, dim+1)
        bub_grad = scale * np.einsum("qa,cad->cqd", prods, g)
        bc = coeffs[spaces.bubble_node(cells)]
        G = G + np.einsum("cqd,ci->cqid", bub_grad, bc)
    return G


def evaluate_p1_scalar(spaces, vals, cells, bary):
    conn = spaces.mesh.cells[cells]
    return np.einsum("qa,ca->cq", bary, np.asarray(vals)[conn])


def rho_squared_inv(points: np.ndarray) -> np.ndarray:
    """1 / rho(x)^2 with rho(x) = (1 + |x|^2)^{1/2}."""
    return 1.0 / (1.0 + np.sum(points**2, axis=-1))


def weighted_norm(f, kind: str, spaces: FunctionSpaces, degree: int = 6) -> float:
    """Quadrature evaluation of the weighted norms on the truncated box.

    kinds: "rho-weighted-L2" is ||rho^-1 f||_L2(B_R); "gradient-L2" is the
    broken gradient seminorm summed over the subdomains; "full-H1-weighted"
    combines both in the p=2 sense.  `f` may be a FieldPair, a velocity
    coefficient vector, or a P1 scalar vertex array.
    """
    if kind not in ("rho-weighted-L2", "gradient-L2", "full-H1-weighted"):
        raise ValueError(f"unknown norm kind {kind!r}")
    mesh = spaces.mesh
    B, w = grundmann_moller(mesh.dim, degree)
    geom = spaces.geometry()
    total_l2 = 0.0
    total_grad = 0.0
    for side in (1, -1):
        cells = np.nonzero(mesh.cell_tags == side)[0]
        if len(cells) == 0:
            continue
        pts = np.einsum("qa,cad->cqd", B, mesh.vertices[mesh.cells[cells]])
        vols = geom.volumes[cells]
        if isinstance(f, FieldPair):
            u = f.velocity(side)
            scalar = False
        else:
            u = np.asarray(f, dtype=float)
            scalar = u.shape[0] == spaces.n_vertices
        if kind in ("rho-weighted-L2", "full-H1-weighted"):
            rho2 = rho_squared_inv(pts)
            if scalar:
                vals2 = evaluate_p1_scalar(spaces, u, cells, B) ** 2
            else:
                vals2 = np.sum(evaluate_velocity(spaces, u, cells, B) ** 2, axis=2)
            total_l2 += float(np.einsum("cq,q,c->", rho2 * vals2, w, vols))
        if kind in ("gradient-L2", "full-H1-weighted"):
            if scalar:
                g = geom.grads[cells]
                conn = mesh.cells[cells]
                gv = np.einsum("cad,ca->cd", g, u[conn])
                total_grad += float(np.einsum("cd,cd,c->", gv, gv, vols))
            else:
                G = evaluate_velocity_gradient(spaces, u, cells, B)
                total_grad += float(np.einsum("cqid,cqid,q,c->", G, G, w, vols))
    if kind == "rho-weighted-L2":
        return float(np.sqrt(total_l2))
    if kind == "gradient-L2":
        return float(np.sqrt(total_grad))
    return float(np.sqrt(total_l2 + total_grad))
