"""Interface-fitted simplicial meshes of the truncated two-phase domain.

The computational domain is a box of half-width R around the inclusion
Omega_plus (unit cube by default, a staircase ball as the alternative).  A
structured per-axis partition is fitted to the inclusion boundary, every
hex/quad is split into simplices by the Kuhn pattern, and cells are tagged
by side.  The interface is then exactly a union of facets.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

#: cells per axis of the base (level-0) partition, per shape
CUBE_BASE_CELLS = 4
BALL_BASE_CELLS = 6
MAX_CELLS = 400_000


@dataclass(frozen=True)
class MeshSpec:
    """Shape/size/refinement request for `build_interface_mesh`."""

    shape: str = "cube"  # "cube" | "ball"
    radius: float = 4.0  # truncation half-width R
    level: int = 1
    dim: int = 3

    def __post_init__(self):
        if self.shape not in ("cube", "ball"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if self.radius <= self.inclusion_diameter():
            raise ValueError(
                f"truncation radius R={self.radius} must exceed "
                f"diam(Omega_plus)={self.inclusion_diameter():.6g}"
            )

    def inclusion_diameter(self) -> float:
        if self.shape == "cube":
            return float(np.sqrt(self.dim))
        return 2.0

    def center(self) -> np.ndarray:
        if self.shape == "cube":
            return np.full(self.dim, 0.5)
        return np.zeros(self.dim)


@dataclass
class Mesh:
    """Simplicial two-phase mesh with tagged interface and outer boundary.

    `cells` are (n+1)-tuples of vertex indices ordered for positive volume;
    `cell_tags` is +1 on Omega_plus, -1 on the truncated exterior.  Facets
    are stored as vertex-index tuples together with their incident cells
    (interface: [plus_cell, minus_cell]; outer: the single minus cell).
    Geometry (normals, areas, volumes) is derived from the arrays on demand
    so it never depends on vertex ordering inside a cell tuple.
    """

    dim: int
    vertices: np.ndarray  # (nv, dim)
    cells: np.ndarray  # (nc, dim+1) int
    cell_tags: np.ndarray  # (nc,) +1 / -1
    interface_facets: np.ndarray  # (nif, dim) int
    interface_cells: np.ndarray  # (nif, 2) [plus, minus]
    outer_facets: np.ndarray  # (nof, dim) int
    outer_cells: np.ndarray  # (nof,)
    R: float
    spec: MeshSpec | None = None
    _geom: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    def cell_volumes(self) -> np.ndarray:
        v = self.vertices[self.cells]
        edges = v[:, 1:, :] - v[:, :1, :]
        det = np.linalg.det(edges)
        return det / _factorial(self.dim)

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @property
    def h_max(self) -> float:
        key = "h_max"
        if key not in self._geom:
            v = self.vertices[self.cells]
            h = 0.0
            for a, b in itertools.combinations(range(self.dim + 1), 2):
                h = max(h, float(np.max(np.linalg.norm(v[:, a] - v[:, b], axis=1))))
            self._geom[key] = h
        return self._geom[key]

    def interface_geometry(self):
        """(areas, unit normals) of the interface facets, plus -> minus."""
        key = "interface_geom"
        if key not in self._geom:
            self._geom[key] = _facet_geometry(
                self, self.interface_facets, self.interface_cells[:, 0], outward=True
            )
        return self._geom[key]

    def outer_geometry(self):
        """(areas, unit normals) of the outer facets, pointing out of the box."""
        key = "outer_geom"
        if key not in self._geom:
            self._geom[key] = _facet_geometry(
                self, self.outer_facets, self.outer_cells, outward=True
            )
        return self._geom[key]


def _factorial(n: int) -> int:
    return 1 if n <= 1 else n * _factorial(n - 1)


def _facet_geometry(mesh: Mesh, facets: np.ndarray, ref_cells: np.ndarray, outward: bool):
    """Areas and unit normals oriented away from the referenced cells."""
    pts = mesh.vertices[facets]
    if mesh.dim == 3:
        cr = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
        areas = 0.5 * np.linalg.norm(cr, axis=1)
        normals = cr / np.linalg.norm(cr, axis=1)[:, None]
    else:
        e = pts[:, 1] - pts[:, 0]
        areas = np.linalg.norm(e, axis=1)
        normals = np.stack([e[:, 1], -e[:, 0]], axis=1) / areas[:, None]
    centers = pts.mean(axis=1)
    refc = mesh.vertices[mesh.cells[ref_cells]].mean(axis=1)
    flip = np.einsum("fd,fd->f", normals, centers - refc) < 0
    normals[flip] *= -1.0
    if not outward:
        normals *= -1.0
    return areas, normals


def _axis_points(spec: MeshSpec) -> np.ndarray:
    """1D partition fitted to the inclusion, refined 2^level per base cell."""
    c = 0.5 if spec.shape == "cube" else 0.0
    lo, hi = c - spec.radius, c + spec.radius
    if spec.shape == "cube":
        base = [lo, 0.0, 0.5, 1.0, hi]
    else:
        base = [lo, -1.0, -0.5, 0.0, 0.5, 1.0, hi]
    pts = []
    k = 2**spec.level
    for a, b in zip(base[:-1], base[1:]):
        pts.extend(a + (b - a) * i / k for i in range(k))
    pts.append(hi)
    return np.asarray(pts)


_KUHN_PERMS = {
    2: list(itertools.permutations(range(2))),
    3: list(itertools.permutations(range(3))),
}


def build_interface_mesh(spec: MeshSpec) -> Mesh:
    """Build the fitted simplicial mesh for `spec`.

    Deterministic for a given spec: the tensor-product grid is subdivided by
    the Kuhn (Freudenthal) pattern, 6 tets per hex (2 triangles per quad),
    which is conforming across cells; every simplex inherits the tag of its
    hex, decided by the hex center against the inclusion.

    Raises on degenerate geometry and when the cell count would exceed the
    desk-scale limit.
    """
    dim = spec.dim
    axis = _axis_points(spec)
    npts = len(axis)
    ncell_axis = npts - 1
    nhex = ncell_axis**dim
    if nhex * _factorial(dim) > MAX_CELLS:  # dim! simplices per hex
        raise ValueError(f"refinement level {spec.level} exceeds the cell budget")

    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    vertices = np.stack([g.ravel() for g in grids], axis=1)

    def vid(idx):  # idx: (dim,) integer grid coordinates
        out = idx[..., 0]
        for d in range(1, dim):
            out = out * npts + idx[..., d]
        return out

    lows = np.stack(
        np.meshgrid(*([np.arange(ncell_axis)] * dim), indexing="ij"), axis=-1
    ).reshape(-1, dim)
    centers = (axis[lows] + axis[lows + 1]) / 2.0

    if spec.shape == "cube":
        inside = np.all((centers > 0.0) & (centers < 1.0), axis=1)
    else:
        inside = np.linalg.norm(centers, axis=1) <= 1.0
    if not inside.any():
        raise ValueError("degenerate geometry: inclusion contains no cells")

    cells = []
    tags = []
    for perm in _KUHN_PERMS[dim]:
        corners = [lows]
        cur = lows
        for p in perm:
            step = np.zeros(dim, dtype=int)
            step[p] = 1
            cur = cur + step
            corners.append(cur)
        simplex = np.stack([vid(c) for c in corners], axis=1)
        cells.append(simplex)
        tags.append(np.where(inside, 1, -1))
    cells = np.concatenate(cells, axis=0)
    tags = np.concatenate(tags, axis=0)

    mesh = Mesh(
        dim=dim,
        vertices=vertices,
        cells=cells,
        cell_tags=tags,
        interface_facets=np.zeros((0, dim), dtype=int),
        interface_cells=np.zeros((0, 2), dtype=int),
        outer_facets=np.zeros((0, dim), dtype=int),
        outer_cells=np.zeros(0, dtype=int),
        R=spec.radius,
        spec=spec,
    )
    _orient_cells(mesh)
    _tag_facets(mesh)
    return mesh


def _orient_cells(mesh: Mesh):
    vols = mesh.cells, mesh.cell_volumes()
    cells, v = vols
    neg = v < 0
    if neg.any():
        cells[neg, -2], cells[neg, -1] = cells[neg, -1].copy(), cells[neg, -2].copy()
    if np.any(np.abs(mesh.cell_volumes()) < 1e-300):
        raise ValueError("degenerate cell produced")


def _tag_facets(mesh: Mesh):
    """Locate interface facets (+/- cell pairs) and outer boundary facets."""
    dim = mesh.dim
    nloc = dim + 1
    faces: dict[tuple, list[int]] = {}
    for c in range(mesh.num_cells):
        verts = mesh.cells[c]
        for drop in range(nloc):
            key = tuple(sorted(np.delete(verts, drop)))
            faces.setdefault(key, []).append(c)

    iface, icells, oface, ocells = [], [], [], []
    for key, inc in faces.items():
        if len(inc) == 2:
            t0, t1 = mesh.cell_tags[inc[0]], mesh.cell_tags[inc[1]]
            if t0 != t1:
                plus, minus = (inc[0], inc[1]) if t0 > 0 else (inc[1], inc[0])
                iface.append(key)
                icells.append((plus, minus))
        elif len(inc) == 1:
            if mesh.cell_tags[inc[0]] > 0:
                raise ValueError("plus cell touches the outer boundary; R too small")
            oface.append(key)
            ocells.append(inc[0])
        else:
            raise ValueError("non-manifold facet")

    order = np.lexsort(np.asarray(iface).T[::-1]) if iface else np.zeros(0, dtype=int)
    mesh.interface_facets = np.asarray(iface, dtype=int).reshape(-1, dim)[order]
    mesh.interface_cells = np.asarray(icells, dtype=int).reshape(-1, 2)[order]
    oorder = np.lexsort(np.asarray(oface).T[::-1]) if oface else np.zeros(0, dtype=int)
    mesh.outer_facets = np.asarray(oface, dtype=int).reshape(-1, dim)[oorder]
    mesh.outer_cells = np.asarray(ocells, dtype=int)[oorder]


def interface_normals(mesh: Mesh) -> np.ndarray:
    """Unit normals on the interface facets, oriented from plus into minus."""
    if len(mesh.interface_facets) == 0:
        raise ValueError("mesh has no tagged interface facets")
    _, normals = mesh.interface_geometry()
    return normals


def surface_euler_characteristic(mesh: Mesh) -> int:
    """V - E + F of the triangulated interface (2 for a closed 2-sphere)."""
    f = mesh.interface_facets
    verts = np.unique(f)
    edges = set()
    for tri in f:
        m = len(tri)
        for a in range(m):
            for b in range(a + 1, m):
                edges.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
    return len(verts) - len(edges) + len(f)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def export_vtk(mesh: Mesh, fields, path) -> None:
    """Write a VTK legacy ASCII v3.0 unstructured-grid file.

    `fields` is a list of (name, location, array) with location "point" or
    "cell"; scalar arrays must match the vertex/cell count, vector point
    arrays must be (nv, dim).  Output is byte-identical for identical input.
    """
    nv, nc = mesh.num_vertices, mesh.num_cells
    nloc = mesh.dim + 1
    ctype = 10 if mesh.dim == 3 else 5
    lines = [
        "# vtk DataFile Version 3.0",
        "anisostokes mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    for p in mesh.vertices:
        coords = list(p) + [0.0] * (3 - mesh.dim)
        lines.append(" ".join(_fmt(c) for c in coords))
    lines.append(f"CELLS {nc} {nc * (nloc + 1)}")
    for c in mesh.cells:
        lines.append(f"{nloc} " + " ".join(str(v) for v in c))
    lines.append(f"CELL_TYPES {nc}")
    lines.extend([str(ctype)] * nc)

    point_fields = [f for f in fields if f[1] == "point"]
    cell_fields = [f for f in fields if f[1] == "cell"]
    if cell_fields:
        lines.append(f"CELL_DATA {nc}")
        for name, _, arr in cell_fields:
            arr = np.asarray(arr, dtype=float)
            if len(arr) != nc:
                raise ValueError(f"cell field {name!r} has length {len(arr)} != {nc}")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in arr)
    if point_fields:
        lines.append(f"POINT_DATA {nv}")
        for name, _, arr in point_fields:
            arr = np.asarray(arr, dtype=float)
            if len(arr) != nv:
                raise ValueError(f"point field {name!r} has length {len(arr)} != {nv}")
            if arr.ndim == 2:
                lines.append(f"VECTORS {name} double")
                for row in arr:
                    vec = list(row) + [0.0] * (3 - arr.shape[1])
                    lines.append(" ".join(_fmt(v) for v in vec))
            else:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(_fmt(v) for v in arr)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
