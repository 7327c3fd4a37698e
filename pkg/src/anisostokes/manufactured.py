"""Compactly supported manufactured Stokes fields with analytic derivatives.

The velocity is the curl of a radial bump potential, hence exactly
divergence free; the pressure is an odd bump.  Everything vanishes outside
the support ball, so a field supported inside the truncation box satisfies
the traction-free outer condition exactly and carries no truncation error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import grundmann_moller
from .spaces import (
    FieldPair,
    FunctionSpaces,
    evaluate_velocity,
    evaluate_velocity_gradient,
)


def _bump(t):
    """g(t) = (1-t)^5 on t<1, with first three derivatives."""
    m = np.maximum(1.0 - t, 0.0)
    return m**5, -5.0 * m**4, 20.0 * m**3, -60.0 * m**2


@dataclass(frozen=True)
class BumpStokesField:
    """u = curl(g(|x-x0|^2/r^2) a), pi = amp * (x-x0)_1/r * g.

    All evaluators broadcast over leading axes: x may be (dim,) or
    (..., dim).
    """

    center: tuple
    radius: float
    axis: tuple = (0.0, 0.0, 1.0)
    pressure_amp: float = 1.0

    @property
    def dim(self) -> int:
        return len(self.center)

    def _t(self, x):
        y = (np.asarray(x, float) - np.asarray(self.center)) / self.radius
        return np.einsum("...d,...d->...", y, y), y

    def _curl(self, grad_s):
        if self.dim == 3:
            return np.cross(grad_s, np.asarray(self.axis))
        return np.stack([grad_s[..., 1], -grad_s[..., 0]], axis=-1)

    def velocity(self, x) -> np.ndarray:
        t, y = self._t(x)
        g, g1, g2, g3 = _bump(t)
        grad_s = g1[..., None] * 2.0 * y / self.radius
        return self._curl(grad_s)

    def velocity_gradient(self, x) -> np.ndarray:
        """G[..., i, b] = d_b u_i."""
        t, y = self._t(x)
        g, g1, g2, g3 = _bump(t)
        r = self.radius
        H = (4.0 * g2 / r**2)[..., None, None] * np.einsum("...i,...j->...ij", y, y)
        H = H + (2.0 * g1 / r**2)[..., None, None] * np.eye(self.dim)
        if self.dim == 3:
            a = np.asarray(self.axis)
            eps = np.zeros((3, 3, 3))
            eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
            eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
            return np.einsum("ijk,...jb,k->...ib", eps, H, a)
        return np.stack([H[..., 1, :], -H[..., 0, :]], axis=-2)

    def velocity_laplacian(self, x) -> np.ndarray:
        t, y = self._t(x)
        g, g1, g2, g3 = _bump(t)
        r = self.radius
        # grad(lap s) with lap s = (2/r^2)(n g1 + 2 t g2)
        coeff = (4.0 * t * g3 + (2.0 * self.dim + 4.0) * g2) / r**2
        grad_lap_s = coeff[..., None] * 2.0 * y / r
        return self._curl(grad_lap_s)

    def pressure(self, x):
        t, y = self._t(x)
        g, *_ = _bump(t)
        return self.pressure_amp * y[..., 0] * g

    def pressure_gradient(self, x) -> np.ndarray:
        t, y = self._t(x)
        g, g1, g2, g3 = _bump(t)
        e0 = np.zeros(self.dim)
        e0[0] = 1.0
        return self.pressure_amp * (
            g[..., None] * e0 / self.radius
            + (y[..., 0] * g1)[..., None] * 2.0 * y / self.radius
        )

    def momentum_force(self, mu: float):
        """f with L(u, pi) = f for the constant-mu isotropic tensor."""

        def f(x):
            return mu * self.velocity_laplacian(x) - self.pressure_gradient(x)

        return f

    def classical_traction(self, tensor, x, nu) -> np.ndarray:
        """(A^{ab} d_b u) nu_a - pi nu at a point, for any coefficient tensor."""
        E = tensor.at(x)
        G = self.velocity_gradient(x)
        return np.einsum("ijab,jb,a->i", E, G, np.asarray(nu)) - self.pressure(x) * np.asarray(nu)


def _eval_field(func, pts, out_shape):
    try:
        out = np.asarray(func(pts), dtype=float)
        if out.shape == out_shape:
            return out
    except Exception:
        pass
    flat = pts.reshape(-1, pts.shape[-1])
    out = np.asarray([func(x) for x in flat], dtype=float)
    return out.reshape(out_shape)


def interpolate_velocity(spaces: FunctionSpaces, func) -> np.ndarray:
    """MINI interpolant: vertex values plus centroid-matching bubbles."""
    mesh = spaces.mesh
    u = np.zeros(spaces.n_velocity)
    vert_vals = _eval_field(func, mesh.vertices, (spaces.n_vertices, spaces.dim))
    u.reshape(-1, spaces.dim)[: spaces.n_vertices] = vert_vals
    if spaces.velocity_bubbles:
        cents = mesh.cell_centroids()
        p1_at_cent = vert_vals[mesh.cells].mean(axis=1)
        cent_vals = _eval_field(func, cents, (mesh.num_cells, spaces.dim))
        u.reshape(-1, spaces.dim)[spaces.n_vertices :] = cent_vals - p1_at_cent
    return u


def interpolate_pressure(spaces: FunctionSpaces, func_plus, func_minus=None) -> np.ndarray:
    """Vertexwise pressure interpolant, side copies from the side functions."""
    func_minus = func_minus or func_plus
    p = np.zeros(spaces.n_pressure)
    for v in range(spaces.n_vertices):
        x = spaces.mesh.vertices[v]
        if spaces.p_plus[v] >= 0:
            p[spaces.p_plus[v]] = func_plus(x)
        if spaces.p_minus[v] >= 0:
            p[spaces.p_minus[v]] = func_minus(x)
    return p


def velocity_errors(spaces: FunctionSpaces, pair_or_u, exact, exact_grad, degree: int = 6):
    """(L2, H1-seminorm) errors of a discrete velocity against an analytic one.

    Accepts a FieldPair (side-aware) or a plain coefficient vector; `exact`
    and `exact_grad` may be per-side dicts {+1: f, -1: f} for broken fields.
    """
    mesh = spaces.mesh
    B, w = grundmann_moller(mesh.dim, degree)
    geom = spaces.geometry()
    err_l2 = 0.0
    err_h1 = 0.0
    for side in (1, -1):
        cells = np.nonzero(mesh.cell_tags == side)[0]
        if len(cells) == 0:
            continue
        u = pair_or_u.velocity(side) if isinstance(pair_or_u, FieldPair) else pair_or_u
        ex = exact[side] if isinstance(exact, dict) else exact
        exg = exact_grad[side] if isinstance(exact_grad, dict) else exact_grad
        pts = np.einsum("qa,cad->cqd", B, mesh.vertices[mesh.cells[cells]])
        vals = evaluate_velocity(spaces, u, cells, B)
        grads = evaluate_velocity_gradient(spaces, u, cells, B)
        exv = _eval_field(ex, pts, vals.shape)
        exG = _eval_field(exg, pts, grads.shape)
        V = geom.volumes[cells]
        err_l2 += float(np.einsum("cqi,cqi,q,c->", vals - exv, vals - exv, w, V))
        err_h1 += float(np.einsum("cqib,cqib,q,c->", grads - exG, grads - exG, w, V))
    return float(np.sqrt(err_l2)), float(np.sqrt(err_h1))


def pressure_error(spaces: FunctionSpaces, p, exact_plus, exact_minus=None, degree: int = 6):
    """L2 error of a broken pressure against per-side analytic pressures."""
    exact_minus = exact_minus or exact_plus
    mesh = spaces.mesh
    B, w = grundmann_moller(mesh.dim, degree)
    geom = spaces.geometry()
    err = 0.0
    for side, ex in ((1, exact_plus), (-1, exact_minus)):
        cells = np.nonzero(mesh.cell_tags == side)[0]
        if len(cells) == 0:
            continue
        pmap = spaces.p_plus if side > 0 else spaces.p_minus
        pdofs = pmap[mesh.cells[cells]]
        pts = np.einsum("qa,cad->cqd", B, mesh.vertices[mesh.cells[cells]])
        vals = np.einsum("qa,ca->cq", B, p[pdofs])
        exv = _eval_field(ex, pts, vals.shape)
        V = geom.volumes[cells]
        err += float(np.einsum("cq,cq,q,c->", vals - exv, vals - exv, w, V))
    return float(np.sqrt(err))
