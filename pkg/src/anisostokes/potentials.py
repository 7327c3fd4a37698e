"""Newtonian and layer potentials defined by transmission solves.

Every potential is the solution of its defining transmission problem on the
truncated box: the Newtonian potential solves against a volume load, the
single layer prescribes the conormal jump, the double layer prescribes the
trace jump through a nodal lifting into the first plus-side cell layer.
Boundary operators are read off the cached side traces and conormal
derivatives; materializing them costs one back-substitution per interface
basis function against the shared KKT factorization.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .assembly import LoadFunctional, boundary_pairing, conormal_with_residual
from .problem import DIRICHLET, StokesProblem
from .spaces import FieldPair, TraceDensity, TraceField, normal_density, trace


@dataclass
class PotentialPair:
    """A potential (velocity, pressure) with cached traces and fluxes."""

    problem: StokesProblem
    pair: FieldPair
    kind: str
    multipliers: np.ndarray
    trace_plus: TraceField
    trace_minus: TraceField
    T_plus: TraceDensity
    T_minus: TraceDensity
    datum: object = None
    interior_residuals: tuple[float, float] = (0.0, 0.0)

    def trace_jump(self) -> np.ndarray:
        return self.trace_plus.values - self.trace_minus.values

    def conormal_jump(self) -> TraceDensity:
        return TraceDensity(self.problem.spaces, self.T_plus.moments - self.T_minus.moments)

    def weak_divergence_residual(self) -> float:
        """Cellwise-tested divergence: sum of squared pressure-moment residuals.

        This is the divergence the mixed method controls; it sits at the
        solver-tolerance level for every potential.
        """
        forms = self.problem.forms()
        r = forms.b(1) @ self.pair.u_plus + forms.b(-1) @ self.pair.u_minus
        return float(np.sum(r**2))


def _finish(problem, kind, u_plus, u_minus, p, mult, f_plus, f_minus, datum) -> PotentialPair:
    spaces = problem.spaces
    pair = FieldPair(spaces=spaces, u_plus=u_plus, u_minus=u_minus, p=p)
    forms = problem.forms()
    f_minus_eff = problem.outer_traction_load(mult)
    if f_minus is not None:
        f_minus_eff = f_minus_eff + f_minus
    T_plus, res_p = conormal_with_residual(forms, u_plus, p, f_plus, +1)
    T_minus, res_m = conormal_with_residual(forms, u_minus, p, f_minus_eff, -1)
    return PotentialPair(
        problem=problem,
        pair=pair,
        kind=kind,
        multipliers=mult,
        trace_plus=trace(pair, +1),
        trace_minus=trace(pair, -1),
        T_plus=T_plus,
        T_minus=T_minus,
        datum=datum,
        interior_residuals=(res_p, res_m),
    )


def newtonian(problem: StokesProblem, f: LoadFunctional) -> PotentialPair:
    """Whole-box solve of L(u, pi) = f (variational load -f), div u = 0.

    When `f` is side tagged the cached conormal derivatives use it as that
    side's extended datum, which is what the representation formula needs.
    """
    u, p, m = problem.solver().solve(-f.moments, np.zeros(problem.spaces.n_pressure))
    f_plus = f if f.side == +1 else None
    f_minus = f if f.side == -1 else None
    return _finish(problem, "newtonian", u, u, p, m, f_plus, f_minus, datum=f)


def single_layer(problem: StokesProblem, psi: TraceDensity) -> PotentialPair:
    """Single layer (V psi, Q^s psi): conormal jump psi, continuous trace."""
    F = boundary_pairing(psi, problem.spaces).moments
    u, p, m = problem.solver().solve(F, np.zeros(problem.spaces.n_pressure))
    return _finish(problem, "single-layer", u, u, p, m, None, None, datum=psi)


def double_layer(problem: StokesProblem, phi: TraceField) -> PotentialPair:
    """Double layer (W phi, Q^d phi): trace jump -phi, conormal jump zero.

    The jump is produced by the nodal lifting of -phi supported on the first
    plus-side cell layer; the continuous corrector solves the compensated
    system.  In Dirichlet outer mode the closed-surface compatibility
    <phi, nu> is checked and reported.
    """
    spaces = problem.spaces
    if problem.outer_bc == DIRICHLET:
        nu = normal_density(spaces)
        defect = abs(nu.pair(phi))
        if defect > 1e-8 * max(phi.norm_l2(), 1e-300):
            warnings.warn(
                f"double-layer density violates Dirichlet-mode compatibility: <phi,nu>={defect:.3e}",
                stacklevel=2,
            )
    w = np.zeros(spaces.n_velocity)
    w[spaces.velocity_trace_dofs()] = -phi.values
    forms = problem.forms()
    F = -(forms.a(1) @ w)
    G = -(forms.b(1) @ w)
    v, p, m = problem.solver().solve(F, G)
    return _finish(problem, "double-layer", v + w, v, p, m, None, None, datum=phi)


def single_layer_boundary_ops(pot: PotentialPair) -> tuple[TraceField, TraceDensity]:
    """(V psi, K psi) from a single-layer solve; re-verifies the jump relations."""
    if pot.kind not in ("single-layer", "adjoint-single-layer"):
        raise ValueError("expected a single-layer potential")
    spaces = pot.problem.spaces
    Vpsi = pot.trace_plus  # = trace_minus, velocity is continuous
    K = TraceDensity(spaces, 0.5 * (pot.T_plus.moments + pot.T_minus.moments))
    psi = pot.datum.moments
    dev = max(
        np.linalg.norm(pot.T_plus.moments - (0.5 * psi + K.moments)),
        np.linalg.norm(pot.T_minus.moments - (-0.5 * psi + K.moments)),
    )
    scale = max(np.linalg.norm(psi), 1e-300)
    if dev > 1e-8 * scale:
        warnings.warn(f"single-layer jump relations violated by {dev / scale:.3e}", stacklevel=2)
    return Vpsi, K


def double_layer_boundary_ops(pot: PotentialPair) -> tuple[TraceField, TraceDensity, float]:
    """(K phi, D phi, two-sided flux discrepancy) from a double-layer solve."""
    if pot.kind != "double-layer":
        raise ValueError("expected a double-layer potential")
    spaces = pot.problem.spaces
    K = TraceField(spaces, 0.5 * (pot.trace_plus.values + pot.trace_minus.values))
    D = pot.T_plus
    scale = max(np.linalg.norm(D.moments), np.linalg.norm(pot.datum.values), 1e-300)
    discrepancy = float(np.linalg.norm(pot.T_plus.moments - pot.T_minus.moments) / scale)
    phi = pot.datum.values
    dev = max(
        np.linalg.norm(pot.trace_plus.values - (-0.5 * phi + K.values)),
        np.linalg.norm(pot.trace_minus.values - (0.5 * phi + K.values)),
    )
    if dev > 1e-8 * max(np.linalg.norm(phi), 1e-300):
        warnings.warn("double-layer jump relations violated", stacklevel=2)
    return K, D, discrepancy


def adjoint_single_layer(problem: StokesProblem, psi_star: TraceDensity):
    """Single layer of the adjoint system; returns (pair, V* field, K* density)."""
    adj = problem.adjoint_problem()
    pot = single_layer(adj, psi_star)
    pot.kind = "adjoint-single-layer"
    Vs, Ks = single_layer_boundary_ops(pot)
    return pot, Vs, Ks


# --- materialized boundary operators ---------------------------------------
@dataclass
class BoundaryOperators:
    """Dense realizations of V, K (single layer), K, D (double layer).

    Matrices act on moment coordinates for densities and nodal values for
    trace fields; `gram_field`/`gram_density` are the surrogate-norm Grams
    the spectral statements are made in.
    """

    problem: StokesProblem
    V: np.ndarray  # density -> field
    Kd: np.ndarray  # density -> density
    Kf: np.ndarray  # field -> field
    D: np.ndarray  # field -> density
    V_star: np.ndarray
    K_star: np.ndarray
    gram_field: np.ndarray
    gram_density: np.ndarray
    nu_moments: np.ndarray
    dl_flux_discrepancy: float = 0.0

    @property
    def n(self):
        return self.V.shape[0]


def _batch_conormal(problem, U_plus, U_minus, P, M):
    """Side fluxes for a block of solutions; returns (Tp, Tm) moment blocks."""
    forms = problem.forms()
    spaces = problem.spaces
    C = problem.outer_constraints() if problem.outer_bc != DIRICHLET else None
    Rp = forms.a(1) @ U_plus + forms.b(1).T @ P
    Rm = forms.a(-1) @ U_minus + forms.b(-1).T @ P
    if C is not None and M is not None and M.shape[0]:
        Rm = Rm + C.T @ M
    t = spaces.velocity_trace_dofs()
    return Rp[t], -Rm[t]


def materialize_boundary_operators(problem: StokesProblem, progress=None) -> BoundaryOperators:
    """Assemble dense V, K, K, D (and adjoint variants) by columns.

    One transmission solve per interface basis function, batched against the
    cached factorization.  Desk scale only: refuses interfaces with more
    than ~1500 DOFs.
    """
    spaces = problem.spaces
    n = spaces.n_trace
    if n > 1500:
        raise ValueError(f"operator materialization at {n} interface DOFs exceeds desk scale")
    kkt = problem.solver()
    Nu, Np = spaces.n_velocity, spaces.n_pressure
    tdofs = spaces.velocity_trace_dofs()

    # single layer: RHS columns are unit density moments
    rhs = np.zeros((kkt.shape[0], n))
    rhs[tdofs, np.arange(n)] = 1.0
    sol = kkt.solve_raw(rhs)
    U, P, M = sol[:Nu], sol[Nu : Nu + Np], sol[Nu + Np :]
    V = U[tdofs]
    Tp, Tm = _batch_conormal(problem, U, U, P, M)
    Kd = 0.5 * (Tp + Tm)

    # double layer: lifting of each nodal trace basis function
    forms = problem.forms()
    W = np.zeros((Nu, n))
    W[tdofs, np.arange(n)] = -1.0
    rhs = np.zeros((kkt.shape[0], n))
    rhs[:Nu] = -(forms.a(1) @ W)
    rhs[Nu : Nu + Np] = -(forms.b(1) @ W)
    sol = kkt.solve_raw(rhs)
    Vc, P, M = sol[:Nu], sol[Nu : Nu + Np], sol[Nu + Np :]
    Up = Vc + W
    Kf = 0.5 * (Up[tdofs] + Vc[tdofs])
    Tp, Tm = _batch_conormal(problem, Up, Vc, P, M)
    D = Tp
    scale = max(np.abs(Tp).max(), 1e-300)
    discrepancy = float(np.abs(Tp - Tm).max() / scale)

    # adjoint single layer (transposed a-blocks, same pressure forms)
    adj = problem.adjoint_problem()
    kkt_a = adj.solver()
    rhs = np.zeros((kkt_a.shape[0], n))
    rhs[tdofs, np.arange(n)] = 1.0
    sol = kkt_a.solve_raw(rhs)
    U, P, M = sol[:Nu], sol[Nu : Nu + Np], sol[Nu + Np :]
    V_star = U[tdofs]
    Tp, Tm = _batch_conormal(adj, U, U, P, M)
    K_star = 0.5 * (Tp + Tm)

    Ms = spaces.interface_mass().toarray()
    Ks = spaces.interface_stiffness().toarray()
    Mh = spaces.interface_hmass().toarray()
    Minv = la.inv(Ms)
    gram_density = Minv @ Mh @ Minv
    return BoundaryOperators(
        problem=problem,
        V=V,
        Kd=Kd,
        Kf=Kf,
        D=D,
        V_star=V_star,
        K_star=K_star,
        gram_field=Ms + Ks,
        gram_density=gram_density,
        nu_moments=normal_density(spaces).moments,
        dl_flux_discrepancy=discrepancy,
    )


@dataclass
class SpectralReport:
    """Kernel and coercivity numbers for the materialized operators."""

    v_norm: float
    v_nu_norm: float
    v_min_sv_complement: float
    d_norm: float
    d_constant_eigs: np.ndarray
    d_next_eig: float
    d_constant_alignment: float
    rayleigh_v_min: float
    rayleigh_d_min: float
    delta: float
    passed: bool = field(init=False)

    def __post_init__(self):
        ok = self.v_nu_norm <= 1e-8 * max(self.v_norm, 1e-300)
        ok &= self.v_min_sv_complement > self.delta * self.v_norm
        ok &= bool(np.all(np.abs(self.d_constant_eigs) <= 1e-8 * max(self.d_norm, 1e-300)))
        ok &= self.d_next_eig > self.delta * self.d_norm
        ok &= self.rayleigh_v_min > 0 and self.rayleigh_d_min > 0
        self.passed = bool(ok)


def _norm_transforms(ops: BoundaryOperators):
    Lf = la.cholesky(0.5 * (ops.gram_field + ops.gram_field.T), lower=True)
    Ld = la.cholesky(0.5 * (ops.gram_density + ops.gram_density.T), lower=True)
    return Lf, Ld


def _complement_basis(columns: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the given columns."""
    d = np.asarray(columns)
    if d.ndim == 1:
        d = d[:, None]
    q, _ = la.qr(d, mode="economic")
    n = d.shape[0]
    full = np.eye(n) - q @ q.T
    u, s, _ = la.svd(full)
    return u[:, s > 0.5]


def kernel_and_coercivity_report(ops: BoundaryOperators, delta: float = 1e-6) -> SpectralReport:
    """Spectral verification of the kernel and coercivity statements.

    (i) the normal direction spans the kernel of the single-layer trace
    operator; (ii) minus the double-layer flux operator annihilates exactly
    the constant fields; (iii) both quadratic forms are strictly positive on
    the respective complements.
    """
    n = ops.n
    dim = ops.problem.spaces.dim
    Lf, Ld = _norm_transforms(ops)

    # singular values of V: density (moments, gram_density) -> field (gram_field)
    Vt = Lf.T @ ops.V @ la.solve_triangular(Ld, np.eye(n), lower=True).T
    sv = la.svdvals(Vt)
    v_norm = float(sv[0])
    r_nu = ops.nu_moments
    v_nu_norm = float(np.linalg.norm(Lf.T @ (ops.V @ r_nu)) / np.linalg.norm(Ld.T @ r_nu))
    y_nu = Ld.T @ r_nu
    Bc = _complement_basis(y_nu / np.linalg.norm(y_nu))
    v_min = float(la.svdvals(Vt @ Bc)[-1])

    # -D as a quadratic form on trace fields against the H^1/2 surrogate
    formD = -0.5 * (ops.D + ops.D.T)
    w, vecs = la.eigh(formD, 0.5 * (ops.gram_field + ops.gram_field.T))
    order = np.argsort(np.abs(w))
    d_const = w[order[:dim]]
    d_next = float(np.sort(w)[dim])
    Dt = Ld.T @ ops.D @ la.solve_triangular(Lf, np.eye(n), lower=True).T
    d_norm = float(la.svdvals(Dt)[0])
    # alignment of the near-null eigenvectors with the constant fields
    const_basis = np.zeros((n, dim))
    for c in range(dim):
        const_basis[c::dim, c] = 1.0
    const_basis, _ = la.qr(const_basis, mode="economic")
    E = vecs[:, order[:dim]]
    E /= np.linalg.norm(E, axis=0)
    align = float(np.linalg.norm(const_basis @ (const_basis.T @ E) - E))

    # Rayleigh minima on the constrained subspaces
    formV = 0.5 * (ops.V + ops.V.T)
    Ldi = la.solve_triangular(Ld, np.eye(n), lower=True)
    Vq = Ldi @ formV @ Ldi.T
    ray_v = float(np.min(la.eigvalsh(Bc.T @ Vq @ Bc)))

    Ms = ops.problem.spaces.interface_mass().toarray()
    mean_rows = np.stack([Ms @ const_basis[:, c] for c in range(dim)])
    Lfi = la.solve_triangular(Lf, np.eye(n), lower=True)
    y_rows = mean_rows @ Lfi.T  # constraints in transformed coords
    Bmz = _complement_basis(y_rows.T / np.linalg.norm(y_rows, axis=1))
    Dq = Lfi @ formD @ Lfi.T
    ray_d = float(np.min(la.eigvalsh(Bmz.T @ Dq @ Bmz)))

    return SpectralReport(
        v_norm=v_norm,
        v_nu_norm=v_nu_norm,
        v_min_sv_complement=v_min,
        d_norm=d_norm,
        d_constant_eigs=np.asarray(d_const),
        d_next_eig=d_next,
        d_constant_alignment=align,
        rayleigh_v_min=ray_v,
        rayleigh_d_min=ray_d,
        delta=delta,
    )
