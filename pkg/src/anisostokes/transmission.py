"""Linear transmission solves and the small-data Picard iteration.

The linear Poisson transmission problem has two interchangeable backends:
"monolithic" imposes the trace jump by a nodal lifting inside one saddle
solve; "representation" composes Newtonian + single layer - double layer
with the corrected interface data.  Both satisfy the same four discrete
equations, whose solution is unique, so they agree to solver precision.

The nonlinear solver is successive substitution on the paper's fixed-point
map: each step feeds the convection load of the previous iterate into the
linear solve (one cached factorization, new right-hand side).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .assembly import (
    LoadFunctional,
    assemble_convection,
    boundary_pairing,
    conormal_with_residual,
    velocity_stiffness,
)
from .potentials import double_layer, newtonian, single_layer
from .problem import StokesProblem
from .saddle import OperatorNormResult, SolverError, estimate_operator_norm
from .spaces import FieldPair, TraceDensity, TraceField, trace


@dataclass
class TransmissionData:
    """(f~+, f~-, h, g): volume loads and interface jump data."""

    f_plus: LoadFunctional
    f_minus: LoadFunctional
    h: TraceField
    g: TraceDensity

    @classmethod
    def zero(cls, problem: StokesProblem) -> "TransmissionData":
        spaces = problem.spaces
        return cls(
            f_plus=LoadFunctional.zero(spaces, side=+1),
            f_minus=LoadFunctional.zero(spaces, side=-1),
            h=TraceField(spaces, np.zeros(spaces.n_trace)),
            g=TraceDensity(spaces, np.zeros(spaces.n_trace)),
        )

    def scaled(self, a: float) -> "TransmissionData":
        return TransmissionData(
            f_plus=self.f_plus.scaled(a),
            f_minus=self.f_minus.scaled(a),
            h=TraceField(self.h.spaces, a * self.h.values),
            g=TraceDensity(self.g.spaces, a * self.g.moments),
        )

    def with_convection(self, load: LoadFunctional) -> "TransmissionData":
        return TransmissionData(self.f_plus + load, self.f_minus, self.h, self.g)

    def norm(self, problem: StokesProblem) -> float:
        """Combined data norm: side dual norms + surrogate trace norms."""
        n = _dual_side_norm(problem, self.f_plus.moments, +1)
        n += _dual_side_norm(problem, self.f_minus.moments, -1)
        n += self.h.norm_half()
        n += self.g.norm_minus_half()
        return n


def _side_gram_solver(problem: StokesProblem, side: int):
    key = ("side_gram_lu", side)
    if key not in problem._cache:
        dofs = problem.spaces.side_velocity_dofs(side)
        X = problem.velocity_gram(side)[dofs][:, dofs].tocsc()
        problem._cache[key] = (dofs, splu(X, permc_spec="MMD_AT_PLUS_A"))
    return problem._cache[key]


def _dual_side_norm(problem: StokesProblem, moments: np.ndarray, side: int) -> float:
    dofs, lu = _side_gram_solver(problem, side)
    r = moments[dofs]
    if np.linalg.norm(r) == 0:
        return 0.0
    off = np.linalg.norm(np.delete(moments, dofs))
    if off > 1e-12 * np.linalg.norm(r):
        raise ValueError("side load has moments outside its subdomain")
    return float(np.sqrt(abs(r @ lu.solve(r))))


@dataclass
class TransmissionReport:
    interior_plus: float
    interior_minus: float
    trace_jump: float
    flux_jump: float
    backend: str

    def max_residual(self) -> float:
        return max(self.interior_plus, self.interior_minus, self.trace_jump, self.flux_jump)


@dataclass
class TransmissionSolution:
    """Broken (velocity, pressure) pair with side fluxes and residual report."""

    problem: StokesProblem
    pair: FieldPair
    multipliers: np.ndarray
    T_plus: TraceDensity
    T_minus: TraceDensity
    report: TransmissionReport


def _jump_residuals(problem, pair, T_plus, T_minus, data) -> tuple[float, float]:
    tp = trace(pair, +1).values
    tm = trace(pair, -1).values
    scale_h = max(np.abs(data.h.values).max(initial=0.0), np.abs(tp).max(initial=0.0), 1e-300)
    jump_h = float(np.abs(tp - tm - data.h.values).max() / scale_h)
    dg = T_plus.moments - T_minus.moments - data.g.moments
    scale_g = max(
        np.linalg.norm(data.g.moments), np.linalg.norm(T_plus.moments), 1e-300
    )
    jump_g = float(np.linalg.norm(dg) / scale_g)
    return jump_h, jump_g


def _solve_monolithic(problem: StokesProblem, data: TransmissionData) -> TransmissionSolution:
    spaces = problem.spaces
    forms = problem.forms()
    w = np.zeros(spaces.n_velocity)
    w[spaces.velocity_trace_dofs()] = data.h.values
    F = boundary_pairing(data.g, spaces).moments
    F -= data.f_plus.moments + data.f_minus.moments
    F -= forms.a(1) @ w
    G = -(forms.b(1) @ w)
    v, p, m = problem.solver().solve(F, G)
    u_plus, u_minus = v + w, v
    pair = FieldPair(spaces=spaces, u_plus=u_plus, u_minus=u_minus, p=p)
    f_minus_eff = data.f_minus + problem.outer_traction_load(m)
    T_plus, rp = conormal_with_residual(forms, u_plus, p, data.f_plus, +1)
    T_minus, rm = conormal_with_residual(forms, u_minus, p, f_minus_eff, -1)
    scale = max(np.linalg.norm(F), np.linalg.norm(G), 1e-300)
    jh, jg = _jump_residuals(problem, pair, T_plus, T_minus, data)
    report = TransmissionReport(rp / scale, rm / scale, jh, jg, backend="monolithic")
    return TransmissionSolution(problem, pair, m, T_plus, T_minus, report)


def _solve_representation(problem: StokesProblem, data: TransmissionData) -> TransmissionSolution:
    spaces = problem.spaces
    np_pot = newtonian(problem, data.f_plus)
    nm_pot = newtonian(problem, data.f_minus)
    h0 = TraceField(
        spaces,
        data.h.values - (np_pot.trace_plus.values - nm_pot.trace_minus.values),
    )
    g0 = TraceDensity(
        spaces,
        data.g.moments - (np_pot.T_plus.moments - nm_pot.T_minus.moments),
    )
    slp = single_layer(problem, g0)
    dlp = double_layer(problem, h0)
    u_plus = np_pot.pair.u_plus + slp.pair.u_plus - dlp.pair.u_plus
    u_minus = nm_pot.pair.u_minus + slp.pair.u_minus - dlp.pair.u_minus
    pmask = problem.spaces.p_plus
    p = np.empty(spaces.n_pressure)
    plus_p = pmask[pmask >= 0]
    minus_p = spaces.p_minus[spaces.p_minus >= 0]
    p[plus_p] = (np_pot.pair.p + slp.pair.p - dlp.pair.p)[plus_p]
    p[minus_p] = (nm_pot.pair.p + slp.pair.p - dlp.pair.p)[minus_p]
    pair = FieldPair(spaces=spaces, u_plus=u_plus, u_minus=u_minus, p=p)
    m = nm_pot.multipliers + slp.multipliers - dlp.multipliers
    forms = problem.forms()
    f_minus_eff = data.f_minus + problem.outer_traction_load(m)
    T_plus, rp = conormal_with_residual(forms, u_plus, p, data.f_plus, +1)
    T_minus, rm = conormal_with_residual(forms, u_minus, p, f_minus_eff, -1)
    scale = max(
        np.linalg.norm(data.f_plus.moments) + np.linalg.norm(data.f_minus.moments),
        np.linalg.norm(data.g.moments),
        np.abs(data.h.values).max(initial=0.0),
        1e-300,
    )
    jh, jg = _jump_residuals(problem, pair, T_plus, T_minus, data)
    report = TransmissionReport(rp / scale, rm / scale, jh, jg, backend="representation")
    return TransmissionSolution(problem, pair, m, T_plus, T_minus, report)


def solve_linear_transmission(
    problem: StokesProblem, data: TransmissionData, backend: str = "monolithic"
) -> TransmissionSolution:
    """Solve the linear Poisson transmission problem.

    In Dirichlet outer mode the trace-jump datum must be mass compatible
    (<h, nu> = 0); the traction-free default needs no compatibility.
    """
    if problem.outer_bc == "dirichlet":
        from .spaces import normal_density

        defect = abs(normal_density(problem.spaces).pair(data.h))
        if defect > 1e-8 * max(data.h.norm_l2(), 1e-300):
            raise SolverError(
                f"Dirichlet-mode transmission needs <h, nu> = 0, got {defect:.3e}"
            )
    if backend == "monolithic":
        return _solve_monolithic(problem, data)
    if backend == "representation":
        return _solve_representation(problem, data)
    raise ValueError(f"unknown backend {backend!r}")


def backend_discrepancy(problem, sol_a, sol_b) -> float:
    """Relative broken-H1 distance between two transmission solutions."""
    from .spaces import weighted_norm

    diff = FieldPair(
        spaces=problem.spaces,
        u_plus=sol_a.pair.u_plus - sol_b.pair.u_plus,
        u_minus=sol_a.pair.u_minus - sol_b.pair.u_minus,
        p=sol_a.pair.p - sol_b.pair.p,
    )
    num = weighted_norm(diff, "full-H1-weighted", problem.spaces)
    den = max(weighted_norm(sol_a.pair, "full-H1-weighted", problem.spaces), 1e-300)
    return num / den


# --- constants of the fixed-point argument ---------------------------------
@dataclass
class ConvectionConstants:
    """(c1, c*, eta, zeta) of the small-data contraction argument."""

    c1: float
    c_star: float
    eta: float
    zeta: float
    unconditional: bool
    c_star_converged: bool = True

    def as_dict(self):
        return {
            "c1": self.c1,
            "c_star": self.c_star,
            "eta": self.eta,
            "zeta": self.zeta,
            "unconditional": self.unconditional,
        }


def _plus_norms(problem):
    key = "plus_norm_ops"
    if key not in problem._cache:
        dofs = problem.spaces.side_velocity_dofs(+1)
        X = problem.velocity_gram(+1)[dofs][:, dofs].tocsr()
        K = velocity_stiffness(problem.spaces, +1)[dofs][:, dofs].tocsr()
        problem._cache[key] = (dofs, X, K, splu(X.tocsc(), permc_spec="MMD_AT_PLUS_A"))
    return problem._cache[key]


def compute_constants(
    problem: StokesProblem,
    lam,
    probe_count: int = 16,
    rng_seed: int = 0,
) -> ConvectionConstants:
    """Empirical contraction constants of the Picard map.

    c1 bounds the convection load bilinearly: ||E+(lam (v.grad)w)||_dual <=
    c1 ||v||_H1 ||grad w||_L2, maximized over random probe pairs; c* is the
    operator norm of the linear data-to-solution map (power iteration on the
    normal map).  eta = 1/(4 c1 c*), zeta = 3 eta / (4 c*).  lam = 0 gives
    c1 = 0 and an unconditional (infinite-radius) regime.
    """
    if probe_count < 8:
        raise ValueError("probe_count must be >= 8")
    spaces = problem.spaces
    dofs, Xp, Kp, xlu = _plus_norms(problem)
    rng = np.random.default_rng(rng_seed)

    lam_zero = not callable(lam) and float(lam) == 0.0
    c1 = 0.0
    if not lam_zero:
        probes = []
        for _ in range(probe_count):
            v = np.zeros(spaces.n_velocity)
            v[dofs] = rng.standard_normal(len(dofs))
            probes.append(v)
        for i, v in enumerate(probes):
            for w in (v, probes[(i + 1) % len(probes)]):
                load = assemble_convection(spaces, lam, v, w)
                r = load.moments[dofs]
                dual = float(np.sqrt(abs(r @ xlu.solve(r))))
                nv = float(np.sqrt(abs(v[dofs] @ (Xp @ v[dofs]))))
                gw = float(np.sqrt(abs(w[dofs] @ (Kp @ w[dofs]))))
                if nv * gw > 0:
                    c1 = max(c1, dual / (nv * gw))
        if c1 == 0.0:
            raise SolverError("degenerate convection probes")

    cs = estimate_solution_operator_norm(problem, seed=rng_seed)
    c_star = cs.value
    if lam_zero:
        return ConvectionConstants(0.0, c_star, np.inf, np.inf, True, cs.converged)
    eta = 1.0 / (4.0 * c1 * c_star)
    zeta = 3.0 * eta / (4.0 * c_star)
    return ConvectionConstants(c1, c_star, eta, zeta, False, cs.converged)


class _SolutionMap:
    """Matrix-free data -> solution map with its Euclidean transpose.

    Data coordinates: (r+, r-, h, g) with the side loads restricted to their
    subdomain DOFs; output coordinates: (u+, u-, p).  The transpose reuses
    the KKT factorization with trans="T".
    """

    def __init__(self, problem: StokesProblem):
        self.problem = problem
        spaces = problem.spaces
        self.spaces = spaces
        self.dp = spaces.side_velocity_dofs(+1)
        self.dm = spaces.side_velocity_dofs(-1)
        self.t = spaces.velocity_trace_dofs()
        self.Nt = spaces.n_trace
        self.Nu = spaces.n_velocity
        self.Np = spaces.n_pressure
        self.kkt = problem.solver()
        self.forms = problem.forms()
        self.n_in = len(self.dp) + len(self.dm) + 2 * self.Nt
        self.n_out = 2 * self.Nu + self.Np

    def split(self, d):
        np_, nm_ = len(self.dp), len(self.dm)
        return (
            d[:np_],
            d[np_ : np_ + nm_],
            d[np_ + nm_ : np_ + nm_ + self.Nt],
            d[np_ + nm_ + self.Nt :],
        )

    def apply(self, d):
        rp, rm, h, g = self.split(d)
        w = np.zeros(self.Nu)
        w[self.t] = h
        F = np.zeros(self.Nu)
        F[self.t] += g
        F[self.dp] -= rp
        F[self.dm] -= rm
        F -= self.forms.a(1) @ w
        G = -(self.forms.b(1) @ w)
        v, p, _ = self.kkt.solve(F, G)
        return np.concatenate([v + w, v, p])

    def rmatvec(self, y):
        yp, ym, ypr = y[: self.Nu], y[self.Nu : 2 * self.Nu], y[2 * self.Nu :]
        rhs = np.zeros(self.kkt.shape[0])
        rhs[: self.Nu] = yp + ym
        rhs[self.Nu : self.Nu + self.Np] = ypr
        x = self.kkt.solve_raw(rhs, trans="T")
        phiF = x[: self.Nu].copy()
        phiG = x[self.Nu : self.Nu + self.Np]
        ddofs = self.kkt.system.dirichlet_dofs
        if self.kkt.system.bc_mode == "dirichlet" and ddofs is not None:
            phiF[ddofs] = 0.0  # mirror the forward solve's constraint projection
        d = np.zeros(self.n_in)
        np_, nm_ = len(self.dp), len(self.dm)
        d[:np_] = -phiF[self.dp]
        d[np_ : np_ + nm_] = -phiF[self.dm]
        lift_cot = -(self.forms.a(1).T @ phiF) - (self.forms.b(1).T @ phiG)
        d[np_ + nm_ : np_ + nm_ + self.Nt] = lift_cot[self.t] + yp[self.t]
        d[np_ + nm_ + self.Nt :] = phiF[self.t]
        return d

    def gram_in(self):
        """(dot, solve) of the data-norm Gram in the reduced coordinates."""
        problem = self.problem
        spaces = self.spaces
        Xp = problem.velocity_gram(+1)[self.dp][:, self.dp].tocsc()
        Xm = problem.velocity_gram(-1)[self.dm][:, self.dm].tocsc()
        lup, lum = (splu(Xp, permc_spec="MMD_AT_PLUS_A"), splu(Xm, permc_spec="MMD_AT_PLUS_A"))
        S = (spaces.interface_mass() + spaces.interface_stiffness()).tocsc()
        Ms = spaces.interface_mass().tocsc()
        Mh = spaces.interface_hmass().tocsc()
        mlu = splu(Ms)
        slu = splu(S)
        hlu = splu(Mh)
        np_, nm_, Nt = len(self.dp), len(self.dm), self.Nt

        def dot(d):
            rp, rm, h, g = self.split(d)
            out = np.empty_like(d)
            out[:np_] = lup.solve(rp)
            out[np_ : np_ + nm_] = lum.solve(rm)
            out[np_ + nm_ : np_ + nm_ + Nt] = S @ h
            out[np_ + nm_ + Nt :] = mlu.solve(Mh @ mlu.solve(g))
            return out

        def solve(d):
            rp, rm, h, g = self.split(d)
            out = np.empty_like(d)
            out[:np_] = Xp @ rp
            out[np_ : np_ + nm_] = Xm @ rm
            out[np_ + nm_ : np_ + nm_ + Nt] = slu.solve(h)
            out[np_ + nm_ + Nt :] = Ms @ hlu.solve(Ms @ g)
            return out

        return dot, solve

    def gram_out_dot(self):
        problem = self.problem
        Xp = problem.velocity_gram(+1)
        Xm = problem.velocity_gram(-1)
        Q = problem.pressure_gram()
        Nu = self.Nu

        def dot(y):
            out = np.empty_like(y)
            out[:Nu] = Xp @ y[:Nu]
            out[Nu : 2 * Nu] = Xm @ y[Nu : 2 * Nu]
            out[2 * Nu :] = Q @ y[2 * Nu :]
            return out

        return dot


def estimate_solution_operator_norm(problem: StokesProblem, seed: int = 0) -> OperatorNormResult:
    """c*: norm of the linear transmission solution operator (power iteration)."""
    smap = _SolutionMap(problem)
    gin_dot, gin_solve = smap.gram_in()
    gout_dot = smap.gram_out_dot()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(smap.n_in)
    x /= np.sqrt(abs(x @ gin_dot(x)))
    sigma2_old = 0.0
    for it in range(1, 201):
        w = smap.rmatvec(gout_dot(smap.apply(x)))
        sigma2 = float(abs(x @ w))
        v = gin_solve(w)
        nrm = np.sqrt(abs(v @ gin_dot(v)))
        x = v / nrm
        if it > 1 and abs(sigma2 - sigma2_old) <= 1e-6 * abs(sigma2):
            return OperatorNormResult(float(np.sqrt(sigma2)), True, it)
        sigma2_old = sigma2
    return OperatorNormResult(float(np.sqrt(sigma2_old)), False, 200)


# --- Picard iteration -------------------------------------------------------
@dataclass
class PicardState:
    """Iteration history of the successive-substitution solver."""

    constants: ConvectionConstants
    diffs: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    blew_up: bool = False
    data_norm: float = 0.0
    warned_large_data: bool = False
    final_norm: float = 0.0
    fixed_point_residual: float = np.inf


def plus_h1_norm(problem: StokesProblem, u: np.ndarray) -> float:
    dofs, Xp, _, _ = _plus_norms(problem)
    r = u[dofs]
    return float(np.sqrt(abs(r @ (Xp @ r))))


def solve_navier_stokes(
    problem: StokesProblem,
    data: TransmissionData,
    lam,
    max_iter: int = 25,
    tol: float = 1e-8,
    constants: ConvectionConstants | None = None,
    initial: np.ndarray | None = None,
) -> tuple[TransmissionSolution, PicardState]:
    """Picard iteration u^{k+1} = U(u^k) for the nonlinear transmission problem.

    Each step solves the linear problem with the convection load of the
    previous plus-side iterate added to f~+ (one factorization, many loads).
    Warns (does not abort) when the data norm exceeds zeta; detects blow-up
    at 10 eta.  Iteration differences are measured in the plus-side H1 norm.
    """
    if constants is None:
        constants = compute_constants(problem, lam)
    state = PicardState(constants=constants)
    state.data_norm = data.norm(problem)
    if np.isfinite(constants.zeta) and state.data_norm > constants.zeta:
        state.warned_large_data = True
        warnings.warn(
            f"data norm {state.data_norm:.3e} exceeds the smallness bound "
            f"zeta = {constants.zeta:.3e}; contraction is not guaranteed",
            stacklevel=2,
        )
    lam_zero = not callable(lam) and float(lam) == 0.0
    spaces = problem.spaces
    u = np.zeros(spaces.n_velocity) if initial is None else np.asarray(initial, float)
    sol = None
    prev_diff = None
    for k in range(1, max_iter + 1):
        state.iterations = k
        if lam_zero:
            data_k = data
        else:
            load = assemble_convection(spaces, lam, u)
            data_k = data.with_convection(load)
        sol = _solve_monolithic(problem, data_k)
        u_next = sol.pair.u_plus
        diff = plus_h1_norm(problem, u_next - u)
        state.diffs.append(diff)
        if prev_diff is not None and prev_diff > 0:
            state.ratios.append(diff / prev_diff)
        prev_diff = diff
        u = u_next
        state.final_norm = plus_h1_norm(problem, u)
        if np.isfinite(constants.eta) and state.final_norm > 10.0 * constants.eta:
            state.blew_up = True
            break
        if diff <= tol:
            state.converged = True
            break
    state.fixed_point_residual = state.diffs[-1] if state.diffs else np.inf
    return sol, state
