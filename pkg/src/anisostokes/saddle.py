"""Saddle-point solvers, inf-sup estimation, and operator norms.

Default backend factorizes the constrained KKT matrix once (SuperLU) so the
marginal cost of further right-hand sides is a back-substitution; the Uzawa
backend runs preconditioned CG on the pressure Schur complement and must
agree with the factorization to 1e-8.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .spaces import FieldPair, FunctionSpaces


class SolverError(RuntimeError):
    pass


@dataclass
class SaddleSystem:
    """Assembled mixed system with its boundary-condition descriptor.

    Traction-free mode carries `constraints`: rows C with C u = 0 appended
    symmetrically (multipliers act as a constant traction on the outer
    boundary).  Dirichlet mode eliminates `dirichlet_dofs` and pins the
    global constant pressure through a mean-zero multiplier.
    """

    spaces: FunctionSpaces
    A: sp.csr_matrix
    B: sp.csr_matrix
    F: np.ndarray
    G: np.ndarray
    bc_mode: str = "traction-free"
    constraints: sp.csr_matrix | None = None
    constraint_rhs: np.ndarray | None = None
    dirichlet_dofs: np.ndarray | None = None
    pressure_gram: sp.csr_matrix | None = None
    velocity_gram: sp.csr_matrix | None = None

    @property
    def n_velocity(self):
        return self.A.shape[0]

    @property
    def n_pressure(self):
        return self.B.shape[0]

    def n_multipliers(self):
        if self.bc_mode == "traction-free":
            return 0 if self.constraints is None else self.constraints.shape[0]
        return 1  # pressure mean

    def free_velocity_mask(self) -> np.ndarray:
        mask = np.ones(self.n_velocity, dtype=bool)
        if self.bc_mode == "dirichlet" and self.dirichlet_dofs is not None:
            mask[self.dirichlet_dofs] = False
        return mask

    def constrained_blocks(self):
        """(A, B, F) after Dirichlet elimination; identity on fixed rows."""
        if self.bc_mode != "dirichlet" or self.dirichlet_dofs is None:
            return self.A, self.B, self.F
        mask = self.free_velocity_mask()
        d = sp.diags(mask.astype(float))
        A = (d @ self.A @ d + sp.diags((~mask).astype(float))).tocsr()
        B = (self.B @ d).tocsr()
        F = np.where(mask, self.F, 0.0)
        return A, B, F

    def pressure_mean_vector(self) -> np.ndarray:
        Q = self.pressure_gram
        if Q is None:
            raise SolverError("dirichlet mode needs the pressure Gram")
        return np.asarray(Q @ np.ones(self.n_pressure)).ravel()


class KKTSolver:
    """Sparse LU of the constrained KKT matrix, reusable across load vectors."""

    def __init__(self, system: SaddleSystem):
        self.system = system
        Nu, Np = system.n_velocity, system.n_pressure
        A, B, _ = system.constrained_blocks()
        blocks_mode = system.bc_mode
        if blocks_mode == "traction-free":
            C = system.constraints
            k = 0 if C is None else C.shape[0]
            rows = [
                [A, B.T, C.T if k else None],
                [B, None, None],
            ]
            if k:
                rows.append([C, None, None])
            K = sp.bmat(rows, format="csc")
            self.k = k
        else:
            cp = system.pressure_mean_vector()
            cp_mat = sp.csr_matrix(cp[None, :])
            K = sp.bmat(
                [[A, B.T, None], [B, None, cp_mat.T], [None, cp_mat, None]], format="csc"
            )
            self.k = 1
        self.shape = K.shape
        self.nnz = K.nnz
        try:
            self.lu = splu(K, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # singular after BCs
            raise SolverError(f"KKT factorization failed (nullspace suspected): {exc}") from exc
        self.Nu, self.Np = Nu, Np

    def _rhs(self, F, G, c_rhs=None):
        out = np.zeros(self.shape[0])
        out[: self.Nu] = F
        if self.system.bc_mode == "dirichlet" and self.system.dirichlet_dofs is not None:
            out[self.system.dirichlet_dofs] = 0.0
        out[self.Nu : self.Nu + self.Np] = G
        if c_rhs is not None:
            out[self.Nu + self.Np :] = c_rhs
        return out

    def solve(self, F, G, c_rhs=None, trans="N"):
        x = self.lu.solve(self._rhs(F, G, c_rhs), trans=trans)
        u = x[: self.Nu]
        p = x[self.Nu : self.Nu + self.Np]
        m = x[self.Nu + self.Np :]
        return u, p, m

    def solve_raw(self, rhs, trans="N"):
        return self.lu.solve(rhs, trans=trans)


@dataclass
class SaddleReport:
    """Solution with residuals and the empirical stability quotient."""

    pair: FieldPair
    multipliers: np.ndarray
    residual_momentum: float
    residual_mass: float
    stability_quotient: float
    backend: str
    iterations: int = 0
    infsup: float | None = None
    factor_nnz: int = 0


def _dual_norm(gram_lu, vec) -> float:
    if np.linalg.norm(vec) == 0:
        return 0.0
    return float(np.sqrt(abs(vec @ gram_lu.solve(vec))))


def solve_saddle(system: SaddleSystem, solver: str = "direct", tol: float = 1e-10,
                 max_iter: int = 500, kkt: KKTSolver | None = None) -> SaddleReport:
    """Solve the constrained saddle system.

    "direct" factorizes the KKT matrix; "uzawa" runs CG on the pressure
    Schur complement with the velocity block factored.  Both satisfy the
    block residuals to tol relative and agree with each other to ~1e-8.
    """
    if not (np.all(np.isfinite(system.F)) and np.all(np.isfinite(system.G))):
        raise SolverError("non-finite data")
    if solver == "direct":
        kkt = kkt or KKTSolver(system)
        u, p, m = kkt.solve(system.F, system.G)
        iters = 0
        nnz = kkt.nnz
    elif solver == "uzawa":
        u, p, m, iters = _solve_uzawa(system, tol=tol, max_iter=max_iter)
        nnz = 0
    else:
        raise ValueError(f"unknown solver {solver!r}")

    A, B, F = system.constrained_blocks()
    mom = A @ u + B.T @ p - F
    if system.bc_mode == "traction-free" and system.constraints is not None and len(m):
        mom = mom + system.constraints.T @ m
    mass = B @ u - system.G
    if system.bc_mode == "dirichlet" and len(m):
        mass = mass + system.pressure_mean_vector() * m[0]
    scale = max(np.linalg.norm(system.F) + np.linalg.norm(system.G), 1e-300)
    pair = FieldPair.continuous(system.spaces, u, p)

    quotient = 0.0
    if system.velocity_gram is not None and system.pressure_gram is not None:
        X = system.velocity_gram
        Q = system.pressure_gram
        sol_norm = float(np.sqrt(abs(u @ (X @ u)))) + float(np.sqrt(abs(p @ (Q @ p))))
        dat = _riesz_data_norm(system)
        quotient = sol_norm / dat if dat > 0 else 0.0

    return SaddleReport(
        pair=pair,
        multipliers=m,
        residual_momentum=float(np.linalg.norm(mom) / scale) if scale > 0 else 0.0,
        residual_mass=float(np.linalg.norm(mass) / scale) if scale > 0 else 0.0,
        stability_quotient=quotient,
        backend=solver,
        iterations=iters,
        factor_nnz=nnz,
    )


def _riesz_data_norm(system: SaddleSystem) -> float:
    X = system.velocity_gram.tocsc()
    Q = system.pressure_gram.tocsc()
    cache = getattr(system, "_gram_lus", None)
    if cache is None:
        cache = (splu(X), splu(Q))
        system._gram_lus = cache
    xlu, qlu = cache
    return _dual_norm(xlu, system.F) + _dual_norm(qlu, system.G)


def _solve_uzawa(system: SaddleSystem, tol: float, max_iter: int):
    """CG on the Schur complement S = B Ahat^-1 B^T, mass preconditioned."""
    A, B, F = system.constrained_blocks()
    if system.bc_mode == "traction-free" and system.constraints is not None:
        C = system.constraints
        k = C.shape[0]
        Ahat = sp.bmat([[A, C.T], [C, None]], format="csc")
        Fhat = np.concatenate([F, np.zeros(k)])
        Bhat = sp.hstack([B, sp.csr_matrix((B.shape[0], k))]).tocsr()
    else:
        k = 0
        Ahat = A.tocsc()
        Fhat = F
        Bhat = B.tocsr()
    try:
        alu = splu(Ahat, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SolverError(f"velocity block factorization failed: {exc}") from exc
    Q = system.pressure_gram
    if Q is None:
        raise SolverError("uzawa needs the pressure Gram as preconditioner")
    qlu = splu(Q.tocsc())

    deflate = None
    if system.bc_mode == "dirichlet":
        ones = np.ones(system.n_pressure)
        deflate = ones / np.sqrt(ones @ (Q @ ones))

    def proj(q):
        if deflate is None:
            return q
        return q - (deflate @ (Q @ q)) * deflate

    def s_apply(q):
        return proj(Bhat @ alu.solve(Bhat.T @ proj(q)))

    rhs = proj(Bhat @ alu.solve(Fhat) - system.G)
    p = np.zeros(system.n_pressure)
    r = rhs - s_apply(p)
    z = proj(qlu.solve(r))
    d = z.copy()
    rz = r @ z
    scale = max(np.sqrt(abs(rhs @ qlu.solve(rhs))), 1e-300)
    iters = 0
    for iters in range(1, max_iter + 1):
        Sd = s_apply(d)
        alpha = rz / (d @ Sd)
        p += alpha * d
        r -= alpha * Sd
        z = proj(qlu.solve(r))
        rz_new = r @ z
        if np.sqrt(abs(rz_new)) <= tol * scale:
            break
        d = z + (rz_new / rz) * d
        rz = rz_new
    else:
        raise SolverError("uzawa iteration did not converge")
    x = alu.solve(Fhat - Bhat.T @ p)
    u, m = x[: system.n_velocity], x[system.n_velocity :]
    if system.bc_mode == "dirichlet":
        m = np.zeros(1)
    return u, p, m, iters


def estimate_infsup(
    system: SaddleSystem,
    method: str = "auto",
    tol: float = 1e-9,
    max_iter: int = 200,
    seed: int = 0,
) -> float:
    """Discrete inf-sup constant of b against the weighted H1 x L2 norms.

    beta_h^2 is the smallest (after deflation) eigenvalue of the pressure
    Schur complement B X^-1 B^T relative to the pressure mass; Dirichlet
    mode deflates the constant-pressure direction, traction-free needs none.
    """
    A, B, F = system.constrained_blocks()
    X = system.velocity_gram
    Q = system.pressure_gram
    if X is None or Q is None:
        raise SolverError("inf-sup estimation needs both norm Grams")
    mask = system.free_velocity_mask()
    Xf = X[mask][:, mask].tocsc()
    Bf = system.B[:, mask].tocsr()
    xlu = splu(Xf, permc_spec="MMD_AT_PLUS_A")
    Np = system.n_pressure

    deflate = []
    if system.bc_mode == "dirichlet":
        ones = np.ones(Np)
        deflate.append(ones / np.sqrt(ones @ (Q @ ones)))

    if method == "auto":
        method = "dense" if Np <= 2500 else "iterative"
    if method == "dense":
        Z = xlu.solve(Bf.T.toarray())
        S = Bf @ Z
        Qd = Q.toarray()
        from scipy.linalg import eigh

        w, V = eigh(S, Qd)
        w = np.maximum(w, 0.0)
        skip = len(deflate)
        beta2 = np.sort(w)[skip]
        return float(np.sqrt(beta2))

    def proj(q):
        for dvec in deflate:
            q = q - (dvec @ (Q @ q)) * dvec
        return q

    def s_apply(q):
        return proj(Bf @ xlu.solve(Bf.T @ proj(q)))

    qlu = splu(Q.tocsc())
    rng = np.random.default_rng(seed)
    y = proj(rng.standard_normal(Np))
    y /= np.sqrt(y @ (Q @ y))
    lam_old = np.inf
    for _ in range(max_iter):
        rhs = Q @ y
        z, info = _pcg(s_apply, rhs, lambda r: proj(qlu.solve(r)), tol=1e-12, max_iter=2000)
        if info != 0:
            raise SolverError("inner CG stagnation in inf-sup iteration")
        z = proj(z)
        lam = float((z @ (Q @ y)) / (z @ (Q @ z)))
        y = z / np.sqrt(z @ (Q @ z))
        if abs(lam - lam_old) <= tol * abs(lam):
            return float(np.sqrt(max(lam, 0.0)))
        lam_old = lam
    raise SolverError("inf-sup inverse iteration stagnated")


def _pcg(apply_s, b, precond, tol, max_iter):
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    d = z.copy()
    rz = r @ z
    nb = np.linalg.norm(b)
    if nb == 0:
        return x, 0
    for _ in range(max_iter):
        Sd = apply_s(d)
        dSd = d @ Sd
        if dSd <= 0:
            return x, 1
        alpha = rz / dSd
        x += alpha * d
        r -= alpha * Sd
        if np.linalg.norm(r) <= tol * nb:
            return x, 0
        z = precond(r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, 2


@dataclass
class OperatorNormResult:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def estimate_operator_norm(
    apply,
    adjoint_apply=None,
    gram_in=None,
    gram_out=None,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    n_in: int | None = None,
) -> OperatorNormResult:
    """Largest generalized singular value by power iteration on the normal map.

    `apply` may be a matrix (adjoint derived automatically) or a callable
    with `adjoint_apply` supplied.  `gram_in`/`gram_out` are SPD norm
    matrices (identity if omitted).  Converges to ~1% or flags failure.
    """
    if adjoint_apply is None:
        M = apply
        if callable(M):
            raise ValueError("callable maps need an explicit adjoint_apply")
        Ms = sp.csr_matrix(M)
        apply = lambda x: Ms @ x
        adjoint_apply = lambda y: Ms.T @ y
        n_in = Ms.shape[1]
    if n_in is None:
        raise ValueError("n_in required for callable maps")

    def make_gram(g, n):
        if g is None:
            return (lambda x: x), (lambda x: x)
        gs = sp.csc_matrix(g)
        lu = splu(gs)
        return (lambda x: gs @ x), (lambda x: lu.solve(x))

    gin_dot, gin_solve = make_gram(gram_in, n_in)
    gout_dot, _ = make_gram(gram_out, None)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_in)
    x /= np.sqrt(abs(x @ gin_dot(x)))
    sigma2_old = 0.0
    for it in range(1, max_iter + 1):
        w = adjoint_apply(gout_dot(apply(x)))
        sigma2 = float(abs(x @ w))
        v = gin_solve(w)
        nrm = np.sqrt(abs(v @ gin_dot(v)))
        if nrm == 0:
            return OperatorNormResult(0.0, True, it)
        x = v / nrm
        if it > 1 and abs(sigma2 - sigma2_old) <= tol * abs(sigma2):
            return OperatorNormResult(float(np.sqrt(sigma2)), True, it)
        sigma2_old = sigma2
    return OperatorNormResult(float(np.sqrt(sigma2_old)), False, max_iter)
