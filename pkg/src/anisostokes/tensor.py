"""The L-infinity viscosity tensor and its certificates.

A coefficient tensor is a spatial field of n^4 entries a[i, j, alpha, beta];
the flux it induces on a velocity gradient G (G[j, beta] = d_beta u_j) is
result[alpha, i] = a[i, j, alpha, beta] G[j, beta].  Discontinuities must be
aligned with mesh facets, so evaluation happens once per cell (centroid).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Entries = Callable[[np.ndarray], np.ndarray]


@dataclass
class EllipticityReport:
    passed: bool
    worst_quotient: float
    threshold: float
    witness_point: np.ndarray
    witness_matrix: np.ndarray

    def __bool__(self) -> bool:
        return self.passed


@dataclass
class CoeffTensor:
    """Viscosity tensor field with boundedness/ellipticity certificate data.

    `entries(x)` returns the (n, n, n, n) array a[i, j, alpha, beta] at the
    point x.  `c_bound >= 1` certifies |a| <= c_bound and the strong
    ellipticity lower bound 1/c_bound; for general tensors it is caller
    supplied and only checked by sampling.  Immutable after construction
    except for the advisory `certificate` slot.
    """

    dim: int
    entries: Entries
    c_bound: float
    kind: str = "general"
    certificate: EllipticityReport | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if not np.isfinite(self.c_bound) or self.c_bound <= 0:
            raise ValueError("c_bound must be positive and finite")

    def at(self, x) -> np.ndarray:
        a = np.asarray(self.entries(np.asarray(x, dtype=float)), dtype=float)
        if a.shape != (self.dim,) * 4:
            raise ValueError(f"entries returned shape {a.shape}")
        return a


def make_isotropic(mu_field, mu_lower: float, mu_upper: float, dim: int = 3) -> CoeffTensor:
    """Isotropic tensor a[i,j,alpha,beta] = mu(x) delta_ab delta_ij.

    `mu_field` is a scalar callable of the point (or a constant).  Every
    evaluation checks mu_lower <= mu(x) <= mu_upper and raises on violation.
    """
    if not (0 < mu_lower <= mu_upper) or not np.isfinite(mu_upper):
        raise ValueError("need 0 < mu_lower <= mu_upper < inf")
    mu = mu_field if callable(mu_field) else (lambda x, _v=float(mu_field): _v)
    eye4 = np.einsum("ij,ab->ijab", np.eye(dim), np.eye(dim))

    def entries(x):
        m = float(mu(x))
        if not (mu_lower - 1e-14 <= m <= mu_upper + 1e-14):
            raise ValueError(f"mu(x)={m} violates bounds [{mu_lower}, {mu_upper}] at x={x}")
        return m * eye4

    c = max(mu_upper, 1.0 / mu_lower)
    return CoeffTensor(dim=dim, entries=entries, c_bound=c, kind="isotropic")


def make_two_phase_isotropic(mu_plus: float, mu_minus: float, inside, dim: int = 3) -> CoeffTensor:
    """Piecewise-constant isotropic tensor: mu_plus where inside(x), else mu_minus."""
    lo, hi = sorted((float(mu_plus), float(mu_minus)))

    def mu(x):
        return mu_plus if inside(x) else mu_minus

    return make_isotropic(mu, lo, hi, dim=dim)


def make_diagonal_anisotropic(weights, dim: int = 3) -> CoeffTensor:
    """Direction-weighted tensor a[i,j,alpha,beta] = d_alpha delta_ab delta_ij.

    Nonpositive weights are accepted (the result simply fails certification);
    this is the standard negative control for the ellipticity checker.
    """
    d = np.asarray(weights, dtype=float)
    if d.shape != (dim,):
        raise ValueError(f"need {dim} direction weights")
    ent = np.einsum("a,ij,ab->ijab", d, np.eye(dim), np.eye(dim))
    if np.min(d) > 0:
        c = max(np.max(d), 1.0 / np.min(d))
    else:
        c = max(np.max(np.abs(d)), 1.0)
    return CoeffTensor(dim=dim, entries=lambda x: ent, c_bound=c, kind="general")


def make_symmetric_gradient(mu: float, dim: int = 3) -> CoeffTensor:
    """The symmetrized-gradient tensor mu (d_aj d_bi + d_ab d_ij).

    Elliptic only on symmetric trial matrices; kept as the canonical tensor
    that check_strong_ellipticity must reject.
    """
    eye = np.eye(dim)
    ent = float(mu) * (np.einsum("aj,bi->ijab", eye, eye) + np.einsum("ab,ij->ijab", eye, eye))
    return CoeffTensor(dim=dim, entries=lambda x: ent, c_bound=max(2 * mu, 1.0 / mu), kind="general")


def adjoint(t: CoeffTensor) -> CoeffTensor:
    """Adjoint tensor a*[i,j,alpha,beta] = a[j,i,beta,alpha]; same bound."""

    def entries(x):
        return np.transpose(t.entries(x), (1, 0, 3, 2))

    return CoeffTensor(dim=t.dim, entries=entries, c_bound=t.c_bound, kind=t.kind)


def contract(t: CoeffTensor, x, G) -> np.ndarray:
    """Pointwise flux: result[alpha, i] = a[i,j,alpha,beta](x) G[j,beta]."""
    G = np.asarray(G, dtype=float)
    return np.einsum("ijab,jb->ai", t.at(x), G)


def _structured_trials(dim: int) -> list[np.ndarray]:
    """Deterministic probes: basis matrices and normalized antisymmetric pairs."""
    trials = []
    for i in range(dim):
        for j in range(dim):
            E = np.zeros((dim, dim))
            E[i, j] = 1.0
            trials.append(E)
            if i < j:
                A = np.zeros((dim, dim))
                A[i, j], A[j, i] = 1.0, -1.0
                trials.append(A / np.sqrt(2.0))
    trials.append(np.eye(dim) / np.sqrt(dim))
    return trials


def check_strong_ellipticity(
    t: CoeffTensor,
    sample_points,
    trial_count: int = 64,
    rng_seed: int = 0,
    tolerance: float = 1e-12,
) -> EllipticityReport:
    """Sampled certification of a xi:xi >= |xi|^2 / c_bound.

    Trial matrices are unit-Frobenius-norm: `trial_count` random draws plus a
    fixed structured set (so e.g. antisymmetric failure directions of the
    symmetrized-gradient tensor are always probed).  Advisory only: passing
    does not prove ellipticity a.e.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if pts.size == 0:
        raise ValueError("empty sample set")
    if trial_count < 1:
        raise ValueError("trial_count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    trials = _structured_trials(t.dim)
    for _ in range(trial_count):
        xi = rng.standard_normal((t.dim, t.dim))
        trials.append(xi / np.linalg.norm(xi))

    worst = np.inf
    wit_x = pts[0]
    wit_xi = trials[0]
    for x in pts:
        a = t.at(x)
        for xi in trials:
            # contraction a_{ij}^{ab} xi_{ia} xi_{jb}
            q = float(np.einsum("ijab,ia,jb->", a, xi, xi))
            if q < worst:
                worst, wit_x, wit_xi = q, x, xi
    threshold = 1.0 / t.c_bound - tolerance
    report = EllipticityReport(
        passed=bool(worst >= threshold),
        worst_quotient=worst,
        threshold=threshold,
        witness_point=np.asarray(wit_x),
        witness_matrix=np.asarray(wit_xi),
    )
    t.certificate = report
    return report
