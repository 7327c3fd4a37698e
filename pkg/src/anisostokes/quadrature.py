"""Exact and numerical integration on simplices.

Polynomial integrands in barycentric coordinates are integrated exactly via
the factorial formula; everything else goes through Grundmann-Moller rules.
"""
from __future__ import annotations

from functools import lru_cache
from math import factorial

import numpy as np


def barycentric_monomial_integral(exponents: tuple[int, ...], dim: int) -> float:
    """Integral of prod_i lambda_i^{a_i} over a unit-volume simplex in R^dim.

    Uses n! * prod(a_i!) / (n + sum(a_i))! ; multiply by the cell volume for a
    physical simplex.
    """
    a = tuple(int(e) for e in exponents)
    if len(a) != dim + 1:
        raise ValueError("need one exponent per barycentric coordinate")
    num = factorial(dim)
    for e in a:
        num *= factorial(e)
    return num / factorial(dim + sum(a))


def _compositions(total: int, parts: int):
    """All tuples of `parts` nonnegative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


@lru_cache(maxsize=None)
def grundmann_moller(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Grundmann-Moller rule on the dim-simplex, exact to `degree`.

    Returns (points, weights): points are barycentric, shape (npts, dim+1);
    weights sum to 1 (rule normalized to unit simplex measure).  Some weights
    are negative, which is fine for the measuring-stick integrals these rules
    back (weighted norms, error norms, convection loads).
    """
    s = max(0, (degree - 1 + 1) // 2)  # rule degree is 2s+1 >= degree
    d = 2 * s + 1
    pts = []
    wts = []
    for i in range(s + 1):
        denom = d + dim - 2 * i
        coeff = (
            (-1.0) ** i
            * 2.0 ** (-2 * s)
            * float(denom) ** d
            / (factorial(i) * factorial(d + dim - i))
        )
        for beta in _compositions(s - i, dim + 1):
            pts.append([(2 * b + 1) / denom for b in beta])
            wts.append(coeff)
    points = np.asarray(pts, dtype=float)
    weights = np.asarray(wts, dtype=float)
    # raw weights sum to the standard-simplex volume 1/dim!;
    # rescale so they sum to exactly 1 (unit-measure convention)
    weights /= weights.sum()
    return points, weights


def map_to_simplex(bary: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Map barycentric points (npts, k+1) onto a simplex with rows `vertices`."""
    return bary @ vertices
