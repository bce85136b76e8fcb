"""Adaptive quadrature and scalar minimisation primitives.

The integrators wrap QUADPACK (``scipy.integrate.quad``), which is an
adaptive Gauss-Kronrod scheme.  What this module adds is the bookkeeping the
rest of the package relies on: splitting at declared singular points, an
error budget shared across pieces, and exact treatment of logarithmic
singularities through QUADPACK's algebraic-logarithmic weights.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class QuadResult(NamedTuple):
    value: float
    error: float


@dataclass(frozen=True)
class QuadratureSpec:
    """A definite integral over ``[lo, hi]`` with points to split at."""

    integrand: Callable[[float], float]
    lo: float
    hi: float
    tolerance: float = 1e-10
    singularities: Sequence[float] = field(default_factory=tuple)

    def evaluate(self):
        return integrate_split(self.integrand, self.lo, self.hi, tol=self.tolerance,
                               singularities=self.singularities)


def _pieces(lo, hi, points):
    inner = sorted({float(p) for p in points if lo < p < hi})
    edges = [lo, *inner, hi]
    return list(zip(edges[:-1], edges[1:]))


def _quad(func, lo, hi, tol, limit, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, err = integrate.quad(func, lo, hi, epsabs=tol, epsrel=0.0, limit=limit, **kw)
        except integrate.IntegrationWarning:
            # Accept the best estimate; the returned error tells the caller.
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            value, err = integrate.quad(func, lo, hi, epsabs=tol, epsrel=0.0, limit=limit, **kw)
    return value, err


def integrate_split(func, lo, hi, tol=1e-10, singularities=(), limit=500):
    """Integrate ``func`` over ``[lo, hi]``, splitting at interior singularities.

    Infinite endpoints are allowed.  The absolute tolerance is shared evenly
    between the pieces.
    """
    if lo == hi:
        return QuadResult(0.0, 0.0)
    sign = 1.0
    if lo > hi:
        lo, hi, sign = hi, lo, -1.0
    pieces = _pieces(lo, hi, singularities)
    budget = tol / len(pieces)
    total = 0.0
    err = 0.0
    for a, b in pieces:
        v, e = _quad(func, a, b, budget, limit)
        total += v
        err += e
    return QuadResult(sign * total, err)


def integrate_log_singular(func, z0, lo, hi, tol=1e-10, radius=1.0, singularities=(), limit=500):
    """Integrate ``func(z) * log|z - z0|`` over ``[lo, hi]``.

    A neighbourhood of ``z0`` of half-width ``radius`` is handled with
    QUADPACK's algebraic-logarithmic weight (QAWS), which integrates the
    logarithm exactly against a smooth ``func``.  The remainder is ordinary
    adaptive quadrature.
    """
    if not lo < hi:
        raise ValueError("integrate_log_singular needs lo < hi")

    def logged(z):
        return func(z) * math.log(abs(z - z0))

    if not lo <= z0 <= hi:
        return integrate_split(logged, lo, hi, tol, singularities, limit)
    near_lo = max(lo, z0 - radius)
    near_hi = min(hi, z0 + radius)
    budget = tol / 4.0
    total = 0.0
    err = 0.0
    if near_lo < z0:
        v, e = _quad(func, near_lo, z0, budget, limit, weight="alg-logb", wvar=(0.0, 0.0))
        total += v
        err += e
    if z0 < near_hi:
        v, e = _quad(func, z0, near_hi, budget, limit, weight="alg-loga", wvar=(0.0, 0.0))
        total += v
        err += e
    for a, b in ((lo, near_lo), (near_hi, hi)):
        if a < b:
            r = integrate_split(logged, a, b, budget, singularities, limit)
            total += r.value
            err += r.error
    return QuadResult(total, err)


class MinResult(NamedTuple):
    x: float
    fun: float
    iterations: int
    flagged: bool


def golden_section(f, lo, hi, tol=1e-8, max_iter=500):
    """Minimise a unimodal ``f`` on ``[lo, hi]`` to bracket width ``tol``."""
    if hi < lo:
        lo, hi = hi, lo
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1 = f(x1)
    f2 = f(x2)
    it = 0
    while hi - lo > tol and it < max_iter:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
        it += 1
    if f1 <= f2:
        return MinResult(float(x1), float(f1), it, False)
    return MinResult(float(x2), float(f2), it, False)


def scan_then_golden(f, lo, hi, n_grid=256, tol=1e-8, log_grid=False):
    """Grid scan followed by golden-section refinement around the best node.

    ``flagged`` is set when the scan sees more than one strict local minimum,
    i.e. when unimodality of ``f`` on the window is in doubt.  Ties between
    grid nodes go to the lowest index.
    """
    if log_grid:
        grid = np.geomspace(lo, hi, n_grid)
    else:
        grid = np.linspace(lo, hi, n_grid)
    values = np.array([f(x) for x in grid])
    best = int(np.argmin(values))
    interior = values[1:-1]
    n_local = int(np.sum((interior < values[:-2]) & (interior < values[2:])))
    if values[0] < values[1]:
        n_local += 1
    if values[-1] < values[-2]:
        n_local += 1
    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, n_grid - 1)]
    refined = golden_section(f, left, right, tol=tol)
    if refined.fun > values[best]:
        refined = MinResult(float(grid[best]), float(values[best]), refined.iterations, False)
    return MinResult(float(refined.x), float(refined.fun), refined.iterations, n_local > 1)
