"""Quadrature-backed thresholds, certificates and parameter searches.

Everything here is a deterministic function of a :class:`NoiseModel` and
scalar parameters.  Integrals are evaluated over the model's truncation
window with adaptive Gauss-Kronrod quadrature (see :mod:`.quadrature`);
tolerances are absolute.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .noise import NoiseModel
from .quadrature import (QuadResult, integrate_log_singular, integrate_split,
                         scan_then_golden)


class Quantity(NamedTuple):
    value: float
    error: float


# -- linear thresholds --------------------------------------------------------

def second_moment_threshold(model):
    """Largest ``a`` the optimal linear memoryless scheme stabilises.

    The per-step factor of ``u = d y`` is ``E(a - dZ)^2``, minimised at
    ``d = a E[Z]/E[Z^2]`` to ``a^2 Var(Z)/E[Z^2]``; hence
    ``a* = sqrt(E[Z^2]/Var Z)`` (``sqrt(1 + 1/s^2)`` for mean one).
    """
    if model.kind == "gaussian_mean_one":
        return math.sqrt(1.0 + 1.0 / model.sigma ** 2)
    return math.sqrt(model.second_moment / model.variance)


def optimal_gain(model, a):
    if model.kind == "gaussian_mean_one":
        return a / (1.0 + model.sigma ** 2)
    return a * model.mean / model.second_moment


def linear_factor(model, a, d):
    """``E(a - dZ)^2``: one-step second-moment factor of ``u = d y``."""
    return a * a - 2.0 * a * d * model.mean + d * d * model.second_moment


# -- tightness ----------------------------------------------------------------

def expected_log_gap(model, d, tol=1e-8):
    """``E log|1 - d Z|``.

    The logarithmic singularity at ``z = 1/d`` is integrated exactly with an
    algebraic-logarithmic quadrature weight.
    """
    return expected_log_gap_with_error(model, d, tol).value


def expected_log_gap_with_error(model, d, tol=1e-8):
    if d == 0:
        return Quantity(0.0, 0.0)
    lo, hi = model.window
    z0 = 1.0 / d
    scale = math.sqrt(model.variance)
    # log|1 - dz| = log|d| + log|z - 1/d|; E[1] = 1 over the window.
    res = integrate_log_singular(model.pdf, z0, lo, hi, tol=tol / 2, radius=scale,
                                 singularities=[model.mode])
    return Quantity(math.log(abs(d)) + res.value, res.error)


@dataclass(frozen=True)
class TightnessGain:
    d_dagger: float
    a_dagger: float
    mu: float
    flagged: bool


def optimize_tightness_gain(model, n_grid=256, tol=1e-6):
    """Minimise ``E log|1 - dZ|`` over ``d in (0, 4/sqrt(E Z^2)]``.

    Returns the minimiser and ``exp(-min)``.  ``flagged`` is set when the
    grid scan finds several local minima; the global grid minimum is then
    refined.
    """
    return _optimize_tightness_gain(model, n_grid, tol)


@lru_cache(maxsize=64)
def _optimize_tightness_gain(model, n_grid, tol):
    d_hi = 4.0 / math.sqrt(model.second_moment)
    f = lambda d: expected_log_gap(model, d, tol=1e-9)
    res = scan_then_golden(f, d_hi / n_grid, d_hi, n_grid=n_grid, tol=tol / 4)
    mu = expected_log_gap(model, res.x, tol=1e-10)
    return TightnessGain(res.x, math.exp(-mu), mu, res.flagged)


# -- Gaussian sign lemma ------------------------------------------------------

def certify_gaussian_sgn_bound(sigma, tol=1e-10):
    """``E[sgn(Z) (1 - Z/(1+s^2))]`` for ``Z ~ N(1, s^2)``, by quadrature.

    Returns value and error estimate; the value is positive for every ``s``.
    """
    model = NoiseModel.gaussian_mean_one(sigma)
    c = 1.0 + sigma * sigma
    lo, hi = model.window
    pdf = model.pdf

    def integrand(z):
        g = 1.0 - z / c
        return (g if z >= 0 else -g) * pdf(z)

    res = integrate_split(integrand, lo, hi, tol=tol / 4, singularities=[0.0, 1.0, c])
    return Quantity(res.value, res.error)


def gamma_bound_sides(s):
    """Both sides of the comparison used for the Gaussian sign lemma.

    Returns ``(sqrt(2 pi) * int_0^s gamma, piecewise lower bound, s exp(-s^2/2))``;
    the lemma needs the middle term to exceed the last one.
    """
    lhs = integrate_split(lambda x: math.exp(-0.5 * x * x), 0.0, s, tol=1e-13).value
    piecewise = s - s ** 3 / 6.0 if s <= math.sqrt(2.0) else 2.0 * math.sqrt(2.0) / 3.0
    return lhs, piecewise, s * math.exp(-0.5 * s * s)


# -- two-step (mean one) ------------------------------------------------------

class TwoStepMoments(NamedTuple):
    EA2: float
    EAB: float
    EB2: float


@lru_cache(maxsize=64)
def two_step_moments(model):
    """``E A^2``, ``E AB``, ``E B^2`` of the perturbed linear scheme with ``h(x) = |x|``.

    With ``g(z) = 1 - z/E[Z^2]`` (``E[Z^2] = 1 + s^2`` for mean one),
    ``A = g(Z') g(Z)`` and ``B = sgn(Z') g(Z) |Z/g(Z)|``.  The pole of
    ``|Z/g(Z)|`` cancels against ``g(Z)^2`` leaving ``|g(Z) Z|``.
    """
    if abs(model.mean - 1.0) > 1e-9:
        raise ValueError("two-step mean-one analysis needs E[Z] = 1")
    c = model.second_moment
    root = [0.0, c]
    eg2 = model.expect(lambda z: (1.0 - z / c) ** 2, singularities=root)
    e_sgn_g = model.expect(lambda z: (1.0 if z >= 0 else -1.0) * (1.0 - z / c), singularities=root)
    e_abs_gz = model.expect(lambda z: abs((1.0 - z / c) * z), singularities=root)
    eb2 = model.expect(lambda z: z * z)
    return TwoStepMoments(eg2 * eg2, e_abs_gz * e_sgn_g, eb2)


def _general_h_moments(model, a, h, tol=1e-9):
    c = model.second_moment
    lo, hi = model.window
    pdf = model.pdf
    inner_pts = [0.0, model.mode]
    outer_pts = [0.0, c, model.mode]

    def b_val(z, zp):
        g = 1.0 - z / c
        w = a * zp * g
        if w == 0.0:
            return 0.0
        return w * float(h(z / w))

    def inner(z, which):
        g = 1.0 - z / c

        def f(zp):
            b = b_val(z, zp)
            if which == "ab":
                return (1.0 - zp / c) * g * b * pdf(zp)
            return b * b * pdf(zp)

        return integrate_split(f, lo, hi, tol=tol / 10, singularities=inner_pts).value * pdf(z)

    eab = integrate_split(lambda z: inner(z, "ab"), lo, hi, tol=tol, singularities=outer_pts).value
    eb2 = integrate_split(lambda z: inner(z, "b2"), lo, hi, tol=tol, singularities=outer_pts).value
    eg2 = model.expect(lambda z: (1.0 - z / c) ** 2, singularities=[c])
    return TwoStepMoments(eg2 * eg2, eab, eb2)


def two_step_contraction(model, a, eps, h=None):
    """Two-step second-moment factor ``a^4 E A^2 - 2 eps a^2 E AB + eps^2 E B^2``.

    ``h`` defaults to ``|x|``.  Any other callable is integrated with nested
    one-dimensional quadrature; there ``B = a Z' g(Z) h(Z / (a Z' g(Z)))``.
    """
    if h is None:
        m = two_step_moments(model)
    else:
        m = _general_h_moments(model, a, h)
    return a ** 4 * m.EA2 - 2.0 * eps * a * a * m.EAB + eps * eps * m.EB2


# -- zero-mean two-step -------------------------------------------------------

def signed_gap_expectation(model, t, tol=1e-12):
    """``F(t) = E[Z |t/Z - 1|] = E[sgn(Z) |t - Z|]``."""
    lo, hi = model.window
    pdf = model.pdf
    f = lambda z: (1.0 if z >= 0 else -1.0) * abs(t - z) * pdf(z)
    return integrate_split(f, lo, hi, tol=tol, singularities=sorted({0.0, float(t), model.mode})).value


@lru_cache(maxsize=64)
def _abs_mean(model):
    return model.expect(lambda z: abs(z), singularities=[0.0])


def zero_mean_moments(model, eps0):
    """``(E A, E A^2)`` for ``A = |Z'| sgn(Z) |eps0 - Z| / eps0``."""
    ea = _abs_mean(model) * signed_gap_expectation(model, eps0) / eps0
    m1, m2 = model.mean, model.second_moment
    ea2 = m2 * (eps0 * eps0 - 2.0 * eps0 * m1 + m2) / (eps0 * eps0)
    return ea, ea2


def zero_mean_two_step_contraction(model, a, eps, eps0):
    """``a^2 E(a + eps A)^2`` for the zero-mean two-step scheme."""
    ea, ea2 = zero_mean_moments(model, eps0)
    return a * a * (a * a + 2.0 * a * eps * ea + eps * eps * ea2)


# -- epsilon search -----------------------------------------------------------

@dataclass(frozen=True)
class EpsilonSearch:
    eps: float
    factor: float
    eps0: float = None
    improved: bool = True
    flag: str = ""


def _search_eps(factor, n_grid, eps_max):
    res = scan_then_golden(factor, eps_max * 1e-4, eps_max, n_grid=n_grid, tol=1e-10,
                           log_grid=True)
    return res


def search_epsilon(model, a, variant, n_grid=64, eps_max=0.5):
    """Minimise the two-step factor over ``eps`` (and ``eps0`` for zero mean).

    A ``n_grid``-point logarithmic scan of ``(0, eps_max]`` is refined by
    golden-section search.  When no candidate reaches a factor below 1 the
    best one is returned with ``flag = "no-improvement"``.
    """
    return _search_epsilon(model, float(a), variant, n_grid, eps_max)


@lru_cache(maxsize=256)
def _search_epsilon(model, a, variant, n_grid, eps_max):
    if variant == "mean_one":
        res = _search_eps(lambda e: two_step_contraction(model, a, e), n_grid, eps_max)
        improved = res.fun < 1.0
        return EpsilonSearch(res.x, res.fun, None, improved, "" if improved else "no-improvement")
    if variant != "zero_mean":
        raise ValueError("variant must be 'mean_one' or 'zero_mean'")
    if abs(model.mean) > 1e-9:
        raise ValueError("zero-mean search needs E[Z] = 0")
    scale = math.sqrt(model.variance)

    def best_for(eps0):
        ea, ea2 = zero_mean_moments(model, eps0)
        return _search_eps(lambda e: a * a * (a * a + 2.0 * a * e * ea + e * e * ea2),
                           n_grid, eps_max)

    outer = scan_then_golden(lambda t: best_for(t).fun, scale * 1e-3, 4.0 * scale,
                             n_grid=n_grid, tol=1e-8, log_grid=True)
    inner = best_for(outer.x)
    improved = inner.fun < 1.0
    return EpsilonSearch(inner.x, inner.fun, outer.x, improved, "" if improved else "no-improvement")


def max_improved_growth(model, variant, tol=1e-9):
    """Largest ``a`` at which :func:`search_epsilon` still reaches factor <= 1."""
    lo = second_moment_threshold(model) if variant == "mean_one" else 1.0
    if search_epsilon(model, lo, variant).factor > 1.0:
        return lo
    hi = 2.0 * lo
    while search_epsilon(model, hi, variant).factor <= 1.0:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if search_epsilon(model, mid, variant).factor <= 1.0:
            lo = mid
        else:
            hi = mid
    return lo


# -- memoryless nonlinear schemes: alpha_k and the witness --------------------

def _rho_const(M):
    return 1.0 / (1.0 - M ** -2.0)


def alpha_k(model, M, k, y, form="substituted", tol=1e-13):
    """``alpha_k(y) = int x^k rho(x) f_Z(y/x) / |x| dx`` for the ``|x|^-3`` density on ``[1, M]``.

    ``form="substituted"`` integrates in ``s = y/x`` over ``[y/M, y]``;
    ``form="direct"`` integrates in ``x`` over ``[1, M]``.
    """
    if y == 0:
        raise ValueError("alpha_k is defined for y != 0")
    if k not in (0, 1, 2):
        raise ValueError("k must be 0, 1 or 2")
    if not M > 1:
        raise ValueError("M must exceed 1")
    return alpha_all(model, M, y, form=form, tol=tol)[k]


def alpha_all(model, M, y, form="substituted", tol=1e-13):
    """``(alpha_0, alpha_1, alpha_2)`` at ``y``."""
    if y < 0:
        a0, a1, a2 = alpha_all(model, M, -y, form, tol)
        return np.array([a0, -a1, a2])
    if y == 0:
        raise ValueError("alpha_k is defined for y != 0")
    pdf = model.density
    lo, hi = model.window
    reach = max(abs(lo), abs(hi))
    c = _rho_const(M)
    if form == "substituted":
        u, v = y / M, min(y, reach)
        if u >= v:
            return np.zeros(3)
        powers = np.array([2.0, 1.0, 0.0])  # s^(2-k) for k = 0, 1, 2
        signs = np.array([1.0, -1.0, 1.0])  # (-1)^(2-k)

        def f(s):
            return s ** powers * (pdf(s) + signs * pdf(-s))

        pts = sorted(p for p in {abs(model.mode), 1.0} if u < p < v)
        edges = [u, *pts, v]
        total = np.zeros(3)
        for a_, b_ in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad_vec(f, a_, b_, epsabs=tol, epsrel=1e-12)
            total += val
        return c * total / y ** (3.0 - np.arange(3))
    if form == "direct":
        x_lo = max(1.0, y / reach)
        if x_lo >= M:
            return np.zeros(3)
        ks = np.arange(3)
        signs = (-1.0) ** ks

        # x = exp(t) keeps the integrand well scaled over [1, M]
        def f(t):
            x = math.exp(t)
            return (x ** ks * pdf(y / x) + signs * x ** ks * pdf(-y / x)) / x ** 3

        val, _ = integrate.quad_vec(f, math.log(x_lo), math.log(M), epsabs=tol, epsrel=1e-12)
        return c * val
    raise ValueError("form must be 'substituted' or 'direct'")


def optimal_h(model, M, y):
    """Pointwise minimiser ``alpha_1(y)/alpha_0(y)`` of ``E(X - h(XZ))^2``."""
    a0, a1, _ = alpha_all(model, M, y)
    return a1 / a0 if a0 > 0 else 0.0


def optimal_h_table(model, M, grid):
    grid = np.asarray(grid, dtype=float)
    return np.array([optimal_h(model, M, y) if y != 0 else 0.0 for y in grid])


def sample_rho(M, rng, size):
    """Draws from the density proportional to ``|x|^-3`` on ``1 <= |x| <= M``."""
    u = rng.random(size)
    mag = (1.0 - u * (1.0 - M ** -2.0)) ** -0.5
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * mag


def rho_second_moment(M):
    """``E X^2 = 2 log M / (1 - M^-2)`` for the ``|x|^-3`` density."""
    return 2.0 * math.log(M) * _rho_const(M)


def _residual(model, M, y):
    a0, a1, a2 = alpha_all(model, M, y)
    if a0 <= 0.0:
        return 0.0
    return max(a2 - a1 * a1 / a0, 0.0)


def min_memoryless_error(model, M, band=None, tol=None):
    """``min_h E(X - h(XZ))^2 = int (alpha_2 - alpha_1^2/alpha_0) dy``.

    With ``band=(lo, hi)`` only ``lo <= |y| <= hi`` is integrated.  The
    integrand is even in ``y``; the positive half-line is integrated in
    ``log y``.
    """
    lo_w, hi_w = model.window
    reach = max(abs(lo_w), abs(hi_w))
    if tol is None:
        tol = 1e-9 * rho_second_moment(M)
    if band is None:
        t_lo, t_hi = math.log(1e-12), math.log(M * reach)
    else:
        t_lo, t_hi = math.log(band[0]), math.log(min(band[1], M * reach))
    if t_lo >= t_hi:
        return 0.0
    f = lambda t: _residual(model, M, math.exp(t)) * math.exp(t)
    pts = [0.0, math.log(reach), math.log(M), math.log(M) + math.log(reach) / 2]
    half = integrate_split(f, t_lo, t_hi, tol=tol / 2, singularities=pts, limit=1000).value
    return 2.0 * half


@dataclass
class WitnessResult:
    M: float
    ratio: float
    second_moment: float
    min_error: float
    scanned: list = field(default_factory=list)
    proof_bounds: dict = field(default_factory=dict)


class WitnessNotFound(RuntimeError):
    pass


def no_contraction_ratio(model, a, M):
    """``a^2 min_h E(X - h(XZ))^2 / E X^2`` for ``X`` with the ``|x|^-3`` density."""
    ex2 = rho_second_moment(M)
    err = min_memoryless_error(model, M)
    return a * a * err / ex2, ex2, err


def _proof_bound(model, a, M, eps, n_pts=41):
    """Lower bound with the slack ``delta`` inferred from the computed alphas."""
    s2 = model.variance
    c2 = model.second_moment
    ys = np.geomspace(M ** eps, M ** (1 - eps), n_pts)
    worst = min(_residual(model, M, y) * y * c2 / s2 for y in ys)
    delta = max(_rho_const(M) - 1.0, 1.0 - worst)
    return float((1 - delta) * (1 - 2 * eps) / (1 + delta) * a * a * s2 / c2), float(delta)


def no_contraction_witness(model, a, M_grid=None, eps_grid=(0.05, 0.02, 0.01)):
    """Find ``M`` such that ``a^2 min_h E(X - h(XZ))^2 > E X^2``.

    ``M`` runs over a geometric grid up to ``1e12``.  Raises
    :class:`WitnessNotFound` when the grid is exhausted.
    """
    if M_grid is None:
        M_grid = [10.0 ** (k / 2) for k in range(2, 25)]
    scanned = []
    for M in M_grid:
        ratio, ex2, err = no_contraction_ratio(model, a, M)
        scanned.append((M, ratio))
        if ratio > 1.0:
            bounds = {eps: _proof_bound(model, a, M, eps) for eps in eps_grid}
            return WitnessResult(M, ratio, ex2, err, scanned, bounds)
    raise WitnessNotFound(
        f"witness not found at desk scale (M <= {M_grid[-1]:.3g}); best ratio "
        f"{max(r for _, r in scanned):.6f}: a may be too close to a* or M range insufficient")


# -- thresholds report --------------------------------------------------------

@dataclass
class ThresholdReport:
    a_star: float
    d_star: float
    d_dagger: float
    a_dagger: float
    mu_dagger: float
    certificates: dict = field(default_factory=dict)
    flagged: bool = False

    def rows(self):
        out = [("a_star", self.a_star), ("d_star", self.d_star),
               ("d_dagger", self.d_dagger), ("a_dagger", self.a_dagger),
               ("mu_dagger", self.mu_dagger)]
        out += [(f"certificate:{k}", v) for k, v in sorted(self.certificates.items())]
        return out


def thresholds(model, a=None):
    """Linear and tightness thresholds plus the certificates that apply to ``model``.

    ``d_star`` is evaluated at ``a`` (default ``a_star``).  Certificate
    margins are positive when the corresponding claim holds.
    """
    a_star = second_moment_threshold(model)
    a_eval = a_star if a is None else a
    tg = optimize_tightness_gain(model)
    certs = {"tightness_exceeds_second_moment": tg.a_dagger - a_star}
    if model.kind == "gaussian_mean_one":
        certs["gaussian_sgn_bound"] = certify_gaussian_sgn_bound(model.sigma).value
        certs["two_step_improvement_at_a_star"] = 1.0 - search_epsilon(model, a_star, "mean_one").factor
    if model.kind == "gaussian_mean_zero" or (not model.is_gaussian and abs(model.mean) < 1e-9):
        found = search_epsilon(model, 1.0, "zero_mean")
        certs["epsilon0_lemma"] = -signed_gap_expectation(model, found.eps0)
        certs["zero_mean_improvement_at_1"] = 1.0 - found.factor
    return ThresholdReport(a_star, optimal_gain(model, a_eval), tg.d_dagger, tg.a_dagger,
                           tg.mu, certs, tg.flagged)


# -- certificate suite --------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    name: str
    params: str
    value: float
    error: float
    passed: bool


def sgn_bound_grid(n=25, lo=0.05, hi=50.0):
    return np.geomspace(lo, hi, n)


def run_certificates(sigmas=None, fd_step=1e-4):
    """Evaluate every numerical claim the package certifies.

    Each entry is a :class:`Certificate`; ``passed`` is the claim's verdict at
    the quadrature error reported alongside.
    """
    out = []
    for s in (sgn_bound_grid() if sigmas is None else sigmas):
        q = certify_gaussian_sgn_bound(float(s))
        out.append(Certificate("gaussian_sgn_bound", f"sigma={s:.6g}", q.value, q.error,
                               q.value - q.error > 0 and q.error <= 1e-10))
    for s in (0.5, math.sqrt(2.0), 3.0):
        lhs, piece, rhs = gamma_bound_sides(s)
        out.append(Certificate("gamma_bound", f"s={s:.6g}", piece - rhs, 0.0,
                               piece > rhs and lhs >= piece))
    z0 = NoiseModel.gaussian_mean_zero(1.0)
    fd = (signed_gap_expectation(z0, fd_step) - signed_gap_expectation(z0, -fd_step)) / (2 * fd_step)
    out.append(Certificate("epsilon0_derivative", f"h={fd_step:g}", fd, abs(fd + 1.0),
                           abs(fd + 1.0) <= 1e-4))
    g1 = NoiseModel.gaussian_mean_one(1.0)
    a_head = math.sqrt(2.0) + 1.6e-3
    found = search_epsilon(g1, a_head, "mean_one")
    out.append(Certificate("two_step_headline", f"a={a_head:.7f},eps={found.eps:.6g}",
                           found.factor, 0.0, found.factor <= 1.0))
    zm = search_epsilon(z0, 1.0 + 1e-3, "zero_mean")
    out.append(Certificate("zero_mean_improvement", f"a=1.001,eps0={zm.eps0:.6g},eps={zm.eps:.6g}",
                           zm.factor, 0.0, zm.factor < 1.0))
    tg = optimize_tightness_gain(g1)
    out.append(Certificate("tightness_exceeds_second_moment", "sigma=1",
                           tg.a_dagger - math.sqrt(2.0), 0.0, tg.a_dagger > math.sqrt(2.0)))
    return out
