"""Multiplicative noise laws ``Z`` with density ``exp(-phi(z))``.

Three families are supported:

* ``gaussian_mean_one``  -- ``Z ~ N(1, sigma^2)``
* ``gaussian_mean_zero`` -- ``Z ~ N(0, sigma^2)``
* ``exp_poly``           -- ``f(z) = exp(-P(z)) / norm`` for an even-degree
  polynomial ``P`` with positive leading coefficient

Gaussian draws come from ``numpy.random.Generator.standard_normal`` (the
ziggurat method) on a seeded PCG64 stream.  ``exp_poly`` draws use rejection
from a Gaussian envelope centred at the mode.
"""

import math
from functools import cached_property

import numpy as np
from numpy.polynomial import polynomial as P

from ._validation import ConfigError, check_keys, check_positive
from .quadrature import integrate_split

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

GAUSSIAN_MEAN_ONE = "gaussian_mean_one"
GAUSSIAN_MEAN_ZERO = "gaussian_mean_zero"
EXP_POLY = "exp_poly"
KINDS = (GAUSSIAN_MEAN_ONE, GAUSSIAN_MEAN_ZERO, EXP_POLY)

# exp(-72) is the density drop at 12 standard deviations of a Gaussian.
_WINDOW_DROP = 72.0


class NoiseModel:
    """Law of the multiplicative observation noise.

    Instances are immutable after construction and may be shared between
    concurrent trials; all randomness comes from the generator passed to
    :meth:`sample`.

    Parameters
    ----------
    kind : str
        One of ``KINDS``.
    sigma : float, optional
        Standard deviation for the Gaussian kinds.
    coeffs : sequence of float, optional
        Ascending coefficients ``c0, ..., c_{2m}`` of ``P`` for ``exp_poly``.
        The normalising constant is computed here, so ``c0`` is arbitrary.
    delta : float, optional
        Exponent of the tail condition ``exp(-phi(z)) <= |z|^(-1-delta)``.
        Gaussians default to 1; ``exp_poly`` has none unless given.
    """

    def __init__(self, kind, sigma=None, coeffs=None, delta=None):
        if kind not in KINDS:
            raise ValueError(f"unknown noise kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        if kind in (GAUSSIAN_MEAN_ONE, GAUSSIAN_MEAN_ZERO):
            if sigma is None:
                raise ValueError(f"{kind} needs sigma")
            self.sigma = check_positive(sigma, "sigma")
            self.coeffs = None
            self.delta = 1.0 if delta is None else check_positive(delta, "delta")
        else:
            if coeffs is None:
                raise ValueError("exp_poly needs coeffs")
            c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
            if c.size < 3:
                raise ValueError("exp_poly polynomial must have degree >= 2")
            degree = c.size - 1
            if degree % 2 or c[-1] <= 0:
                raise ValueError("exp_poly polynomial must have even degree and positive leading coefficient")
            if not np.all(np.isfinite(c)):
                raise ValueError("exp_poly coefficients must be finite")
            self.coeffs = c
            self.sigma = None
            self.delta = None if delta is None else check_positive(delta, "delta")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def gaussian_mean_one(cls, sigma, delta=None):
        return cls(GAUSSIAN_MEAN_ONE, sigma=sigma, delta=delta)

    @classmethod
    def gaussian_mean_zero(cls, sigma, delta=None):
        return cls(GAUSSIAN_MEAN_ZERO, sigma=sigma, delta=delta)

    @classmethod
    def exp_poly(cls, coeffs, delta=None):
        return cls(EXP_POLY, coeffs=coeffs, delta=delta)

    @classmethod
    def from_config(cls, block):
        """Build from a config object such as ``{"kind": "gaussian_mean_one", "sigma": 1.0}``."""
        check_keys(block, {"kind", "sigma", "coeffs", "delta"}, "model", required=("kind",))
        kind = block["kind"]
        try:
            if kind in (GAUSSIAN_MEAN_ONE, GAUSSIAN_MEAN_ZERO):
                if "coeffs" in block:
                    raise ConfigError(f"model: {kind} does not take coeffs")
                return cls(kind, sigma=block.get("sigma"), delta=block.get("delta"))
            if kind == EXP_POLY:
                if "sigma" in block:
                    raise ConfigError("model: exp_poly does not take sigma")
                return cls(kind, coeffs=block.get("coeffs"), delta=block.get("delta"))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"model: {exc}") from exc
        raise ConfigError(f"model: unknown kind {kind!r}; expected one of {KINDS}")

    def to_config(self):
        out = {"kind": self.kind}
        if self.sigma is not None:
            out["sigma"] = self.sigma
        if self.coeffs is not None:
            out["coeffs"] = [float(c) for c in self.coeffs]
        if self.delta is not None:
            out["delta"] = self.delta
        return out

    def __repr__(self):
        if self.coeffs is not None:
            return f"NoiseModel({self.kind!r}, coeffs={list(self.coeffs)})"
        return f"NoiseModel({self.kind!r}, sigma={self.sigma})"

    def __eq__(self, other):
        if not isinstance(other, NoiseModel):
            return NotImplemented
        return self.to_config() == other.to_config()

    def __hash__(self):
        return hash(repr(self))

    # -- density --------------------------------------------------------------

    @property
    def is_gaussian(self):
        return self.kind != EXP_POLY

    @property
    def center(self):
        if self.kind == GAUSSIAN_MEAN_ONE:
            return 1.0
        if self.kind == GAUSSIAN_MEAN_ZERO:
            return 0.0
        return self.mode

    @cached_property
    def _poly_min(self):
        crit = P.polyroots(P.polyder(self.coeffs))
        real = crit[np.abs(crit.imag) < 1e-9].real
        vals = P.polyval(real, self.coeffs)
        i = int(np.argmin(vals))
        return float(real[i]), float(vals[i])

    @property
    def mode(self):
        if self.is_gaussian:
            return self.center
        return self._poly_min[0]

    @cached_property
    def window(self):
        """Truncation window ``[lo, hi]`` outside which the density is < ~1e-31."""
        if self.is_gaussian:
            half = 12.0 * self.sigma
            return (self.center - half, self.center + half)
        shifted = self.coeffs.copy()
        shifted[0] -= self._poly_min[1] + _WINDOW_DROP
        roots = P.polyroots(shifted)
        real = roots[np.abs(roots.imag) < 1e-7 * (1 + np.abs(roots.real))].real
        return (float(real.min()), float(real.max()))

    @cached_property
    def log_norm(self):
        """``log`` of the normalising constant added to ``P`` in ``phi``."""
        if self.is_gaussian:
            return math.log(self.sigma) + LOG_SQRT_2PI
        pmin = self._poly_min[1]
        lo, hi = self.window
        z0 = integrate_split(lambda z: math.exp(-(P.polyval(z, self.coeffs) - pmin)),
                             lo, hi, tol=1e-14, singularities=[self.mode]).value
        return math.log(z0) - pmin

    def phi(self, z):
        """``-log f_Z(z)``; accepts scalars or arrays."""
        z = np.asarray(z, dtype=float)
        if self.is_gaussian:
            out = (z - self.center) ** 2 / (2.0 * self.sigma ** 2) + self.log_norm
        else:
            out = P.polyval(z, self.coeffs) + self.log_norm
        return out[()] if out.ndim == 0 else out

    def phi_prime(self, z):
        z = np.asarray(z, dtype=float)
        if self.is_gaussian:
            out = (z - self.center) / self.sigma ** 2
        else:
            out = P.polyval(z, P.polyder(self.coeffs))
        return out[()] if out.ndim == 0 else out

    def density(self, z):
        z = np.asarray(z, dtype=float)
        if self.is_gaussian:
            u = (z - self.center) / self.sigma
            out = np.exp(-0.5 * u * u) / (self.sigma * math.sqrt(2.0 * math.pi))
        else:
            out = np.exp(-self.phi(z))
        return out[()] if out.ndim == 0 else out

    def pdf(self, z):
        """Scalar density for quadrature integrands (no array overhead)."""
        if self.is_gaussian:
            u = (z - self.center) / self.sigma
            return math.exp(-0.5 * u * u - self.log_norm)
        return math.exp(-self.phi(z))

    # -- moments --------------------------------------------------------------

    def expect(self, func, tol=1e-12, singularities=()):
        """``E[func(Z)]`` by quadrature over the truncation window."""
        lo, hi = self.window
        pts = [self.mode, *singularities]
        return integrate_split(lambda z: func(z) * self.pdf(z), lo, hi, tol=tol,
                               singularities=pts).value

    @cached_property
    def mean(self):
        if self.is_gaussian:
            return self.center
        return self.expect(lambda z: z)

    @cached_property
    def variance(self):
        if self.is_gaussian:
            return self.sigma ** 2
        m = self.mean
        return self.expect(lambda z: (z - m) ** 2)

    @property
    def second_moment(self):
        return self.variance + self.mean ** 2

    def moment(self, k):
        """Raw moment ``E[Z^k]``."""
        if k == 0:
            return 1.0
        if k == 1:
            return self.mean
        if k == 2:
            return self.second_moment
        return self.expect(lambda z: z ** k)

    @property
    def max_density(self):
        return float(self.density(self.mode))

    # -- sampling -------------------------------------------------------------

    @cached_property
    def _envelope(self):
        std = math.sqrt(self.variance)
        scale = 1.25 * std
        center = self.mode
        lo, hi = self.window
        grid = np.linspace(lo, hi, 20001)
        log_g = -0.5 * ((grid - center) / scale) ** 2 - math.log(scale) - LOG_SQRT_2PI
        ratio = np.max(-self.phi(grid) - log_g)
        return center, scale, math.exp(ratio) * 1.001

    def sample(self, rng, size=None):
        """Draw i.i.d. copies of ``Z`` from a ``numpy.random.Generator``.

        Identical generator states give identical draws.
        """
        if self.is_gaussian:
            return self.center + self.sigma * rng.standard_normal(size)
        center, scale, bound = self._envelope
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        filled = 0
        while filled < n:
            batch = max(64, int(1.2 * bound * (n - filled)) + 16)
            cand = center + scale * rng.standard_normal(batch)
            u = rng.random(batch)
            log_g = -0.5 * ((cand - center) / scale) ** 2 - math.log(scale) - LOG_SQRT_2PI
            ok = cand[np.log(u) + math.log(bound) + log_g < -self.phi(cand)]
            take = min(ok.size, n - filled)
            out[filled:filled + take] = ok[:take]
            filled += take
        if size is None:
            return float(out[0])
        return out.reshape(size)

    # -- tail condition -------------------------------------------------------

    @property
    def delta_prime(self):
        if self.delta is None:
            raise ValueError("model has no stored delta for the tail condition")
        return self.delta / (1.0 + self.delta)

    def tail_condition_holds(self, grid=None):
        """Check ``exp(-phi(z)) <= |z|^(-1-delta)`` on a grid (default 2e4 points)."""
        if self.delta is None:
            raise ValueError("model has no stored delta for the tail condition")
        if grid is None:
            lo, hi = self.window
            grid = np.linspace(min(lo, -hi), max(hi, -lo), 20001)
        grid = np.asarray(grid, dtype=float)
        grid = grid[grid != 0]
        return bool(np.all(-self.phi(grid) <= -(1.0 + self.delta) * np.log(np.abs(grid)) + 1e-12))

    def growth_condition_margin(self, c1, c2, grid=None):
        """Minimum of ``C1 + C2*phi(z) - |z*phi'(z)|`` over a grid.

        Non-negative means the growth condition on ``phi`` holds there.
        """
        if grid is None:
            lo, hi = self.window
            grid = np.linspace(lo, hi, 20001)
        grid = np.asarray(grid, dtype=float)
        return float(np.min(c1 + c2 * self.phi(grid) - np.abs(grid * self.phi_prime(grid))))


def sample(model, rng, size=None):
    return model.sample(rng, size)


def phi(model, z):
    return model.phi(z)


def phi_prime(model, z):
    return model.phi_prime(z)


def phi_tail_bound(model, t):
    """Bound ``(2/d') exp(-d' t)`` on ``P(phi(Z) >= t)`` with ``d' = delta/(1+delta)``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    dp = model.delta_prime
    return 2.0 / dp * math.exp(-dp * t)
