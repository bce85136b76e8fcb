"""Adapted control strategies.

A :class:`Strategy` is a small state machine that is handed ``(n, y_n)`` for a
batch of independent trials and returns the controls ``u_n``.  It never sees
the state, the noise draw or the growth factor except through constructor
parameters, so adaptedness holds by construction.

All strategies are vectorised over trials: ``y`` is a 1-D array with one
entry per trial.  Strategies that are positively homogeneous
(``u(c*y) = c*u(y)`` for ``c > 0``) advertise it through ``homogeneous``;
the ensemble runner then renormalises states by powers of two and calls
:meth:`Strategy.rescale` so that stored observations stay consistent.
"""

import copy

import numpy as np

from ._validation import ConfigError, check_finite, check_keys, check_positive


def sgn(x):
    """Sign with ``sgn(0) = +1``."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


# -- control laws -------------------------------------------------------------

def optimal_linear_gain(a, model):
    """Gain ``d`` minimising ``E(a - d Z)^2``: ``a E[Z] / E[Z^2]``.

    For ``Z ~ N(1, s^2)`` this is ``a / (1 + s^2)``.
    """
    return a * model.mean / model.second_moment


def linear_memoryless_control(d, a, y):
    return d * np.asarray(y, dtype=float)


def tightness_control(d, a, y):
    return a * d * np.asarray(y, dtype=float)


def two_step_mean_one_control(eps, a, sigma, y_prev, y_curr, parity):
    """Linear gain ``a/(1+s^2)`` on even steps; on odd steps add ``eps*sgn(y)*|y_prev|``."""
    d = a / (1.0 + sigma * sigma)
    y_curr = np.asarray(y_curr, dtype=float)
    if parity == "even":
        return d * y_curr
    if parity != "odd":
        raise ValueError("parity must be 'even' or 'odd'")
    return d * y_curr + eps * sgn(y_curr) * np.abs(y_prev)


def two_step_zero_mean_control(eps, eps0, a, y_prev, y_curr, parity):
    """Zero-mean scheme: ``(a/eps0) y`` on even steps, then
    ``-(a^2/eps0) y_prev - eps * y_prev * |y/y_prev|``.

    When ``y_prev == 0`` the odd-step control is 0.
    """
    y_curr = np.asarray(y_curr, dtype=float)
    if parity == "even":
        return a / eps0 * y_curr
    if parity != "odd":
        raise ValueError("parity must be 'even' or 'odd'")
    y_prev = np.asarray(y_prev, dtype=float)
    out = -(a * a / eps0) * y_prev - eps * sgn(y_prev) * np.abs(y_curr)
    return np.where(y_prev == 0.0, 0.0, out)


def memoryless_h_control(h, y):
    """Evaluate ``h`` given as a callable or as a ``(grid, values)`` table.

    Tables are linearly interpolated; outside the grid the boundary value is
    used.
    """
    if callable(h):
        return np.asarray(h(np.asarray(y, dtype=float)), dtype=float)
    grid, values = h
    return np.interp(y, grid, values)


# -- strategies ---------------------------------------------------------------

class Strategy:
    """Base class.  Subclasses implement :meth:`control` and, if they keep
    memory, :meth:`reset`, :meth:`take` and :meth:`rescale`."""

    kind = "abstract"
    homogeneous = True

    def reset(self, n_trials):
        self.n_trials = int(n_trials)
        return self

    def control(self, n, y):
        raise NotImplementedError

    def take(self, index):
        """Re-index per-trial memory after resampling."""
        return self

    def rescale(self, factor):
        """Multiply stored observations by per-trial positive ``factor``."""
        return self

    def clone(self):
        return copy.deepcopy(self)

    def to_config(self):
        return {"kind": self.kind}

    def __repr__(self):
        params = ", ".join(f"{k}={v!r}" for k, v in self.to_config().items() if k != "kind")
        return f"{type(self).__name__}({params})"


class Null(Strategy):
    kind = "null"

    def control(self, n, y):
        return np.zeros_like(np.asarray(y, dtype=float))


class LinearMemoryless(Strategy):
    """``u_n = d * y_n``."""

    kind = "linear_memoryless"

    def __init__(self, d):
        self.d = check_finite(d, "d")

    @classmethod
    def optimal(cls, a, model):
        return cls(optimal_linear_gain(a, model))

    def control(self, n, y):
        return linear_memoryless_control(self.d, None, y)

    def to_config(self):
        return {"kind": self.kind, "d": self.d}


class TightnessLinear(Strategy):
    """``u_n = a * d * y_n`` so that ``X_{n+1} = a (1 - d Z_n) X_n``."""

    kind = "tightness_linear"

    def __init__(self, d, a):
        self.d = check_finite(d, "d")
        self.a = check_positive(a, "a")

    def control(self, n, y):
        return tightness_control(self.d, self.a, y)

    def to_config(self):
        return {"kind": self.kind, "d": self.d}


class LinearWithMemory(Strategy):
    """``u_n = sum_{i<=n} alpha[n, i] * y_i`` for a lower-triangular schedule."""

    kind = "linear_with_memory"

    def __init__(self, alpha):
        alpha = np.array(alpha, dtype=float)
        if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
            raise ValueError("alpha must be a square matrix")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        self.alpha = np.tril(alpha)
        self.horizon = alpha.shape[0]

    @classmethod
    def random(cls, horizon, rng, scale=0.3, diagonal=None):
        """A random schedule; ``diagonal`` pins ``alpha[n, n]`` if given."""
        alpha = np.tril(scale * rng.standard_normal((horizon, horizon)))
        if diagonal is not None:
            np.fill_diagonal(alpha, diagonal)
        return cls(alpha)

    def reset(self, n_trials):
        super().reset(n_trials)
        self._ys = np.zeros((self.n_trials, self.horizon))
        return self

    def control(self, n, y):
        if n >= self.horizon:
            raise ValueError(f"schedule defined up to n={self.horizon - 1}, asked for n={n}")
        self._ys[:, n] = y
        return self._ys[:, :n + 1] @ self.alpha[n, :n + 1]

    def take(self, index):
        self._ys = self._ys[index]
        return self

    def rescale(self, factor):
        self._ys *= np.asarray(factor)[:, None]
        return self

    def to_config(self):
        return {"kind": self.kind, "alpha": self.alpha.tolist()}


class TwoStepMeanOne(Strategy):
    """Linear control with a one-step-memory perturbation on odd steps.

    Even ``n``: ``u = d y``.  Odd ``n``: ``u = d y + eps * sgn(y) * |y_prev|``,
    with ``d = a / (1 + sigma^2)``.  ``eps = 0`` is the optimal linear scheme.
    """

    kind = "two_step_mean_one"

    def __init__(self, eps, a, sigma):
        self.eps = check_positive(eps, "epsilon", allow_zero=True)
        self.a = check_positive(a, "a")
        self.sigma = check_positive(sigma, "sigma")

    def reset(self, n_trials):
        super().reset(n_trials)
        self._prev = np.zeros(self.n_trials)
        return self

    def control(self, n, y):
        y = np.asarray(y, dtype=float)
        if n % 2 == 0:
            self._prev = y.copy()
            return two_step_mean_one_control(self.eps, self.a, self.sigma, None, y, "even")
        return two_step_mean_one_control(self.eps, self.a, self.sigma, self._prev, y, "odd")

    def take(self, index):
        self._prev = self._prev[index]
        return self

    def rescale(self, factor):
        self._prev = self._prev * factor
        return self

    def to_config(self):
        return {"kind": self.kind, "epsilon": self.eps}


class TwoStepZeroMean(Strategy):
    """Two-step scheme for zero-mean noise.

    Even ``n``: ``u = (a/eps0) y``.  Odd ``n``:
    ``u = -(a^2/eps0) y_prev - eps * sgn(y_prev) * |y|``.
    """

    kind = "two_step_zero_mean"

    def __init__(self, eps, eps0, a):
        self.eps = check_positive(eps, "epsilon", allow_zero=True)
        self.eps0 = check_positive(eps0, "epsilon0")
        self.a = check_positive(a, "a")

    def reset(self, n_trials):
        super().reset(n_trials)
        self._prev = np.zeros(self.n_trials)
        return self

    def control(self, n, y):
        y = np.asarray(y, dtype=float)
        if n % 2 == 0:
            self._prev = y.copy()
            return two_step_zero_mean_control(self.eps, self.eps0, self.a, None, y, "even")
        return two_step_zero_mean_control(self.eps, self.eps0, self.a, self._prev, y, "odd")

    def take(self, index):
        self._prev = self._prev[index]
        return self

    def rescale(self, factor):
        self._prev = self._prev * factor
        return self

    def to_config(self):
        return {"kind": self.kind, "epsilon": self.eps, "epsilon0": self.eps0}


class MemorylessH(Strategy):
    """``u_n = h(y_n)`` for a tabulated or callable ``h`` (not homogeneous)."""

    kind = "memoryless_h"
    homogeneous = False

    def __init__(self, h=None, grid=None, values=None):
        if h is None:
            grid = np.asarray(grid, dtype=float)
            values = np.asarray(values, dtype=float)
            if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
                raise ValueError("grid and values must be 1-D arrays of equal length >= 2")
            if np.any(np.diff(grid) <= 0):
                raise ValueError("grid must be strictly increasing")
            self._h = (grid, values)
        else:
            self._h = h

    def control(self, n, y):
        return memoryless_h_control(self._h, y)

    def to_config(self):
        if callable(self._h):
            return {"kind": self.kind, "h": getattr(self._h, "__name__", "callable")}
        return {"kind": self.kind, "grid": self._h[0].tolist(), "values": self._h[1].tolist()}


# -- scaled-system adaptor ----------------------------------------------------

class ScaledStrategy(Strategy):
    """Run a strategy designed for ``S_a`` on the scaled system.

    The scaled observation ``Y_n`` is mapped to ``a^n Y_n`` before it is handed
    to ``inner``, and the returned control is multiplied by ``a^-(n+1)``.  With
    ``X_{a,n+1} = a X_{a,n} - U_{a,n}`` this is the factor that makes
    ``X_n = a^-n X_{a,n}`` hold exactly.
    """

    kind = "scaled"

    def __init__(self, inner, a):
        self.inner = inner
        self.a = check_positive(a, "a")
        self.homogeneous = inner.homogeneous

    def reset(self, n_trials):
        super().reset(n_trials)
        self.inner.reset(n_trials)
        return self

    def control(self, n, y):
        scale = self.a ** n
        return self.inner.control(n, np.asarray(y) * scale) / (scale * self.a)

    def take(self, index):
        self.inner.take(index)
        return self

    def rescale(self, factor):
        self.inner.rescale(factor)
        return self

    def to_config(self):
        return {"kind": self.kind, "inner": self.inner.to_config(), "a": self.a}


# -- config -------------------------------------------------------------------

STRATEGY_KEYS = {
    "null": set(),
    "linear_memoryless": {"d"},
    "tightness_linear": {"d"},
    "linear_with_memory": {"alpha", "scale", "seed", "horizon"},
    "two_step_mean_one": {"epsilon"},
    "two_step_zero_mean": {"epsilon", "epsilon0"},
    "memoryless_h": {"grid", "values"},
}


def strategy_from_config(block, a, model):
    """Instantiate a strategy from its config object.

    ``"optimal"`` gains and epsilons are resolved through
    :mod:`mulnoise.analysis`.
    """
    if not isinstance(block, dict) or "kind" not in block:
        raise ConfigError("strategy: expected an object with a 'kind' key")
    kind = block["kind"]
    if kind not in STRATEGY_KEYS:
        raise ConfigError(f"strategy: unknown kind {kind!r}; expected one of {sorted(STRATEGY_KEYS)}")
    check_keys(block, STRATEGY_KEYS[kind] | {"kind"}, f"strategy[{kind}]")
    from . import analysis

    try:
        if kind == "null":
            return Null()
        if kind == "linear_memoryless":
            d = block.get("d", "optimal")
            return LinearMemoryless.optimal(a, model) if d == "optimal" else LinearMemoryless(d)
        if kind == "tightness_linear":
            d = block.get("d", "optimal")
            if d == "optimal":
                d = analysis.optimize_tightness_gain(model).d_dagger
            return TightnessLinear(d, a)
        if kind == "linear_with_memory":
            alpha = block.get("alpha", "random")
            if alpha == "random":
                rng = np.random.default_rng(block.get("seed", 0))
                return LinearWithMemory.random(block.get("horizon", 64), rng, block.get("scale", 0.3))
            return LinearWithMemory(alpha)
        if kind == "two_step_mean_one":
            if model.kind != "gaussian_mean_one":
                raise ConfigError("strategy: two_step_mean_one needs a gaussian_mean_one model")
            eps = block.get("epsilon", "optimal")
            if eps == "optimal":
                eps = analysis.search_epsilon(model, a, "mean_one").eps
            return TwoStepMeanOne(eps, a, model.sigma)
        if kind == "two_step_zero_mean":
            eps = block.get("epsilon", "optimal")
            eps0 = block.get("epsilon0", "optimal")
            if eps == "optimal" or eps0 == "optimal":
                found = analysis.search_epsilon(model, a, "zero_mean")
                eps = found.eps if eps == "optimal" else eps
                eps0 = found.eps0 if eps0 == "optimal" else eps0
            return TwoStepZeroMean(eps, eps0, a)
        if kind == "memoryless_h":
            return MemorylessH(grid=block.get("grid"), values=block.get("values"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"strategy[{kind}]: {exc}") from exc
    raise AssertionError("unreachable")
