"""scikit-learn style wrappers.

Only the parts of the estimator protocol that make sense here are provided:
constructor parameters are plain attributes (so ``get_params``/``set_params``
and ``clone`` work), ``fit`` does the computation and learned quantities end
in an underscore.  There is no ``transform``/``predict`` surface except where
a mapping actually exists.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import analysis, converse
from .controllers import LinearMemoryless, ScaledStrategy, strategy_from_config
from .montecarlo import EnsembleConfig, run_ensemble
from .noise import NoiseModel
from .quadrature import scan_then_golden


def _model(kind, sigma, coeffs):
    if kind == "exp_poly":
        return NoiseModel.exp_poly(coeffs)
    return NoiseModel.from_config({"kind": kind, "sigma": sigma})


class StabilityEstimator(BaseEstimator):
    """Monte Carlo stability verdict for one growth factor ``a``.

    ``fit(a)`` runs the ensemble; ``predict(a_values)`` refits per value and
    returns the verdicts.
    """

    def __init__(self, kind="gaussian_mean_one", sigma=1.0, coeffs=None,
                 strategy=None, trials=10_000, horizon=200, seed=0, threads=None):
        self.kind = kind
        self.sigma = sigma
        self.coeffs = coeffs
        self.strategy = strategy
        self.trials = trials
        self.horizon = horizon
        self.seed = seed
        self.threads = threads

    def _config(self, a):
        strategy = self.strategy or {"kind": "linear_memoryless", "d": "optimal"}
        return EnsembleConfig(trials=self.trials, horizon=self.horizon, a=float(a),
                              model=_model(self.kind, self.sigma, self.coeffs),
                              strategy=strategy, base_seed=self.seed, threads=self.threads)

    def fit(self, a, y=None):
        a = float(np.asarray(a).reshape(-1)[0])
        self.report_ = run_ensemble(self._config(a))
        self.a_ = a
        self.verdict_ = self.report_.verdict
        self.second_moment_rate_ = self.report_.second_moment_rate
        self.log_growth_rate_ = self.report_.log_growth_rate
        return self

    def predict(self, a_values):
        a_values = check_array(np.asarray(a_values, dtype=float).reshape(-1, 1)).ravel()
        return np.array([run_ensemble(self._config(a)).verdict for a in a_values])


class TightnessGain(BaseEstimator):
    """Gain ``d`` minimising ``E log|1 - dZ|`` and the threshold ``exp(-min)``.

    Without data the expectation is taken by quadrature under the configured
    noise model.  ``fit(Z)`` with a sample of noise draws minimises the
    empirical mean instead.
    """

    def __init__(self, kind="gaussian_mean_one", sigma=1.0, coeffs=None, n_grid=256, tol=1e-6):
        self.kind = kind
        self.sigma = sigma
        self.coeffs = coeffs
        self.n_grid = n_grid
        self.tol = tol

    def fit(self, Z=None, y=None):
        if Z is None:
            model = _model(self.kind, self.sigma, self.coeffs)
            res = analysis.optimize_tightness_gain(model, self.n_grid, self.tol)
            self.d_dagger_, self.a_dagger_, self.flagged_ = res.d_dagger, res.a_dagger, res.flagged
            return self
        z = check_array(np.asarray(Z, dtype=float).reshape(-1, 1)).ravel()
        m2 = float(np.mean(z * z))

        def f(d):
            with np.errstate(divide="ignore"):
                return float(np.mean(np.log(np.abs(1.0 - d * z))))

        d_hi = 4.0 / math.sqrt(m2)
        res = scan_then_golden(f, d_hi / self.n_grid, d_hi, n_grid=self.n_grid, tol=self.tol)
        self.d_dagger_, self.a_dagger_, self.flagged_ = res.x, math.exp(-res.fun), res.flagged
        return self

    def score(self, Z, y=None):
        """Minus the empirical ``E log|1 - d Z|`` at the fitted gain (higher is better)."""
        check_is_fitted(self, "d_dagger_")
        z = check_array(np.asarray(Z, dtype=float).reshape(-1, 1)).ravel()
        with np.errstate(divide="ignore"):
            return -float(np.mean(np.log(np.abs(1.0 - self.d_dagger_ * z))))


class GenieEstimator(BaseEstimator):
    """Genie traces on the scaled system plus the lemma statistics."""

    def __init__(self, kind="gaussian_mean_one", sigma=1.0, coeffs=None, strategy=None, a=1.0,
                 trials=10_000, horizon=100, seed=0, c1=2.0, c2=4.0, c3=1.0, delta=1.0, T=None):
        self.kind = kind
        self.sigma = sigma
        self.coeffs = coeffs
        self.strategy = strategy
        self.a = a
        self.trials = trials
        self.horizon = horizon
        self.seed = seed
        self.c1 = c1
        self.c2 = c2
        self.c3 = c3
        self.delta = delta
        self.T = T

    def fit(self, X=None, y=None):
        model = _model(self.kind, self.sigma, self.coeffs)
        consts = converse.ConverseConstants(self.c1, self.c2, self.c3, self.delta, self.T)
        if self.strategy is None:
            strat = LinearMemoryless.optimal(self.a, model)
        else:
            strat = strategy_from_config(self.strategy, self.a, model)
        if self.a != 1.0:
            strat = ScaledStrategy(strat, self.a)
        self.ensemble_ = converse.run_genie_ensemble(model, strat, self.horizon, self.trials,
                                                     self.seed, consts)
        self.violations_ = self.ensemble_.violations()
        self.psilem_ = converse.psilem_check(self.ensemble_)
        self.kn_growth_ = converse.kn_growth(self.ensemble_)
        return self
