import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mulnoise.estimators import GenieEstimator, StabilityEstimator, TightnessGain
from mulnoise.noise import NoiseModel


def test_params_round_trip():
    est = StabilityEstimator(sigma=0.5, trials=100)
    assert est.get_params()["sigma"] == 0.5
    c = clone(est.set_params(horizon=7))
    assert c.horizon == 7 and c.trials == 100


def test_tightness_quadrature():
    est = TightnessGain().fit()
    assert est.d_dagger_ == pytest.approx(0.5911717, abs=1e-6)
    assert est.a_dagger_ == pytest.approx(2.5589831, abs=1e-6)


def test_tightness_from_samples():
    z = NoiseModel.gaussian_mean_one(1.0).sample(np.random.default_rng(0), 400000)
    est = TightnessGain().fit(z)
    assert est.d_dagger_ == pytest.approx(0.5912, abs=0.02)
    assert est.a_dagger_ == pytest.approx(2.559, abs=0.02)
    assert est.score(z) == pytest.approx(np.log(est.a_dagger_), rel=1e-9)


def test_tightness_score_needs_fit():
    with pytest.raises(NotFittedError):
        TightnessGain().score(np.ones(3))


def test_stability_fit_predict():
    est = StabilityEstimator(trials=4000, horizon=100).fit(1.2)
    assert est.verdict_ == "second_moment_stable"
    assert est.second_moment_rate_[0] < 0
    assert list(est.predict([1.2, 6.0])) == ["second_moment_stable", "unstable"]


def test_genie_fit():
    est = GenieEstimator(trials=100, horizon=30).fit()
    assert not any(est.violations_.values())
    assert est.kn_growth_.slope >= 1.0
    est2 = GenieEstimator(trials=50, horizon=20, a=1.3).fit()
    assert not any(est2.violations_.values())
