import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mulnoise import noise
from mulnoise._validation import ConfigError
from mulnoise.noise import NoiseModel
from mulnoise.quadrature import integrate_split

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def test_sample_deterministic():
    m = NoiseModel.gaussian_mean_one(1.0)
    a = noise.sample(m, np.random.default_rng(42))
    b = noise.sample(m, np.random.default_rng(42))
    assert a == b


def test_sample_mean_zero():
    m = NoiseModel.gaussian_mean_zero(1.0)
    z = m.sample(np.random.default_rng(1), 10**6)
    assert abs(z.mean()) < 0.005


def test_sample_variance_half_sigma():
    m = NoiseModel.gaussian_mean_one(0.5)
    z = m.sample(np.random.default_rng(2), 10**6)
    assert abs(z.var() - 0.25) < 0.002


def test_phi_examples():
    m = NoiseModel.gaussian_mean_one(1.0)
    assert noise.phi(m, 1.0) == pytest.approx(LOG_SQRT_2PI, abs=1e-15)
    assert noise.phi_prime(m, 1.0) == 0.0
    assert noise.phi(m, 2.0) == pytest.approx(0.5 + LOG_SQRT_2PI, abs=1e-15)
    assert noise.phi_prime(m, 2.0) == 1.0
    q = NoiseModel.exp_poly([0.0, 0.0, 0.0, 0.0, 1.0])
    assert noise.phi_prime(q, 2.0) == pytest.approx(32.0)


def test_tail_bound_plugin():
    m = NoiseModel.gaussian_mean_one(1.0)
    assert noise.phi_tail_bound(m, 0.0) == pytest.approx(4.0)
    assert noise.phi_tail_bound(m, 2.0) == pytest.approx(4 * math.exp(-1))


def test_tail_bound_needs_delta():
    q = NoiseModel.exp_poly([0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        noise.phi_tail_bound(q, 1.0)


@pytest.mark.parametrize("t", [1.0, 2.0, 4.0, 8.0])
def test_tail_bound_empirical(t):
    m = NoiseModel.gaussian_mean_one(1.0)
    ph = m.phi(m.sample(np.random.default_rng(3), 10**6))
    freq = np.mean(ph >= t)
    se = math.sqrt(max(freq * (1 - freq), 1e-12) / 1e6)
    assert freq <= noise.phi_tail_bound(m, t) + 3 * se


@pytest.mark.parametrize("model", [
    NoiseModel.gaussian_mean_one(1.0),
    NoiseModel.gaussian_mean_zero(0.3),
    NoiseModel.exp_poly([0.0, 0.0, 0.0, 0.0, 1.0]),
    NoiseModel.exp_poly([0.0, 0.0, -4.0, 0.0, 1.0]),
])
def test_normalisation(model):
    lo, hi = model.window
    total = integrate_split(model.pdf, lo, hi, tol=1e-12, singularities=[model.mode]).value
    assert abs(total - 1.0) < 1e-9


@pytest.mark.parametrize("model", [NoiseModel.gaussian_mean_one(0.7),
                                   NoiseModel.exp_poly([0.5, 0.0, -1.0, 0.2, 1.0])])
def test_phi_matches_density(model):
    z = np.linspace(-3, 3, 1000)
    dens = model.density(z)
    assert np.max(np.abs(np.exp(-model.phi(z)) - dens) / dens) <= 1e-12


@pytest.mark.parametrize("model", [NoiseModel.gaussian_mean_one(0.7),
                                   NoiseModel.exp_poly([0.5, 0.0, -1.0, 0.2, 1.0])])
def test_phi_prime_finite_difference(model):
    h = 1e-6
    for z in np.linspace(-10, 10, 201):
        fd = (model.phi(z + h) - model.phi(z - h)) / (2 * h)
        assert abs(fd - model.phi_prime(z)) <= 1e-5 * max(1.0, abs(fd))


def test_exp_poly_moments_match_sampler():
    m = NoiseModel.exp_poly([0.0, 0.0, 0.0, 0.0, 1.0])
    z = m.sample(np.random.default_rng(4), 400_000)
    se = z.var() * math.sqrt(2 / z.size) * 3
    assert abs(z.var() - m.variance) < 4 * se
    assert m.variance == pytest.approx(0.337989, abs=1e-6)


def test_bimodal_sampler():
    m = NoiseModel.exp_poly([0.0, 0.0, -4.0, 0.0, 1.0])
    z = m.sample(np.random.default_rng(5), 400_000)
    assert abs(z.mean()) < 0.02
    assert abs(np.mean(z ** 2) - m.second_moment) < 0.02


def test_config_round_trip_and_rejects():
    m = NoiseModel.from_config({"kind": "gaussian_mean_one", "sigma": 1.0})
    assert NoiseModel.from_config(m.to_config()) == m
    with pytest.raises(ConfigError):
        NoiseModel.from_config({"kind": "gaussian_mean_one", "sigma": 1.0, "extra": 2})
    with pytest.raises(ConfigError):
        NoiseModel.from_config({"kind": "cauchy"})
    with pytest.raises(ValueError):
        NoiseModel.exp_poly([0.0, 1.0, 0.0, -1.0])  # odd degree


def test_growth_condition():
    m = NoiseModel.gaussian_mean_one(1.0)
    assert m.growth_condition_margin(2.0, 4.0) > 0
    assert m.growth_condition_margin(2.0, 2.0) < 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(-50.0, 50.0))
def test_gaussian_phi_formula(sigma, z):
    m = NoiseModel.gaussian_mean_one(sigma)
    expect = (z - 1) ** 2 / (2 * sigma ** 2) + math.log(sigma * math.sqrt(2 * math.pi))
    assert m.phi(z) == pytest.approx(expect, rel=1e-12, abs=1e-12)
    assert m.phi_prime(z) == pytest.approx((z - 1) / sigma ** 2, rel=1e-12, abs=1e-12)
