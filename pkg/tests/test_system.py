import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mulnoise.controllers import LinearMemoryless, Null, TwoStepMeanOne
from mulnoise.noise import NoiseModel
from mulnoise.system import SignedLogState, scaled_step, simulate, step


def test_noise_free_identity():
    x, y = step(2.0, 1.0, 1.0, 0.0)
    assert x.to_real() == 2.0 and y.y == 1.0


def test_linear_plugin():
    a = math.sqrt(2)
    d = a / 2
    x, y = step(a, 3.0, 0.5, d * 1.5)
    assert y.y == 1.5
    assert x.to_real() == pytest.approx(3.1820, abs=1e-4)


def test_exact_cancellation():
    x, y = step(1.0, 5.0, 1.0, 5.0)
    assert x.sign == 0 and x.is_zero and y.y == 5.0


def test_scaled_step_examples():
    x, y = scaled_step(1.0, 2.0, 0.5)
    assert x.to_real() == 0.5 and y.y == 2.0
    x, y = scaled_step(0.0, 3.7, 0.0)
    assert x.is_zero and y.y == 0.0


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        step(0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        step(1.0, 1.0, math.inf, 0.0)


@pytest.mark.parametrize("v", [1e-300, -3.5, 7.0, 1e300, -2.0 ** -1000])
def test_round_trip(v):
    s = SignedLogState.from_real(v)
    assert s.to_real() == v
    again = SignedLogState(s.sign, s.log_mag)
    assert again.to_real() == pytest.approx(v, rel=1e-13)


def test_log_domain_growth():
    x = SignedLogState(1, 800.0)
    x2, y = step(2.0, x, 1.0, 1.0)
    assert x2.log_mag == pytest.approx(800.0 + math.log(2.0))
    assert math.isinf(y.y)


@settings(max_examples=1000, deadline=None)
@given(st.floats(1.01, 3.0), st.floats(-10, 10),
       st.lists(st.tuples(st.floats(-3, 3), st.floats(-5, 5)), min_size=50, max_size=50))
def test_scaling_identity(a, x0, zu):
    xa = SignedLogState.from_real(x0)
    xs = SignedLogState.from_real(x0)
    for n, (z, u) in enumerate(zu):
        xa, _ = step(a, xa, z, u * a ** (n + 1))
        xs, _ = scaled_step(xs, z, u)
    n = len(zu)
    lhs = xs.to_real()
    rhs = xa.to_real() * a ** -n
    scale = max(abs(x0), 1.0) + sum(abs(u) for _, u in zu)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(rhs), 1e-300) + 1e-12 * scale


def test_determinism():
    m = NoiseModel.gaussian_mean_one(1.0)
    t1 = simulate(1.5, m, TwoStepMeanOne(0.05, 1.5, 1.0), 60, seed=9)
    t2 = simulate(1.5, m, TwoStepMeanOne(0.05, 1.5, 1.0), 60, seed=9)
    assert t1.states == t2.states and t1.controls == t2.controls
    t1.check()
    assert len(t1) == 60


def test_divergence_freeze(tmp_path):
    m = NoiseModel.gaussian_mean_one(1.0)
    tr = simulate(1e10, m, Null(), 40, seed=1)
    assert tr.diverged
    assert len(tr.states) == 41
    path = tmp_path / "t.csv"
    tr.to_csv(path, include_noise=True)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["n", "sign", "log_mag", "y", "u", "z_oracle_only"]
    assert len(rows) == 42


def test_csv_without_noise(tmp_path):
    m = NoiseModel.gaussian_mean_one(1.0)
    tr = simulate(1.2, m, LinearMemoryless(0.6), 5, seed=1, x0=2.0)
    assert tr.states[0].to_real() == 2.0
    tr.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["n", "sign", "log_mag", "y", "u"]
    assert float(rows[1][4]) == pytest.approx(0.6 * float(rows[1][3]))
