import math

import numpy as np
import pytest

from mulnoise import controllers as C
from mulnoise._validation import ConfigError
from mulnoise.noise import NoiseModel
from mulnoise.system import simulate

G1 = NoiseModel.gaussian_mean_one(1.0)


def test_linear_plugin():
    d = C.optimal_linear_gain(math.sqrt(2), G1)
    assert d == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert C.linear_memoryless_control(d, math.sqrt(2), 2.0) == pytest.approx(1.41421, abs=1e-5)
    assert C.linear_memoryless_control(0.0, 1.3, 5.0) == 0.0


def test_linear_factor_at_threshold():
    a = math.sqrt(2)
    d = a / 2
    # E(a - dZ)^2 = a^2 - 2 a d + d^2 E Z^2
    assert a * a - 2 * a * d + d * d * 2 == pytest.approx(1.0, abs=1e-15)


def test_two_step_mean_one_laws():
    a = math.sqrt(2)
    assert C.two_step_mean_one_control(0.1, a, 1.0, None, 3.0, "even") == pytest.approx(2.1213, abs=1e-4)
    odd = C.two_step_mean_one_control(0.1, a, 1.0, -2.0, -3.0, "odd")
    assert odd == pytest.approx(a / 2 * -3.0 - 0.1 * 2.0)
    # sgn(0) = +1
    assert C.two_step_mean_one_control(0.1, a, 1.0, -2.0, 0.0, "odd") == pytest.approx(0.2)
    for parity in ("even", "odd"):
        assert C.two_step_mean_one_control(0.0, a, 1.0, 5.0, 3.0, parity) == \
            C.linear_memoryless_control(a / 2, a, 3.0)


def test_two_step_zero_mean_laws():
    assert C.two_step_zero_mean_control(0.0, 0.1, 1.01, None, 2.0, "even") == pytest.approx(20.2)
    u = C.two_step_zero_mean_control(0.3, 0.5, 1.1, 2.0, -1.0, "odd")
    assert u == pytest.approx(-1.1 ** 2 / 0.5 * 2.0 - 0.3 * 2.0 * 0.5)
    assert C.two_step_zero_mean_control(0.3, 0.5, 1.1, 0.0, 4.0, "odd") == 0.0


def test_rademacher_epsilon0():
    eps0 = 0.5
    val = 0.5 * (1 * abs(eps0 / 1 - 1)) + 0.5 * (-1 * abs(eps0 / -1 - 1))
    assert val == pytest.approx(-eps0)


def test_tightness_control():
    assert C.tightness_control(0.5, 2.0, 1.0) == 1.0
    assert C.tightness_control(0.0, 2.0, 3.0) == 0.0


def test_memoryless_h():
    a = math.sqrt(2)
    d = a / 2
    grid = np.linspace(-10, 10, 21)
    h = C.MemorylessH(grid=grid, values=d * grid).reset(3)
    y = np.array([-2.5, 0.3, 7.0])
    assert np.allclose(h.control(0, y), C.LinearMemoryless(d).reset(3).control(0, y))
    assert C.memoryless_h_control((grid, d * grid), 50.0) == pytest.approx(d * 10)  # boundary value
    zero = C.MemorylessH(grid=grid, values=np.zeros_like(grid)).reset(3)
    assert np.all(zero.control(0, y) == 0.0)
    assert C.memoryless_h_control(lambda v: 2 * v, 1.5) == 3.0


def test_epsilon_zero_bit_identical():
    a = 1.3
    t1 = simulate(a, G1, C.TwoStepMeanOne(0.0, a, 1.0), 80, seed=4)
    t2 = simulate(a, G1, C.LinearMemoryless.optimal(a, G1), 80, seed=4)
    assert [s.log_mag for s in t1.states] == [s.log_mag for s in t2.states]
    assert t1.controls == t2.controls


@pytest.mark.parametrize("strategy", [
    C.LinearMemoryless(0.4), C.TightnessLinear(0.6, 2.0),
    C.LinearWithMemory.random(12, np.random.default_rng(0)),
    C.TwoStepMeanOne(0.05, 1.5, 1.0), C.TwoStepZeroMean(0.2, 0.8, 1.05),
    C.ScaledStrategy(C.TwoStepMeanOne(0.05, 1.5, 1.0), 1.5),
])
def test_homogeneous_rescale_is_exact(strategy):
    rng = np.random.default_rng(1)
    ys = rng.standard_normal((12, 5))
    s1 = strategy.clone().reset(5)
    s2 = strategy.clone().reset(5)
    shift = np.array([3, -7, 0, 12, -1])
    for n in range(12):
        u1 = s1.control(n, ys[n])
        u2 = s2.control(n, np.ldexp(ys[n], shift))
        assert np.array_equal(np.ldexp(u1, shift), u2)


def test_take_reindexes_memory():
    s = C.TwoStepMeanOne(0.1, 1.4, 1.0).reset(3)
    s.control(0, np.array([1.0, 2.0, 3.0]))
    s.take(np.array([2, 2, 0]))
    u = s.control(1, np.array([1.0, 1.0, 1.0]))
    assert np.allclose(u - 0.7 * 1.0, 0.1 * np.array([3.0, 3.0, 1.0]))


def test_schedule_horizon_guard():
    s = C.LinearWithMemory(np.eye(3)).reset(1)
    for n in range(3):
        s.control(n, np.array([1.0]))
    with pytest.raises(ValueError):
        s.control(3, np.array([1.0]))


def test_config_resolution():
    s = C.strategy_from_config({"kind": "linear_memoryless", "d": "optimal"}, math.sqrt(2), G1)
    assert s.d == pytest.approx(math.sqrt(2) / 2)
    t = C.strategy_from_config({"kind": "two_step_mean_one"}, math.sqrt(2), G1)
    assert 0 < t.eps <= 0.5
    z = C.strategy_from_config({"kind": "two_step_zero_mean"}, 1.001, NoiseModel.gaussian_mean_zero(1.0))
    assert z.eps > 0 and z.eps0 > 0
    with pytest.raises(ConfigError):
        C.strategy_from_config({"kind": "linear_memoryless", "gain": 1}, 1.0, G1)
    with pytest.raises(ConfigError):
        C.strategy_from_config({"kind": "pid"}, 1.0, G1)
    with pytest.raises(ConfigError):
        C.strategy_from_config({"kind": "linear_memoryless", "d": "fast"}, 1.0, G1)


def test_scaled_strategy_matches_unscaled_system():
    a = 1.7
    inner = C.TwoStepMeanOne(0.05, a, 1.0)
    ta = simulate(a, G1, inner, 40, seed=3)
    ts = simulate(1.0, G1, C.ScaledStrategy(inner, a), 40, seed=3)
    for n, (xa, xs) in enumerate(zip(ta.states, ts.states)):
        assert xs.to_real() == pytest.approx(xa.to_real() * a ** -n, rel=1e-10, abs=1e-300)
