import math
from fractions import Fraction

import numpy as np
import pytest

from mulnoise import converse as cv
from mulnoise.controllers import LinearMemoryless, Null
from mulnoise.noise import NoiseModel

G1 = NoiseModel.gaussian_mean_one(1.0)
Z1 = NoiseModel.gaussian_mean_zero(1.0)


def _brute_level(x0, s, k_from=-12):
    x0, s = Fraction(x0), Fraction(s)
    k = k_from
    while True:
        w = Fraction(2) ** -k
        h = math.floor(x0 / w)
        lo, hi = h * w, (h + 1) * w
        if max(lo - s, s - hi, 0) >= w:
            return k, h
        k += 1


def test_first_level_example():
    t = cv.GenieTrace(0.3)
    assert t.advance()
    assert (t.k[0], t.h[0]) == (2, 1) == _brute_level(0.3, 0)
    assert t.ok


@pytest.mark.parametrize("x0, s", [(0.3, 0.0), (-1.7, 0.5), (3.0, 2.75), (0.1, 0.1 + 2 ** -40),
                                   (2.5, -0.125), (1e-3, 0.0)])
def test_level_matches_brute_force(x0, s):
    t = cv.GenieTrace(x0)
    cv.advance_genie(t, s)
    assert (t.k[0], t.h[0]) == _brute_level(x0, s)


def test_capture_when_s_hits_x0():
    t = cv.GenieTrace(0.375)
    assert not cv.advance_genie(t, 0.375)
    assert t.captured


def test_interval_contains_and_inbound():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x0 = float(rng.normal())
        s = float(rng.normal())
        t = cv.GenieTrace(x0)
        cv.advance_genie(t, s)
        iv = t.interval()
        assert iv.contains(x0)
        gap = abs(Fraction(x0) - Fraction(s))
        assert iv.width <= gap <= 4 * iv.width or t.k[0] == _brute_level(x0, s)[0]
        assert iv.distance(s) >= iv.width
        assert cv.verify_ratiot(iv, s, Fraction(x0) - Fraction(s))
        assert t.ok


def test_ratiot_negative_control():
    iv = cv.DyadicInterval(2, 1)  # [1/4, 1/2)
    assert cv.verify_ratiot(iv, 0, Fraction(3, 10))
    assert not cv.verify_ratiot(iv, Fraction(24, 100), Fraction(6, 100))
    assert not cv.verify_ratiot(iv, Fraction(1, 4), Fraction(1, 20))


def test_T_precondition():
    c = cv.ConverseConstants()
    assert c.T == 6 == c.minimal_T()
    with pytest.raises(ValueError, match="minimal admissible T is 6"):
        c.check_T(5)
    with pytest.raises(ValueError):
        cv.ConverseConstants(T=3)
    assert c.psi_cap() > math.exp(8)


def test_null_strategy_levels_step_by_one():
    ens = cv.run_genie_ensemble(G1, Null(), 40, 200, seed=0)
    K = ens.k_matrix()
    assert np.all(np.diff(K, axis=1) == 1)
    assert cv.kn_growth(ens).slope == pytest.approx(1.0, abs=1e-12)
    assert not any(ens.violations().values())


@pytest.fixture(scope="module")
def linear_ensemble():
    return cv.run_genie_ensemble(G1, LinearMemoryless.optimal(1.0, G1), 100, 2000, seed=1)


def test_linear_ensemble_invariants(linear_ensemble):
    assert not any(linear_ensemble.violations().values())
    assert not any(t.captured for t in linear_ensemble.traces)


def test_psi_incremental_equals_direct(linear_ensemble):
    for t in linear_ensemble.traces[:50]:
        for n in (0, 10, 50, len(t.psi) - 1):
            assert t.psi[n] == pytest.approx(t.psi_direct(n), rel=1e-12)


def test_psi_geometric_domination(linear_ensemble):
    c3 = linear_ensemble.constants.c3
    for t in linear_ensemble.traces[:50]:
        for n in (5, 40, 100):
            bound = math.fsum(2 * c3 * t.zphi[i] * 2.0 ** -(n - i) for i in range(n + 1))
            assert t.psi[n] <= bound * (1 + 1e-12)


def test_psi_initial_mean():
    # zero-mean unit Gaussian: E|Z phi'(Z)| = E Z^2 = 1
    ens = cv.run_genie_ensemble(Z1, Null(), 0, 20000, seed=2)
    psi0 = ens.psi_matrix()[:, 0]
    se = psi0.std(ddof=1) / math.sqrt(psi0.size)
    assert abs(psi0.mean() - 2.0) <= 4 * se


def test_psilem_and_kn(linear_ensemble):
    res = cv.psilem_check(linear_ensemble)
    assert res.passed
    assert res.running_max < res.cap
    kg = cv.kn_growth(linear_ensemble)
    assert 1.0 <= kg.slope < 2.0
    assert math.isfinite(kg.c_vanishing)


def test_psilem_rejects_bad_T(linear_ensemble):
    with pytest.raises(ValueError):
        cv.psilem_check(linear_ensemble, T=2)


def test_instability_probe():
    a = 1.1
    Ms = [1e-2, 1.0, 1e2]
    p = cv.instability_probe(a, Ms, LinearMemoryless.optimal(a, G1), G1, 100, 4000, seed=3)
    assert np.all(np.diff(p, axis=0) >= 0)
    assert p[-1, -1] > 0.99
    with pytest.raises(ValueError):
        cv.instability_probe(1.0, 1.0, Null(), G1, 5, 10, seed=0)


def test_instability_probe_null_decays():
    a = 2.0
    p = cv.instability_probe(a, 1e2, Null(), G1, 30, 2000, seed=4)
    assert p[0] == 1.0 or p[0] > 0.99
    assert p[-1] == 0.0


def test_moments():
    m = cv.moment_check(Z1, samples=400000)
    mean, se = m[1]
    assert abs(mean - (0.5 + 0.5 * math.log(2 * math.pi))) <= 4 * se


def test_trace_csv(tmp_path):
    t = cv.GenieTrace(0.3)
    cv.advance_genie(t, 0.0)
    t.psi_update(0.5, G1)
    cv.advance_genie(t, 0.125)
    p = tmp_path / "t.csv"
    cv.write_trace_csv(t, p)
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == cv.TRACE_HEADER
    assert len(lines) == 3
