"""Genie-interval bookkeeping for the scaled system ``X_{n+1} = X_n - U_n``.

The genie reveals a dyadic interval ``I_n = [H/2^K, (H+1)/2^K)`` containing
``X_0`` whose distance from ``S_n = U_0 + ... + U_{n-1}`` is at least its
own width.  All comparisons are done exactly: ``X_0`` and ``S_n`` are kept
as integers scaled by ``2**SCALE_BITS``.  Every finite double is an integer
multiple of ``2**-1074``, so sums of doubles stay exact at that scale and no
level ``K`` is ever out of reach.
"""

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._validation import check_int, check_positive
from .controllers import ScaledStrategy
from .montecarlo import _Scaled, tail_slope
from .system import draw_initial_state

SCALE_BITS = 1100


def _scaled(v, bits=SCALE_BITS):
    """Exact ``v * 2**bits`` as an int; ``v`` must be a dyadic rational."""
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        p, q = v.as_integer_ratio()
    else:
        f = Fraction(v)
        p, q = f.numerator, f.denominator
    shift = q.bit_length() - 1
    if q != 1 << shift or shift > bits:
        raise ValueError(f"{v!r} is not a dyadic rational representable at 2^-{bits}")
    return p << (bits - shift)


@dataclass(frozen=True)
class DyadicInterval:
    """``[h/2^k, (h+1)/2^k)``."""

    k: int
    h: int

    @classmethod
    def containing(cls, x, k):
        f = Fraction(x)
        return cls(k, math.floor(f * Fraction(2) ** k))

    @property
    def lo(self):
        return Fraction(self.h) / Fraction(2) ** self.k

    @property
    def hi(self):
        return Fraction(self.h + 1) / Fraction(2) ** self.k

    @property
    def width(self):
        return Fraction(1) / Fraction(2) ** self.k

    def contains(self, x):
        return self.lo <= Fraction(x) < self.hi

    def distance(self, s):
        s = Fraction(s)
        return max(Fraction(0), self.lo - s, s - self.hi)


def _level_test(x0n, sn, k, bits=SCALE_BITS):
    """``(h, ok)``: the index of the level-``k`` interval around ``X_0`` and
    whether its distance to ``S`` is at least ``2^-k``."""
    if k <= bits:
        sh = bits - k
        h = x0n >> sh
        return h, sn <= (h - 1) << sh or sn >= (h + 2) << sh
    sh = k - bits
    h = x0n << sh
    s_k = sn << sh
    return h, s_k <= h - 1 or s_k >= h + 2


def genie_level(x0n, sn, k_min=None, bits=SCALE_BITS):
    """Minimal admissible level ``K >= k_min`` and its index; ``None`` if ``S == X_0``.

    Levels below ``bits - bitlen(|X_0 - S|) + 1`` cannot satisfy the
    distance test, so the scan starts there.
    """
    gap = abs(x0n - sn)
    if gap == 0:
        return None
    k = bits - gap.bit_length() + 1
    if k_min is not None:
        k = max(k, k_min)
    while True:
        h, ok = _level_test(x0n, sn, k, bits)
        if ok:
            return k, h
        k += 1


@dataclass(frozen=True)
class ConverseConstants:
    c1: float = 2.0
    c2: float = 4.0
    c3: float = 1.0
    delta: float = 1.0
    T: int = None

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "delta"):
            check_positive(getattr(self, name), name)
        if self.T is None:
            object.__setattr__(self, "T", self.minimal_T())
        check_int(self.T, "T")
        self.check_T()

    @property
    def delta_prime(self):
        return self.delta / (1.0 + self.delta)

    def minimal_T(self):
        """Smallest ``T`` with ``2^(1-T) C2 C3 < delta'/2``."""
        T = 0
        while 2.0 ** (1 - T) * self.c2 * self.c3 >= self.delta_prime / 2:
            T += 1
        return T

    def check_T(self, T=None):
        T = self.T if T is None else T
        if not 2.0 ** (1 - T) * self.c2 * self.c3 < self.delta_prime / 2:
            raise ValueError(f"T={T} violates 2^(1-T) C2 C3 < delta'/2; minimal admissible T is {self.minimal_T()}")
        return T

    def psi_cap(self, T=None, terms=200):
        """``e^(4 C3 C1) prod_i (1 + C 2^-i)`` with ``C = 8 2^-T C2 C3 / delta'^2``."""
        T = self.check_T(T)
        C = 8.0 * 2.0 ** -T * self.c2 * self.c3 / self.delta_prime ** 2
        return math.exp(4 * self.c3 * self.c1) * math.prod(1.0 + C * 2.0 ** -i for i in range(terms))

    def to_config(self):
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3, "delta": self.delta, "T": self.T}


@dataclass
class GenieTrace:
    """Per-trajectory record of the genie construction.

    ``s`` holds ``S_n`` rounded to float; the exact values live in the
    scaled-integer fields.
    """

    x0: float
    constants: ConverseConstants = field(default_factory=ConverseConstants)
    s: list = field(default_factory=list)
    k: list = field(default_factory=list)
    h: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    zphi: list = field(default_factory=list)
    captured: bool = False
    violations: dict = field(default_factory=lambda: {
        "contains_x0": 0, "k_increasing": 0, "distance": 0, "inbound_lower": 0,
        "inbound_upper": 0, "ratiot": 0})

    def __post_init__(self):
        self._x0n = _scaled(float(self.x0))
        self._sn = 0

    def __len__(self):
        return len(self.k)

    @property
    def x_num(self):
        """``X_n * 2**SCALE_BITS`` for the latest step."""
        return self._x0n - self._sn

    def x_float(self):
        return self.x_num / (1 << SCALE_BITS)

    def interval(self, n=-1):
        return DyadicInterval(self.k[n], self.h[n])

    def add_control(self, u):
        self._sn += _scaled(float(u))

    def advance(self):
        """Append ``K_n, H_n`` for the current ``S_n`` and run the invariant checks."""
        prev = self.k[-1] if self.k else None
        found = genie_level(self._x0n, self._sn, None if prev is None else prev + 1)
        if found is None:
            self.captured = True
            return False
        K, H = found
        self.k.append(K)
        self.h.append(H)
        self.s.append(self._sn / (1 << SCALE_BITS))
        gap = abs(self._x0n - self._sn)
        self.gap.append(gap / (1 << SCALE_BITS))
        # oscillation of x^2/2 over the interval: |2H+1| / 2^(2K+1)
        num = abs(2 * H + 1)
        e = 2 * K + 1
        self.eta.append(num / (1 << e) if e >= 0 else float(num << -e))
        self._check(K, H, prev, gap)
        return True

    def _check(self, K, H, prev, gap):
        v = self.violations
        x0n, sn, B = self._x0n, self._sn, SCALE_BITS
        if K <= B:
            sh = B - K
            lo, hi, xs, ss, g = H << sh, (H + 1) << sh, x0n, sn, gap
        else:
            sh = K - B
            lo, hi, xs, ss, g = H, H + 1, x0n << sh, sn << sh, gap << sh
        unit = hi - lo  # 2^-K at the working scale
        if not lo <= xs < hi:
            v["contains_x0"] += 1
        if prev is not None and K < prev + 1:
            v["k_increasing"] += 1
        if not (ss <= lo - unit or ss >= hi + unit):
            v["distance"] += 1
        if not unit <= g:
            v["inbound_lower"] += 1
        if prev is not None and K > prev + 1 and not g <= 4 * unit:
            v["inbound_upper"] += 1
        if not _ratiot_scaled(lo - ss, hi - ss, xs - ss):
            v["ratiot"] += 1

    def psi_update(self, z, model):
        """``Psi_n = Psi_{n-1} 2^(K_{n-1} - K_n) + 2 C3 |z phi'(z)|``."""
        c = abs(z * float(model.phi_prime(z)))
        self.zphi.append(c)
        term = 2.0 * self.constants.c3 * c
        if len(self.psi) == 0:
            value = term
        else:
            value = math.ldexp(self.psi[-1], self.k[-2] - self.k[-1]) + term
        self.psi.append(value)
        return value

    def psi_direct(self, n=-1):
        """``sum_i 2^(K_i + 1 - K_n) C3 |Z_i phi'(Z_i)|`` summed directly."""
        n = len(self.psi) - 1 if n < 0 else n
        Kn = self.k[n]
        c3 = self.constants.c3
        return math.fsum(math.ldexp(c3 * self.zphi[i], self.k[i] + 1 - Kn) for i in range(n + 1))

    @property
    def ok(self):
        return not any(self.violations.values())

    def rows(self):
        for n in range(len(self.k)):
            yield [n, repr(self.s[n]), self.k[n], self.h[n],
                   repr(self.psi[n]) if n < len(self.psi) else "",
                   repr(self.eta[n]), repr(self.gap[n])]


TRACE_HEADER = ["n", "S_n", "K_n", "H_n", "Psi_n", "eta_n", "abs_x0_minus_s"]


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(trace.rows())


def advance_genie(trace, s_next):
    """Set ``S_n = s_next`` (exact dyadic) and append ``K_n, H_n``.

    Returns ``False`` and marks the trace captured when ``S_n == X_0``.
    """
    trace._sn = _scaled(s_next)
    return trace.advance()


def psi_update(trace, z, model):
    return trace.psi_update(z, model)


def _ratiot_scaled(t_lo, t_hi, x):
    for t in (t_lo, t_hi):
        if t == 0 or (t > 0) != (x > 0):
            return False
        if not (abs(t) <= 2 * abs(x) and abs(x) <= 2 * abs(t)):
            return False
    return True


def verify_ratiot(interval, s, x):
    """Check ``1/2 <= x/t <= 2`` at both endpoints ``t`` of ``interval - s``."""
    s, x = Fraction(s), Fraction(x)
    return _ratiot_scaled(interval.lo - s, interval.hi - s, x)


# -- ensembles ----------------------------------------------------------------

@dataclass
class GenieEnsemble:
    traces: list
    horizon: int
    constants: ConverseConstants

    def violations(self):
        total = {}
        for t in self.traces:
            for k, v in t.violations.items():
                total[k] = total.get(k, 0) + v
        return total

    def psi_matrix(self):
        """Traces x steps; captured traces are padded with NaN."""
        out = np.full((len(self.traces), self.horizon + 1), np.nan)
        for i, t in enumerate(self.traces):
            out[i, :len(t.psi)] = t.psi
        return out

    def k_matrix(self):
        out = np.full((len(self.traces), self.horizon + 1), np.nan)
        for i, t in enumerate(self.traces):
            out[i, :len(t.k)] = t.k
        return out


def run_genie_ensemble(model, strategy, horizon, trials, seed, constants=None, x0="gaussian"):
    """Simulate the scaled system under ``strategy`` with a genie trace per trial.

    ``strategy`` acts on the scaled system as given; wrap an ``S_a`` strategy
    in :class:`ScaledStrategy` first.  States are exact: ``X_n`` handed to the
    loop is the correctly rounded value of ``X_0 - S_n``.
    """
    constants = constants or ConverseConstants()
    rng = np.random.default_rng(seed)
    x0s = np.asarray(draw_initial_state(rng, x0, trials), dtype=float)
    traces = [GenieTrace(float(v), constants) for v in x0s]
    live = [t.advance() for t in traces]
    strategy = strategy.clone().reset(trials)
    x = np.array([t.x_float() for t in traces])
    for n in range(horizon + 1):
        z = model.sample(rng, trials)
        for i, t in enumerate(traces):
            if live[i]:
                t.psi_update(float(z[i]), model)
        if n == horizon:
            break
        u = np.asarray(strategy.control(n, z * x), dtype=float)
        for i, t in enumerate(traces):
            if live[i]:
                t.add_control(u[i])
                live[i] = t.advance()
                x[i] = t.x_float() if live[i] else 0.0
    return GenieEnsemble(traces, horizon, constants)


@dataclass
class PsilemResult:
    means: np.ndarray
    running_max: float
    slope: float
    ci: tuple
    cap: float
    tail_rise: float
    tail_se: float
    passed: bool


def psilem_check(ensemble, T=None):
    """Empirical ``E exp(Psi_n 2^-T)`` per ``n`` and the trend of its running max.

    Passes when the running max over ``n`` stays below the cap and rises by
    no more than two standard errors over the tail half of the horizon.  The
    OLS slope of the per-``n`` means over the tail and its CI are reported as
    a finer diagnostic.  ``T`` must satisfy the lemma's precondition.
    """
    T = ensemble.constants.check_T(T)
    psi = ensemble.psi_matrix()
    with np.errstate(over="ignore"):
        e = np.exp(np.ldexp(psi, -T))
    means = np.nanmean(e, axis=0)
    H = ensemble.horizon
    per = tail_slope(np.nan_to_num(e, nan=0.0), H)
    slope = float(tail_slope(means, H))
    se = float(np.std(per, ddof=1) / math.sqrt(per.size))
    ci = (slope - 1.96 * se, slope + 1.96 * se)
    run = np.maximum.accumulate(means)
    tail = slice(H // 2, H + 1)
    rise = float(run[H] - run[H // 2])
    counts = np.sum(~np.isnan(e[:, tail]), axis=0)
    tail_se = float(np.max(np.nanstd(e[:, tail], axis=0, ddof=1) / np.sqrt(counts)))
    cap = ensemble.constants.psi_cap(T)
    passed = bool(run[H] <= cap and rise <= 2.0 * tail_se)
    return PsilemResult(means, float(run[H]), slope, ci, cap, rise, tail_se, passed)


@dataclass
class KnGrowth:
    slope: float
    exceedance: dict      # C -> P(K_n - K_0 > C n) at each n
    checkpoints: tuple
    c_vanishing: float


def kn_growth(ensemble, c_grid=None, checkpoints=None):
    """Slope of mean ``K_n - K_0`` and the table ``P(K_n - K_0 > C n)``.

    ``c_vanishing`` is the smallest ``C`` on the grid whose exceedance is
    non-increasing over the checkpoints and zero at the last one.
    """
    K = ensemble.k_matrix()
    H = ensemble.horizon
    inc = K - K[:, :1]
    mean = np.nanmean(inc, axis=0)
    n = np.arange(H + 1)
    slope = float(np.polyfit(n[1:], mean[1:], 1)[0])
    if c_grid is None:
        c_grid = [round(slope + j * 0.5, 6) for j in range(0, 9)]
    if checkpoints is None:
        checkpoints = tuple(sorted({max(1, H // 8), H // 4, H // 2, H}))
    table = {}
    c_van = math.nan
    for C in c_grid:
        probs = np.array([np.nanmean(inc[:, m] > C * m) for m in checkpoints])
        table[C] = probs
        if math.isnan(c_van) and probs[-1] == 0 and np.all(np.diff(probs) <= 0):
            c_van = C
    return KnGrowth(slope, table, tuple(checkpoints), c_van)


def instability_probe(a, M, strategy, model, horizon, trials, seed, x0="gaussian"):
    """``P(|X_n| < a^-n M)`` for the scaled system driven by an ``S_a`` strategy.

    By the scaling identity this equals ``P(|X_{a,n}| < M)``.  ``M`` may be a
    sequence; the result then has one row per ``M``.
    """
    if not a > 1:
        raise ValueError("instability_probe needs a > 1")
    Ms = np.atleast_1d(np.asarray(M, dtype=float))
    rng = np.random.default_rng(seed)
    scaled = ScaledStrategy(strategy.clone(), a).reset(trials)
    if not scaled.homogeneous:
        raise ValueError("instability_probe needs a homogeneous strategy")
    st = _Scaled(np.asarray(draw_initial_state(rng, x0, trials), dtype=float), scaled)
    out = np.empty((Ms.size, horizon + 1))
    la = math.log(a)
    for n in range(horizon + 1):
        if n > 0:
            st.step(1.0, model.sample(rng, trials), n - 1)
        L = st.log_abs()
        out[:, n] = (L[None, :] < (np.log(Ms)[:, None] - n * la)).mean(axis=1)
    return out if np.ndim(M) else out[0]


def moment_check(model, orders=(1, 2, 3, 4), samples=1_000_000, seed=0):
    """Sample moments of ``phi(Z)`` up to order 4 with standard errors."""
    rng = np.random.default_rng(seed)
    ph = model.phi(model.sample(rng, samples))
    return {k: (float(np.mean(ph ** k)), float(np.std(ph ** k, ddof=1) / math.sqrt(samples)))
            for k in orders}
