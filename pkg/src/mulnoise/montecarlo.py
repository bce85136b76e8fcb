"""Trial ensembles, second-moment estimation and stability verdicts.

Two estimators run side by side.  The plain ensemble simulates independent
trials in blocks; block ``b`` draws from ``SeedSequence([base_seed, b])`` so
the result does not depend on execution order or thread count.  It yields
``E log|X_n|``, tightness probabilities and a naive log-sum-exp second
moment.

The naive second moment is useless once ``X_n^2`` is log-normally heavy
tailed: the sample mean is dominated by trials that were never drawn.  The
verdict therefore uses a resampling (Feynman-Kac) estimator: particles are
kept in the ``X^2``-weighted law and ``log E X_{n+1}^2 - log E X_n^2`` is the
log of the mean potential ``X_{n+1}^2 / X_n^2``.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from ._validation import ConfigError, check_int, check_positive
from .controllers import Strategy, strategy_from_config
from .noise import NoiseModel
from .system import DIVERGENCE_BOUND, draw_initial_state

SCHEMA_VERSION = 1
LN2 = math.log(2.0)
DEFAULT_PROBES = (1e-2, 1.0, 1e2, 1e4)
_SMC_STREAM = 1 << 32
_BOOT_STREAM = 2 << 32


class BudgetError(ConfigError):
    pass


@dataclass
class EnsembleConfig:
    trials: int
    horizon: int
    a: float
    model: NoiseModel
    strategy: object
    base_seed: int = 0
    report_every: int = 1
    block_size: int = 8192
    probes: tuple = DEFAULT_PROBES
    x0: object = "gaussian"
    smc_particles: int = None
    smc_replicates: int = 8
    bootstrap: int = 1000
    budget: float = 2e9
    threads: int = None
    naive: bool = True

    def __post_init__(self):
        check_int(self.trials, "trials", 1)
        check_int(self.horizon, "horizon", 1)
        check_int(self.report_every, "report_every", 1)
        check_int(self.block_size, "block_size", 1)
        check_positive(self.a, "a")
        if self.smc_particles is None:
            self.smc_particles = self.trials
        check_int(self.smc_replicates, "smc_replicates", 2)
        if self.smc_particles < 2 * self.smc_replicates:
            raise ConfigError("smc_particles must be at least 2 per replicate")
        if sorted(self.probes) != list(self.probes):
            raise ConfigError("probes must be increasing")

    def build_strategy(self):
        if isinstance(self.strategy, Strategy):
            return self.strategy.clone()
        return strategy_from_config(self.strategy, self.a, self.model)

    def to_dict(self):
        strat = self.strategy.to_config() if isinstance(self.strategy, Strategy) else self.strategy
        return {"trials": self.trials, "horizon": self.horizon, "a": self.a,
                "model": self.model.to_config(), "strategy": strat,
                "base_seed": self.base_seed, "x0": self.x0,
                "smc_particles": self.smc_particles, "smc_replicates": self.smc_replicates,
                "probes": list(self.probes)}


# -- core kernel --------------------------------------------------------------

class _Scaled:
    """Per-trial ``X = x * 2**e`` with ``|x|`` in ``[0.5, 1)``.

    For homogeneous strategies the whole closed loop commutes with exact
    power-of-two scaling, so renormalising every step changes no bits.
    """

    def __init__(self, x, strategy):
        self.homogeneous = strategy.homogeneous
        self.strategy = strategy
        self.e = np.zeros(x.shape, dtype=np.int64)
        self.x = x
        self.frozen = np.zeros(x.shape, dtype=bool)
        self.normalise()

    def normalise(self):
        if not self.homogeneous:
            return
        m, k = np.frexp(self.x)
        self.x = m
        self.e += k
        self.strategy.rescale(np.ldexp(1.0, -k))

    def log_abs(self):
        with np.errstate(divide="ignore"):
            return np.log(np.abs(self.x)) + self.e * LN2

    def step(self, a, z, n):
        y = z * self.x
        u = np.asarray(self.strategy.control(n, y), dtype=float)
        new = a * self.x - u
        if self.homogeneous:
            self.x = new
            self.normalise()
        else:
            blow = ~np.isfinite(new) | (np.abs(new) > DIVERGENCE_BOUND)
            self.frozen |= blow
            self.x = np.where(self.frozen, self.x, new)


def _simulate_block(cfg, block, n):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, block]))
    strategy = cfg.build_strategy().reset(n)
    H = cfg.horizon
    x0 = np.asarray(draw_initial_state(rng, cfg.x0, n), dtype=float)
    st = _Scaled(x0, strategy)
    tail = np.arange(H // 2, H + 1)
    w = (tail - tail.mean()) / np.sum((tail - tail.mean()) ** 2)
    log_probes = np.log(np.asarray(cfg.probes))
    sum_log = np.empty(H + 1)
    finite = np.empty(H + 1, dtype=np.int64)
    lse2 = np.empty(H + 1)
    lse4 = np.empty(H + 1)
    tight = np.empty((len(cfg.probes), H + 1), dtype=np.int64)
    slope = np.zeros(n)
    for t in range(H + 1):
        if t > 0:
            st.step(cfg.a, cfg.model.sample(rng, n), t - 1)
        L = st.log_abs()
        ok = np.isfinite(L)
        finite[t] = ok.sum()
        sum_log[t] = L[ok].sum()
        lse2[t] = logsumexp(2.0 * L)
        lse4[t] = logsumexp(4.0 * L)
        tight[:, t] = (L[None, :] < log_probes[:, None]).sum(axis=1)
        if t >= H // 2:
            slope += w[t - H // 2] * np.where(ok, L, 0.0)
    return {"sum_log": sum_log, "finite": finite, "lse2": lse2, "lse4": lse4,
            "tight": tight, "slope": slope, "frozen": int(st.frozen.sum())}


def _blocks(trials, block_size):
    out = []
    start = 0
    b = 0
    while start < trials:
        n = min(block_size, trials - start)
        out.append((b, n))
        start += n
        b += 1
    return out


def _map_blocks(fn, items, threads):
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda it: fn(*it), items))


# -- resampling estimator -----------------------------------------------------

@dataclass
class SMCResult:
    log_m2: np.ndarray          # replicates x (horizon + 1)
    ess: np.ndarray             # min over replicates of the per-step ESS
    slope: float
    ci: tuple

    @property
    def mean_log_m2(self):
        return self.log_m2.mean(axis=0)


def _systematic(weights, rng):
    n = weights.size
    c = np.cumsum(weights)
    c /= c[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(c, u, side="right"), n - 1)


def _smc_replicate(cfg, r, n):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, _SMC_STREAM + r]))
    strategy = cfg.build_strategy().reset(n)
    if not strategy.homogeneous:
        raise ValueError("the resampling estimator needs a homogeneous strategy")
    H = cfg.horizon
    x = np.asarray(draw_initial_state(rng, cfg.x0, n), dtype=float)
    log_m2 = np.empty(H + 1)
    ess = np.empty(H + 1)
    g = x * x
    log_m2[0] = math.log(g.mean())
    ess[0] = g.sum() ** 2 / np.sum(g * g)
    idx = _systematic(g, rng)
    x = x[idx]
    strategy.take(idx)
    for t in range(H):
        m, k = np.frexp(x)
        strategy.rescale(np.ldexp(1.0, -k))
        x = m
        z = cfg.model.sample(rng, n)
        u = np.asarray(strategy.control(t, z * x), dtype=float)
        new = cfg.a * x - u
        g = (new / x) ** 2
        mean_g = g.mean()
        log_m2[t + 1] = log_m2[t] + math.log(mean_g)
        ess[t + 1] = g.sum() ** 2 / np.sum(g * g)
        idx = _systematic(g, rng)
        x = new[idx]
        strategy.take(idx)
    return log_m2, ess


def tail_slope(series, horizon):
    """OLS slope of ``series[n]`` on ``n`` over the last half of the horizon."""
    tail = np.arange(horizon // 2, horizon + 1)
    y = np.asarray(series)[..., tail]
    tc = tail - tail.mean()
    return (y * tc).sum(axis=-1) / np.sum(tc * tc)


def smc_second_moment(cfg):
    """``log E X_n^2`` by resampling, with a replicate-based CI on its tail slope."""
    R = cfg.smc_replicates
    per = cfg.smc_particles // R
    res = _map_blocks(lambda r: _smc_replicate(cfg, r, per), [(r,) for r in range(R)], cfg.threads)
    log_m2 = np.array([r[0] for r in res])
    ess = np.min(np.array([r[1] for r in res]), axis=0)
    slopes = tail_slope(log_m2, cfg.horizon)
    mean = float(np.mean(slopes))
    half = float(stats.t.ppf(0.975, R - 1) * np.std(slopes, ddof=1) / math.sqrt(R))
    return SMCResult(log_m2, ess, mean, (mean - half, mean + half))


# -- report -------------------------------------------------------------------

@dataclass
class StabilityReport:
    config: dict
    n: np.ndarray
    mean_log_abs: np.ndarray = None
    log_m2_naive: np.ndarray = None
    log_se_naive: np.ndarray = None
    ess_naive: np.ndarray = None
    tightness: dict = field(default_factory=dict)
    log_growth_rate: tuple = None       # (slope, lo, hi) of mean log|X_n|
    log_m2_smc: np.ndarray = None
    ess_smc: np.ndarray = None
    second_moment_rate: tuple = None    # (slope, lo, hi) of log E X_n^2
    diverged_fraction: float = 0.0
    verdict: str = "inconclusive"

    @property
    def second_moment(self):
        """``(mean X_n^2, standard error)`` pairs from the plain ensemble."""
        return list(zip(np.exp(self.log_m2_naive), np.exp(self.log_se_naive)))

    def summary(self):
        out = {"schema_version": SCHEMA_VERSION, "config": self.config, "verdict": self.verdict,
               "second_moment_rate": list(self.second_moment_rate),
               "diverged_fraction": self.diverged_fraction,
               "min_ess_smc": float(np.min(self.ess_smc))}
        if self.log_growth_rate is not None:
            out["log_growth_rate"] = list(self.log_growth_rate)
            out["final_tightness"] = {repr(M): float(p[-1]) for M, p in self.tightness.items()}
        return out

    def rows(self, every=1):
        keep = [i for i in range(len(self.n)) if i % every == 0 or i == len(self.n) - 1]
        header = ["n", "log_m2_smc", "ess_smc"]
        cols = [self.n, self.log_m2_smc, self.ess_smc]
        if self.mean_log_abs is not None:
            header += ["mean_log_abs", "log_m2_naive", "log_se_naive", "ess_naive"]
            cols += [self.mean_log_abs, self.log_m2_naive, self.log_se_naive, self.ess_naive]
            for M, p in self.tightness.items():
                header.append(f"p_below_{M:g}")
                cols.append(p)
        return header, [[c[i] for c in cols] for i in keep]

    def write(self, out_dir, every=1):
        os.makedirs(out_dir, exist_ok=True)
        header, rows = self.rows(every)
        with open(os.path.join(out_dir, "ensemble.csv"), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def decide(second_moment_rate, ess_smc, tightness, horizon):
    """Map the estimates to a verdict.

    ``second_moment_stable``: the CI for the tail slope of ``log E X_n^2``
    lies at or below 0.  ``tight_only``: the second moment grows but the
    largest probe keeps at least 0.9 of the mass at the horizon.
    ``unstable``: every probe probability falls over the tail half and the
    largest ends below 0.1.  Too few effective particles gives
    ``inconclusive``.
    """
    if np.min(ess_smc) < 100:
        return "inconclusive"
    _, lo, hi = second_moment_rate
    if hi <= 0:
        return "second_moment_stable"
    if lo <= 0 or not tightness:
        return "inconclusive"
    probs = [tightness[M] for M in sorted(tightness)]
    if probs[-1][-1] >= 0.9:
        return "tight_only"
    mid = horizon // 2
    if all(p[-1] <= p[mid] for p in probs) and probs[-1][-1] < 0.1:
        return "unstable"
    return "inconclusive"


def run_ensemble(cfg):
    """Simulate ``cfg`` and return a :class:`StabilityReport`."""
    work = cfg.horizon * (cfg.trials * cfg.naive + cfg.smc_particles)
    if work > cfg.budget:
        raise BudgetError(f"trials*horizon work {work:.3g} exceeds the budget {cfg.budget:.3g}")
    cfg.build_strategy()  # fail early on a bad spec
    report = StabilityReport(cfg.to_dict(), np.arange(cfg.horizon + 1))
    if cfg.naive:
        _fill_naive(report, cfg)
    smc = smc_second_moment(cfg)
    report.log_m2_smc = smc.mean_log_m2
    report.ess_smc = smc.ess
    report.second_moment_rate = (smc.slope, *smc.ci)
    report.verdict = decide(report.second_moment_rate, smc.ess, report.tightness, cfg.horizon)
    return report


def _fill_naive(report, cfg):
    blocks = _blocks(cfg.trials, cfg.block_size)
    parts = _map_blocks(lambda b, n: _simulate_block(cfg, b, n), blocks, cfg.threads)
    H = cfg.horizon
    finite = np.sum([p["finite"] for p in parts], axis=0)
    report.mean_log_abs = np.array([math.fsum(p["sum_log"][t] for p in parts) for t in range(H + 1)]) / finite
    lse2 = logsumexp(np.array([p["lse2"] for p in parts]), axis=0)
    lse4 = logsumexp(np.array([p["lse4"] for p in parts]), axis=0)
    N = cfg.trials
    report.log_m2_naive = lse2 - math.log(N)
    # var of the mean of w = X^2: (E w^2 - (E w)^2) / N
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.exp(lse4 - math.log(N) - 2 * report.log_m2_naive) - 1.0
        report.log_se_naive = report.log_m2_naive + 0.5 * np.log(np.maximum(rel, 0.0) / N)
    report.ess_naive = np.exp(2 * lse2 - lse4)
    tight = np.sum([p["tight"] for p in parts], axis=0) / N
    report.tightness = {M: tight[i] for i, M in enumerate(cfg.probes)}
    slopes = np.concatenate([p["slope"] for p in parts])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, _BOOT_STREAM]))
    point = math.fsum(slopes) / N
    boots = np.empty(cfg.bootstrap)
    for b in range(cfg.bootstrap):
        boots[b] = slopes[rng.integers(0, N, N)].mean()
    lo, hi = np.quantile(boots, [0.025, 0.975])
    report.log_growth_rate = (point, float(lo), float(hi))
    report.diverged_fraction = sum(p["frozen"] for p in parts) / N


# -- derived experiments ------------------------------------------------------

def bisect_transition(make_config, lo, hi, width=0.01, max_iter=40):
    """Bracket the ``a`` where the second-moment tail slope changes sign.

    ``make_config(a)`` returns an :class:`EnsembleConfig`; keep its seed fixed
    so every evaluation reuses the same random numbers.  Returns
    ``(lo, hi, history)`` with ``history`` a list of ``(a, slope)``.
    """
    history = []
    for _ in range(max_iter):
        if hi - lo <= width:
            break
        mid = 0.5 * (lo + hi)
        cfg = make_config(mid)
        cfg.naive = False
        slope = smc_second_moment(cfg).slope
        history.append((mid, slope))
        if slope > 0:
            hi = mid
        else:
            lo = mid
    return lo, hi, history


def simulate_coupled(a, model, strategies, horizon, trials, seed, x0="gaussian"):
    """Run several strategies on identical ``X_0`` and noise.

    Returns one ``trials x (horizon + 1)`` float array per strategy.  No
    rescaling is done, so keep horizons short.
    """
    rng = np.random.default_rng(seed)
    x_init = np.asarray(draw_initial_state(rng, x0, trials), dtype=float)
    zs = model.sample(rng, (horizon, trials))
    out = []
    for s in strategies:
        s = s.clone().reset(trials)
        xs = np.empty((trials, horizon + 1))
        xs[:, 0] = x_init
        x = x_init
        for n in range(horizon):
            u = np.asarray(s.control(n, zs[n] * x), dtype=float)
            x = a * x - u
            xs[:, n + 1] = x
        out.append(xs)
    return out


class MeanWithError(tuple):
    __slots__ = ()

    def __new__(cls, mean, se):
        return super().__new__(cls, (float(mean), float(se)))

    mean = property(lambda self: self[0])
    se = property(lambda self: self[1])


def _mean_se(v):
    return MeanWithError(np.mean(v), np.std(v, ddof=1) / math.sqrt(v.size))


def per_step_factor(a, model, strategy, trials, seed, n=0):
    """Ratio estimate of ``E X_{n+1}^2 / E X_n^2`` with a delta-method SE."""
    xs = simulate_coupled(a, model, [strategy], n + 1, trials, seed)[0]
    p, q = xs[:, n + 1] ** 2, xs[:, n] ** 2
    r = p.mean() / q.mean()
    resid = p - r * q
    se = np.std(resid, ddof=1) / math.sqrt(trials) / q.mean()
    return MeanWithError(r, se)


def orthogonality(a, model, schedule, steps, trials, seed):
    """``E[(X_n - Xt_n) Xt_n]`` where ``Xt`` is driven by the optimal linear gain.

    Returns ``{n: (mean, se)}`` for ``n`` in ``steps``.
    """
    from .controllers import LinearMemoryless
    x, xt = simulate_coupled(a, model, [schedule, LinearMemoryless.optimal(a, model)],
                             max(steps), trials, seed)
    return {n: _mean_se((x[:, n] - xt[:, n]) * xt[:, n]) for n in steps}


def zero_mean_gain(a, model, schedule, steps, trials, seed):
    """``E W_n`` with ``X_n = W_n X_0`` for a linear schedule (``X_0 = 1``)."""
    w = simulate_coupled(a, model, [schedule], max(steps), trials, seed, x0=1.0)[0]
    return {n: _mean_se(w[:, n]) for n in steps}


@dataclass
class CLTResult:
    mu: float
    sigma: float
    mu_se: float
    horizons: tuple
    pvalues: dict
    exceed_quarter: dict     # n -> empirical P(log|X_n| > n^(1/4))


def clt_statistics(a, model, d, horizons=(100, 1000, 10000), trials=2000, seed=0,
                   calibration=1_000_000):
    """Normality of ``n^-1/2 (S_n - n mu)`` under tightness control ``u = a d y``.

    ``mu`` and ``sigma`` are estimated from ``calibration`` independent draws of
    ``W = log|1 - d Z|``.  The normalised sums are read off a simulated
    ensemble as ``log|X_n| - log|X_0| - n log a`` and compared with
    ``N(0, sigma^2)`` by a Kolmogorov-Smirnov test.
    """
    from .controllers import TightnessLinear
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    if d == 0:
        mu, sd, mu_se = 0.0, 0.0, 0.0
    else:
        with np.errstate(divide="ignore"):
            wcal = np.log(np.abs(1.0 - d * model.sample(rng, calibration)))
        mu, sd = float(wcal.mean()), float(wcal.std(ddof=1))
        mu_se = sd / math.sqrt(calibration)
    sim_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    strategy = TightnessLinear(d, a).reset(trials)
    st = _Scaled(np.asarray(draw_initial_state(sim_rng, "gaussian", trials), dtype=float), strategy)
    L0 = st.log_abs()
    pvals = {}
    exceed = {}
    H = max(horizons)
    for t in range(1, H + 1):
        st.step(a, model.sample(sim_rng, trials), t - 1)
        if t in horizons:
            L = st.log_abs()
            s = L - L0 - t * math.log(a)
            exceed[t] = float(np.mean(L > t ** 0.25))
            if sd > 0:
                pvals[t] = float(stats.kstest((s - t * mu) / math.sqrt(t), "norm", args=(0.0, sd)).pvalue)
            else:
                pvals[t] = math.nan
    return CLTResult(mu, sd, mu_se, tuple(horizons), pvals, exceed)
