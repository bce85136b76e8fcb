"""Scalar dynamics ``X' = a X - U`` observed through ``Y = Z X``.

States are carried as :class:`SignedLogState` so that a trajectory can grow
or shrink by hundreds of orders of magnitude without overflow.  The scaled
system of the converse construction is the special case ``a = 1``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_BOUND = 1e280
_LOG_MAX = math.log(np.finfo(float).max)


class DivergenceError(OverflowError):
    pass


@dataclass(frozen=True)
class SignedLogState:
    """``sign * exp(log_mag)``; ``sign == 0`` encodes an exact zero."""

    sign: int
    log_mag: float
    # exact float value when the state came from (or fits in) a float
    value: float = field(default=math.nan, compare=False, repr=False)

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError("sign must be -1, 0 or 1")
        if self.sign == 0 and self.log_mag != -math.inf:
            object.__setattr__(self, "log_mag", -math.inf)

    @classmethod
    def from_real(cls, x):
        x = float(x)
        if x == 0.0:
            return cls(0, -math.inf)
        if not math.isfinite(x):
            raise ValueError("state must be finite")
        return cls(1 if x > 0 else -1, math.log(abs(x)), x)

    def to_real(self):
        if self.sign == 0:
            return 0.0
        if not math.isnan(self.value):
            return self.value
        if self.log_mag > _LOG_MAX:
            raise OverflowError("state magnitude exceeds the float range")
        return self.sign * math.exp(self.log_mag)

    @property
    def is_zero(self):
        return self.sign == 0

    def scale(self, factor):
        """Multiply by a real ``factor``."""
        if factor == 0 or self.sign == 0:
            return SignedLogState(0, -math.inf)
        s = self.sign if factor > 0 else -self.sign
        return SignedLogState(s, self.log_mag + math.log(abs(factor)))


@dataclass(frozen=True)
class Observation:
    y: float


def _affine(a, x, u):
    """``a*x - u`` for ``a > 0``, ``x`` in signed-log form, ``u`` a float."""
    if x.sign == 0:
        return SignedLogState.from_real(-u)
    log_ax = math.log(a) + x.log_mag
    if log_ax < _LOG_MAX - 1.0:
        ax = a * x.to_real()
        diff = ax - u
        if not math.isfinite(diff):
            raise DivergenceError("a*X - U overflowed; use a log-domain (homogeneous) controller path")
        return SignedLogState.from_real(diff)
    # a*X is beyond float range; u is finite so it is negligible or comparable only in log terms.
    if u == 0.0:
        return SignedLogState(x.sign, log_ax)
    log_u = math.log(abs(u))
    su = 1 if u > 0 else -1
    if log_u < log_ax - 40.0:
        return SignedLogState(x.sign, log_ax + math.log1p(-su * x.sign * math.exp(log_u - log_ax)))
    raise DivergenceError("a*X - U cannot be formed in floating point; use a log-domain controller path")


def step(a, x, z, u):
    """Advance ``X' = a X - u`` and observe ``Y = z X``.

    ``x`` may be a float or a :class:`SignedLogState`; the new state is
    returned in signed-log form together with the observation.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    if not math.isfinite(z):
        raise ValueError("z must be finite")
    if not isinstance(x, SignedLogState):
        x = SignedLogState.from_real(x)
    if x.sign == 0:
        y = 0.0
    elif x.log_mag < _LOG_MAX:
        y = z * x.to_real()
    else:
        y = math.copysign(math.inf, z * x.sign) if z != 0 else 0.0
    return _affine(a, x, float(u)), Observation(y)


def scaled_step(x, z, u):
    """One step of the scaled system ``X' = X - u``."""
    return step(1.0, x, z, u)


@dataclass
class Trajectory:
    """A single simulated path: ``n+1`` states, ``n`` observations/controls/noise draws."""

    states: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    seed: int = 0
    diverged: bool = False

    def __len__(self):
        return len(self.controls)

    def check(self):
        n = len(self.controls)
        if len(self.states) != n + 1 or len(self.observations) != n:
            raise AssertionError("inconsistent trajectory lengths")

    def to_csv(self, path, include_noise=False):
        """Write columns ``n, sign, log_mag, y, u`` (and ``z`` when asked).

        The ``z`` column is oracle-only: a controller never sees it.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["n", "sign", "log_mag", "y", "u"]
            if include_noise:
                header.append("z_oracle_only")
            w.writerow(header)
            for n, s in enumerate(self.states):
                row = [n, s.sign, repr(s.log_mag)]
                if n < len(self.controls):
                    row += [repr(self.observations[n].y), repr(self.controls[n])]
                    if include_noise:
                        row.append(repr(self.noise[n]))
                else:
                    row += ["", ""] + ([""] if include_noise else [])
                w.writerow(row)


def draw_initial_state(rng, x0="gaussian", size=None):
    """Initial state: ``"gaussian"`` draws N(0,1); a number gives a point mass."""
    if isinstance(x0, str):
        if x0 != "gaussian":
            raise ValueError(f"unknown initial state {x0!r}")
        return rng.standard_normal(size)
    if size is None:
        return float(x0)
    return np.full(size, float(x0))


def simulate(a, model, strategy, horizon, seed, x0="gaussian"):
    """Simulate one trajectory of ``S_a`` with the scalar step.

    ``strategy`` is a :class:`mulnoise.controllers.Strategy`; it is reset for a
    single trial and receives only ``(n, y_n)``.
    """
    rng = np.random.default_rng(seed)
    x = SignedLogState.from_real(draw_initial_state(rng, x0))
    strategy.reset(1)
    traj = Trajectory(states=[x], seed=seed)
    for n in range(horizon):
        z = float(model.sample(rng))
        if traj.diverged:
            traj.states.append(x)
            traj.observations.append(Observation(math.nan))
            traj.controls.append(math.nan)
            traj.noise.append(z)
            continue
        y = 0.0 if x.sign == 0 else z * x.to_real()
        u = float(strategy.control(n, np.array([y]))[0])
        x, _ = step(a, x, z, u)
        traj.observations.append(Observation(y))
        traj.controls.append(u)
        traj.noise.append(z)
        traj.states.append(x)
        if x.sign != 0 and x.log_mag > math.log(DIVERGENCE_BOUND):
            traj.diverged = True
    return traj
