"""Scalar control under multiplicative observation noise: simulation,
quadrature certificates and genie-interval diagnostics."""

from .noise import NoiseModel
from .system import SignedLogState, Observation, Trajectory, step, scaled_step, simulate
from .controllers import (Strategy, Null, LinearMemoryless, LinearWithMemory, TightnessLinear,
                          TwoStepMeanOne, TwoStepZeroMean, MemorylessH, ScaledStrategy,
                          strategy_from_config)
from .analysis import (thresholds, expected_log_gap, optimize_tightness_gain,
                       certify_gaussian_sgn_bound, two_step_contraction, search_epsilon,
                       alpha_k, no_contraction_witness)
from .montecarlo import EnsembleConfig, StabilityReport, run_ensemble
from .converse import GenieTrace, DyadicInterval, ConverseConstants

__version__ = "0.1.0"
