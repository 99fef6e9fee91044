"""Maximization-Expectation inference for nonnegative linear-Gaussian IBP models."""

from .engine import ConvergenceConfig, InitConfig, ModelState, fit, init_state, sweep
from .model import BinaryFeatureMatrix, Dataset, GammaPriors, Hyperparams
from .rowopt import LsConfig, RowObjective, SolutionSet, build_row_objective, ls_maximize
from .variational import FactorPosterior, compute_elbo

__version__ = "0.1.0"
