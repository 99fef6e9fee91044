"""Alternating inference: q(A) sweep, per-row Z maximization, hyperparameter
updates, compaction, and convergence tracking."""

from dataclasses import dataclass, field
import logging
import math
import time
import zlib

import numpy as np

from .model import BinaryFeatureMatrix, Dataset, InconsistentMatrixError
from .numerics import ensure_log_factorial_table
from .rowopt import FeatureCache, LsConfig, build_row_objective, eval_full, maximize
from .variational import (
    FactorPosterior,
    NumericalError,
    compute_elbo,
    effective_params,
    initial_gamma_posteriors,
    update_factor_row,
    update_gammas,
)

log = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
PRED_TOLERANCE = 1e-8


def substream(seed, name):
    """Independent generator for the named component of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class ModelState:
    """Dataset, Z, q(A), hyperparameters and the Z E[A] prediction cache."""

    def __init__(self, dataset, z, q, hyper, gamma=None, rng=None, seed=0, iteration=0):
        if not isinstance(z, BinaryFeatureMatrix):
            z = BinaryFeatureMatrix(z)
        if z.n_rows != dataset.n_rows or q.shape != (z.k_max, dataset.n_cols):
            raise ValueError("Z / q(A) shapes do not match the dataset")
        self.dataset = dataset
        self.z = z
        self.q = q
        self.hyper = hyper
        self.gamma = gamma
        self.rng = rng if rng is not None else substream(seed, "double-greedy")
        self.seed = seed
        self.iteration = iteration
        self.train_ll_history = []
        self.started = time.monotonic()
        self.fully_observed = bool(dataset.observed.all())
        self.x_masked = np.where(dataset.observed, dataset.x, 0.0)
        self.pred = self.z.z.astype(np.float64) @ self.q.e_a
        ensure_log_factorial_table(max(dataset.n_rows, z.k_max) + 1)

    @property
    def n_rows(self):
        return self.dataset.n_rows

    @property
    def n_cols(self):
        return self.dataset.n_cols

    @property
    def k_max(self):
        return self.z.k_max

    @property
    def k_plus(self):
        return self.z.k_plus

    @property
    def effective(self):
        return effective_params(self)

    def copy(self):
        out = ModelState.__new__(ModelState)
        out.__dict__.update(self.__dict__)
        out.z = self.z.copy()
        out.q = self.q.copy()
        out.gamma = None if self.gamma is None else dict(self.gamma)
        out.pred = self.pred.copy()
        out.train_ll_history = list(self.train_ll_history)
        out.rng = np.random.default_rng()
        out.rng.bit_generator.state = self.rng.bit_generator.state
        return out

    def restore(self, other):
        self.__dict__.update(other.copy().__dict__)

    def reset_inactive(self):
        """Put every empty column's q(A) row at the prior."""
        empty = np.flatnonzero(self.z.m == 0)
        self.q.reset_rows(empty, self.effective.sigma_a2)
        return empty

    def compact(self):
        order = self.z.compaction_order()
        if np.array_equal(order, np.arange(order.size)):
            return False
        self.z = self.z.permute_columns(order)
        self.q.permute(order)
        return True

    def refresh_caches(self):
        """Recompute cached moments and predictions from scratch.

        Returns the largest drift of the incremental prediction cache.
        """
        self.q.refresh()
        fresh = self.z.z.astype(np.float64) @ self.q.e_a
        drift = float(np.max(np.abs(fresh - self.pred))) if fresh.size else 0.0
        self.pred = fresh
        return drift

    def truncated(self):
        """Copy restricted to the active columns (K_max := K_+)."""
        active = np.flatnonzero(self.z.m > 0)
        q = FactorPosterior(self.q.mu_tilde[active], self.q.sigma2_tilde[active])
        out = ModelState(self.dataset, BinaryFeatureMatrix(self.z.z[:, active]), q, self.hyper,
                         None if self.gamma is None else dict(self.gamma), seed=self.seed,
                         iteration=self.iteration)
        return out


@dataclass(frozen=True)
class InitConfig:
    init_prob: float = 1.0 / 3.0
    mu_scale: float = 0.05
    sigma_scale: float = 0.1


def init_state(dataset, k_max, hyper, seed=0, init=InitConfig(), z_init=None, mu_init=None,
               sigma2_init=None):
    """Random start: Z ~ Bernoulli(init_prob), |N(0, .)| factor parameters.

    ``z_init`` / ``mu_init`` / ``sigma2_init`` override the random draws.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not isinstance(dataset, Dataset):
        raise TypeError("dataset must be a Dataset")
    n, d = dataset.n_rows, dataset.n_cols
    rng = substream(seed, "init")
    z = rng.random((n, k_max)) < init.init_prob
    mu = np.abs(rng.normal(0.0, init.mu_scale, (k_max, d)))
    sigma = np.abs(rng.normal(0.0, init.sigma_scale, (k_max, d)))
    sigma2 = np.maximum(sigma * sigma, 1e-12)
    if z_init is not None:
        z = np.zeros((n, k_max), dtype=np.uint8)
        z_in = np.asarray(z_init)
        z[:, : z_in.shape[1]] = z_in
    if mu_init is not None:
        mu = np.zeros((k_max, d))
        mu[: np.shape(mu_init)[0]] = mu_init
    if sigma2_init is not None:
        sigma2 = np.full((k_max, d), hyper.sigma_a ** 2)
        sigma2[: np.shape(sigma2_init)[0]] = sigma2_init
    gamma = initial_gamma_posteriors(hyper) if hyper.hyper_inference else None
    state = ModelState(dataset, BinaryFeatureMatrix(z), FactorPosterior(mu, sigma2), hyper,
                       gamma=gamma, rng=substream(seed, "double-greedy"), seed=seed)
    state.compact()
    state.reset_inactive()
    state.refresh_caches()
    return state


@dataclass
class SweepReport:
    iteration: int
    elbo: float
    train_ll: float
    train_ll_mean: float
    k_plus: int
    rows_changed: int
    gain_evals: int
    ls_calls: int
    pred_drift: float
    seconds: float = 0.0
    test_ll_mean: float = float("nan")

    @property
    def bookkeeping_ok(self):
        return self.pred_drift <= PRED_TOLERANCE

    @property
    def mean_gain_evals(self):
        return self.gain_evals / self.ls_calls if self.ls_calls else 0.0


def train_log_likelihood(state):
    """(total, per-observed-entry mean) Gaussian log-density at Z E[A]."""
    eff = state.effective
    obs = state.dataset.observed
    resid = np.where(obs, state.dataset.x - state.pred, 0.0)
    n_obs = state.dataset.n_observed
    total = (n_obs * (0.5 * math.log(eff.tau_x) - _HALF_LOG_2PI)
             - 0.5 * eff.tau_x * float(np.sum(resid * resid)))
    return total, total / n_obs


def _row_pass(state, optimizer, ls_config):
    cache = FeatureCache(state)
    rows_changed = gain_evals = 0
    sigma_a2 = state.effective.sigma_a2
    for n in range(state.n_rows):
        obj = build_row_objective(state, n, cache)
        current = state.z.z[n].astype(bool)
        sol = maximize(obj, optimizer, ls_config, state.rng)
        gain_evals += sol.gain_evals
        if np.array_equal(sol.members, current):
            continue
        if not eval_full(obj, sol.members) > eval_full(obj, current):
            continue
        new_row = sol.members.astype(np.uint8)
        state.z.set_row(n, new_row)
        state.pred[n] = new_row.astype(np.float64) @ state.q.e_a
        rows_changed += 1
        emptied = np.flatnonzero(current & (state.z.m == 0))
        if emptied.size:
            state.q.reset_rows(emptied, sigma_a2)
            cache.refresh_columns(emptied)
    return rows_changed, gain_evals


def update_factors(state):
    for k in np.flatnonzero(state.z.m > 0):
        update_factor_row(state, k)
    state.reset_inactive()


SWEEP_ORDERS = ("rows-first", "factors-first")


def sweep(state, optimizer="ls", ls_config=LsConfig(), order="rows-first"):
    """One pass: row maximization and factor updates (in ``order``), then
    hyperparameters and compaction.

    On a numerical error the state is rolled back to the sweep start.
    """
    if order not in SWEEP_ORDERS:
        raise ValueError(f"unknown sweep order {order!r}")
    start = time.monotonic()
    snapshot = state.copy()
    try:
        if order == "factors-first":
            update_factors(state)
        rows_changed, gain_evals = _row_pass(state, optimizer, ls_config)
        if order == "rows-first":
            update_factors(state)
        if state.gamma is not None:
            update_gammas(state)
            state.reset_inactive()
        state.compact()
        drift = state.refresh_caches()
        state.z.check()
        elbo = compute_elbo(state)
        if not math.isfinite(elbo):
            raise NumericalError("non-finite ELBO")
    except (NumericalError, InconsistentMatrixError, FloatingPointError):
        state.restore(snapshot)
        raise
    total, mean = train_log_likelihood(state)
    state.iteration += 1
    state.train_ll_history.append(mean)
    return SweepReport(state.iteration, elbo, total, mean, state.k_plus, rows_changed,
                       gain_evals, state.n_rows, drift, time.monotonic() - start)


@dataclass(frozen=True)
class ConvergenceConfig:
    tol: float = 1e-4
    block: int = 5
    max_iters: int = 500
    max_seconds: float = float("inf")

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.block < 1:
            raise ValueError("block must be >= 1")


def has_converged(history, cfg=ConvergenceConfig()):
    """Relative change of the block-averaged training log-likelihood below tol."""
    b = cfg.block
    if len(history) < 2 * b:
        return False
    last = float(np.mean(history[-b:]))
    prev = float(np.mean(history[-2 * b:-b]))
    if prev == 0.0:
        return last == 0.0
    return abs(last - prev) / abs(prev) < cfg.tol


@dataclass
class FitResult:
    reports: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def converged(self):
        return self.stop_reason == "converged"


def fit(state, conv=ConvergenceConfig(), optimizer="ls", ls_config=LsConfig(), on_sweep=None,
        order="rows-first"):
    """Sweep until the convergence rule fires or a cap is hit.

    ``on_sweep(state, report)`` is called after each sweep (metrics, evaluation).
    """
    result = FitResult()
    t0 = time.monotonic()
    while True:
        report = sweep(state, optimizer, ls_config, order)
        report.seconds = time.monotonic() - t0
        if on_sweep is not None:
            on_sweep(state, report)
        result.reports.append(report)
        if has_converged(state.train_ll_history, conv):
            result.stop_reason = "converged"
        elif state.iteration >= conv.max_iters:
            result.stop_reason = "max_iters"
        elif time.monotonic() - t0 >= conv.max_seconds:
            result.stop_reason = "max_seconds"
        else:
            continue
        log.info("stopped after %d sweeps: %s", state.iteration, result.stop_reason)
        return result
