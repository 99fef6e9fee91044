"""Benchmarks: ls against brute force, gain-evaluation scaling, K_+ recovery."""

from dataclasses import dataclass, field
import csv
import math

import numpy as np

from .engine import ConvergenceConfig, update_factors, fit, init_state, substream, sweep
from .evaluate import k_recovery_report
from .model import Hyperparams
from .rowopt import (
    CapacityError,
    FeatureCache,
    LsConfig,
    brute_force_maximize,
    build_row_objective,
    ls_maximize,
    random_solution,
)
from .synth import SynthSpec, gen_binary_images, gen_sparse_factor_data

LS_BENCH_CAP = 14
WITHIN = 0.95


def _is_optimal(value, opt):
    return value >= opt - 1e-9 * max(1.0, abs(opt))


def _normalized(value, opt, floor):
    span = opt - floor
    return 1.0 if span <= 0 else (value - floor) / span


@dataclass
class LsBenchRow:
    k: int
    n_opt: int
    ls_optimal: float
    ls_optimal_sd: float
    ls_within: float
    ls_within_sd: float
    random_optimal: float
    random_optimal_sd: float
    random_within: float
    random_within_sd: float
    bound_violations: int
    min_bound_margin: float


@dataclass
class LsBenchResult:
    rows: list = field(default_factory=list)
    epsilon: float = 0.1

    def row(self, k):
        return next(r for r in self.rows if r.k == k)

    def write_csv(self, path):
        names = list(LsBenchRow.__dataclass_fields__)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, n) for n in names])


def _row_objectives(k, n, d, sigma, seed, n_rows, factor_sweeps=10):
    """Objectives for ``n_rows`` random rows once q(A) is fitted to the true Z."""
    spec = SynthSpec(n=n, d=d, k=k, sigma_noise=sigma, seed=seed)
    dataset, z, _ = gen_sparse_factor_data(spec)
    state = init_state(dataset, k, Hyperparams(alpha=3.0, sigma_x=sigma, sigma_a=1.0),
                       seed=seed, z_init=z)
    for _ in range(factor_sweeps):
        update_factors(state)
    state.refresh_caches()
    cache = FeatureCache(state)
    rows = substream(seed, "bench-rows").choice(n, size=n_rows, replace=n_rows > n)
    return [build_row_objective(state, int(r), cache) for r in rows]


def bench_ls(ks=range(2, 13), n=100, d=50, sigma=1.0, n_datasets=5, opts_per_k=200,
             ls_config=LsConfig(), seed=0):
    """Compare ls and uniform random solutions with the enumerated optimum.

    Each objective is a real row objective from a model whose factors were
    fitted (Z held at the truth) on data drawn with ``k`` true features.
    """
    ks = list(ks)
    if max(ks) > LS_BENCH_CAP:
        raise CapacityError(f"k={max(ks)} exceeds the benchmark cap {LS_BENCH_CAP}")
    per_dataset = math.ceil(opts_per_k / n_datasets)
    result = LsBenchResult(epsilon=ls_config.epsilon)
    for k in ks:
        stats = {name: [] for name in ("lo", "lw", "ro", "rw")}
        violations, margin, count = 0, math.inf, 0
        for j in range(n_datasets):
            ds_seed = seed * 1_000_003 + 1000 * k + j
            rng = substream(ds_seed, "bench-random")
            lo = lw = ro = rw = 0
            objs = _row_objectives(k, n, d, sigma, ds_seed, per_dataset)
            for obj in objs:
                best, floor = brute_force_maximize(obj)
                opt = best.value
                ls = ls_maximize(obj, ls_config)
                rnd = random_solution(obj, rng)
                lo += _is_optimal(ls.value, opt)
                lw += _normalized(ls.value, opt, floor) >= WITHIN
                ro += _is_optimal(rnd.value, opt)
                rw += _normalized(rnd.value, opt, floor) >= WITHIN
                bound = floor + (1 - ls_config.epsilon / k) * (opt - floor) / 3
                slack = ls.value - bound
                violations += slack < -1e-9 * max(1.0, abs(opt))
                margin = min(margin, slack)
            total = len(objs)
            count += total
            for name, v in zip(("lo", "lw", "ro", "rw"), (lo, lw, ro, rw)):
                stats[name].append(v / total)
        m = {name: (float(np.mean(v)), float(np.std(v))) for name, v in stats.items()}
        result.rows.append(LsBenchRow(k, count, *m["lo"], *m["lw"], *m["ro"], *m["rw"],
                                      violations, float(margin)))
    return result


@dataclass
class ScaleResult:
    ks: list
    mean_gain_evals: list
    slope: float

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "mean_gain_evals"])
            w.writerows(zip(self.ks, self.mean_gain_evals))
            w.writerow(["slope", self.slope])


def loglog_slope(xs, ys):
    if len(xs) < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def bench_scale(ks=(10, 20, 40, 80), n=1000, d=200, sigma=1.0, sweeps=3,
                ls_config=LsConfig(), seed=0):
    """Mean O(1) gain evaluations per ls call as the ground set grows."""
    means = []
    for k in ks:
        spec = SynthSpec(n=n, d=d, k=k, sigma_noise=sigma, seed=seed + k)
        dataset, _, _ = gen_sparse_factor_data(spec)
        state = init_state(dataset, k, Hyperparams(alpha=3.0, sigma_x=sigma, sigma_a=1.0),
                           seed=seed + k)
        evals = calls = 0
        for _ in range(sweeps):
            report = sweep(state, "ls", ls_config)
            evals += report.gain_evals
            calls += report.ls_calls
        means.append(evals / calls)
    ks = list(ks)
    return ScaleResult(ks, means, loglog_slope(ks, means))


def k_recovery_grid(n_runs=20, sigma_lo=0.1, sigma_hi=0.5):
    """(data noise, seed) pairs: noise evenly spaced, seed = run index."""
    return list(zip(np.linspace(sigma_lo, sigma_hi, n_runs).tolist(), range(n_runs)))


def run_k_recovery(grid, n=500, k_max=12, alpha=2.0, conv=ConvergenceConfig(),
                   ls_config=LsConfig()):
    """Fit each binary-images dataset from a random start and report final K_+."""
    hyper = Hyperparams(alpha=alpha, sigma_x=1.0, sigma_a=1.0)
    runs = []
    for sigma, seed in grid:
        dataset, _, _ = gen_binary_images(n, sigma, seed=seed)
        state = init_state(dataset, k_max, hyper, seed=seed)
        fit(state, conv, "ls", ls_config)
        runs.append((sigma, seed, state.k_plus))
    return k_recovery_report(runs)

