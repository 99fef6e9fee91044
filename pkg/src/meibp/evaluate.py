"""Held-out predictive likelihood and K_+ recovery summaries."""

from collections import Counter
from dataclasses import asdict, dataclass
import csv
import json
import math

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EvalReport:
    test_ll_total: float
    test_ll_mean: float
    rmse: float
    n_heldout: int

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def predictive_log_likelihood(state, dataset=None, heldout=None, integrate=False):
    """Gaussian log-density of held-out entries under the current posterior.

    By default plugs in E[A]; ``integrate=True`` adds the q(A) variance of
    each prediction to the noise variance.  ``heldout`` defaults to the
    dataset's unobserved entries.
    """
    dataset = state.dataset if dataset is None else dataset
    if dataset.x.shape != state.pred.shape:
        raise ValueError(f"dataset shape {dataset.x.shape} does not match state {state.pred.shape}")
    heldout = dataset.heldout if heldout is None else np.asarray(heldout, dtype=bool)
    if heldout.shape != dataset.x.shape:
        raise ValueError("mask shape does not match dataset")
    n = int(heldout.sum())
    if n == 0:
        return EvalReport(0.0, None, None, 0)
    var = np.full(n, state.effective.sigma_x2)
    if integrate:
        rows, cols = np.nonzero(heldout)
        zf = state.z.z.astype(np.float64)
        var = var + np.einsum("ik,ki->i", zf[rows], state.q.variance[:, cols])
    resid = dataset.x[heldout] - state.pred[heldout]
    ll = -0.5 * (_LOG_2PI + np.log(var) + resid * resid / var)
    total = float(ll.sum())
    return EvalReport(total, total / n, float(np.sqrt(np.mean(resid * resid))), n)


@dataclass
class KRecoveryReport:
    histogram: Counter
    table: list

    def fraction(self, values):
        values = set(np.atleast_1d(values).tolist())
        total = sum(self.histogram.values())
        return sum(c for k, c in self.histogram.items() if k in values) / total

    def write_csv(self, histogram_path, table_path=None):
        with open(histogram_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k_plus", "count"])
            for k in sorted(self.histogram):
                w.writerow([k, self.histogram[k]])
        if table_path is not None:
            with open(table_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sigma_x", "seed", "k_plus"])
                w.writerows(self.table)


def k_recovery_report(runs):
    """Histogram of final K_+ from (sigma_x, seed, k_plus) triples or states."""
    table = []
    for run in runs:
        if hasattr(run, "k_plus"):
            table.append((float("nan"), run.seed, int(run.k_plus)))
        else:
            sigma, seed, k_plus = run
            table.append((float(sigma), seed, int(k_plus)))
    if not table:
        raise ValueError("k_recovery_report needs at least one run")
    return KRecoveryReport(Counter(row[2] for row in table), table)
