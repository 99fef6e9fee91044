"""Per-row submodular objective and its maximizers.

For one row n of Z the bound is, up to a constant,

    F(S) = -1/2 s' W s + s . omega + constant - ln(K_{+\\n} + #new(S))!

where s is the indicator vector of S, W = tau_x * Phi Phi' restricted to the
row's observed dimensions, and #new(S) counts members whose column is empty
once row n is removed.  W is entrywise nonnegative because E[a] >= 0, which
is what makes F submodular.
"""

from dataclasses import dataclass
import math

import numpy as np

from .numerics import log_factorial
from .variational import effective_params, factor_terms

BRUTE_FORCE_CAP = 25


class CapacityError(ValueError):
    pass


@dataclass
class RowObjective:
    w: np.ndarray
    omega: np.ndarray
    eta: np.ndarray
    empty_without_n: np.ndarray
    k_plus_without_n: int
    constant: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.eta = np.asarray(self.eta, dtype=np.float64)
        self.empty_without_n = np.asarray(self.empty_without_n, dtype=bool)
        self.diag = np.diag(self.w).copy()

    @property
    def size(self):
        return self.omega.shape[0]

    def value(self, members):
        return eval_full(self, members)


@dataclass(frozen=True)
class LsConfig:
    epsilon: float = 0.1
    scan_order: str = "best-first"
    max_passes: int = 10_000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.scan_order not in ("ascending", "best-first"):
            raise ValueError(f"unknown scan order {self.scan_order!r}")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


class FeatureCache:
    """Per-sweep quantities shared by all row objectives.

    One Gram matrix and variance-correction vector per distinct observation
    pattern; ``refresh_columns`` patches them when a feature is reset.
    """

    def __init__(self, state):
        self.state = state
        observed = state.dataset.observed
        if state.fully_observed:
            self.patterns = np.ones((1, state.n_cols), dtype=bool)
            self.pattern_of = np.zeros(state.n_rows, dtype=np.int64)
        else:
            self.patterns, self.pattern_of = np.unique(observed, axis=0, return_inverse=True)
            self.pattern_of = self.pattern_of.reshape(-1)
        self.rebuild()

    def rebuild(self):
        q = self.state.q
        eff = effective_params(self.state)
        var = q.variance
        self.gram = []
        self.corr = []
        for mask in self.patterns:
            phi = q.e_a[:, mask]
            self.gram.append(phi @ phi.T)
            self.corr.append(var[:, mask].sum(axis=1))
        self.eta = factor_terms(q, eff) + eff.log_alpha

    def refresh_columns(self, ks):
        ks = np.atleast_1d(ks)
        if ks.size == 0:
            return
        q = self.state.q
        eff = effective_params(self.state)
        var = q.variance
        for p, mask in enumerate(self.patterns):
            phi = q.e_a[:, mask]
            cross = phi @ phi[ks].T
            self.gram[p][:, ks] = cross
            self.gram[p][ks, :] = cross.T
            self.corr[p][ks] = var[ks][:, mask].sum(axis=1)
        self.eta[ks] = factor_terms(q, eff, ks) + eff.log_alpha


def nu_difference(m_without, n):
    """nu(z=1) - nu(z=0) and nu(z=0) for each column, given m_{k\\n}."""
    m = np.asarray(m_without, dtype=np.int64)
    empty = m == 0
    mm1 = np.maximum(m - 1, 0)
    lfn = log_factorial(n)
    nu0 = np.where(empty, 0.0, log_factorial(n - m) + log_factorial(mm1) - lfn)
    nu1 = log_factorial(n - m - 1) + log_factorial(m) - lfn
    return nu1 - nu0, nu0


def build_row_objective(state, n, cache=None):
    """Objective over row n's features with the other rows held fixed."""
    if not 0 <= n < state.n_rows:
        raise IndexError(f"row {n} out of range for N={state.n_rows}")
    if cache is None:
        cache = FeatureCache(state)
    eff = effective_params(state)
    z_n = state.z.z[n]
    m_without = state.z.m - z_n
    empty = m_without == 0
    p = cache.pattern_of[n]
    phi = state.q.e_a
    x_n = state.x_masked[n]
    lik = eff.tau_x * (phi @ x_n - 0.5 * cache.corr[p])
    nu_diff, nu0 = nu_difference(m_without, state.n_rows)
    omega = lik + nu_diff + np.where(empty, cache.eta, 0.0)
    n_obs = int(state.dataset.observed[n].sum())
    constant = (float(nu0.sum()) + float(cache.eta[~empty].sum())
                + n_obs * (0.5 * eff.log_tau_x - 0.5 * math.log(2 * math.pi))
                - 0.5 * eff.tau_x * float(x_n @ x_n))
    return RowObjective(
        w=eff.tau_x * cache.gram[p],
        omega=omega,
        eta=cache.eta.copy(),
        empty_without_n=empty,
        k_plus_without_n=int(np.count_nonzero(m_without)),
        constant=constant,
    )


def eval_full(obj, members):
    """Direct O(k^2) evaluation of the objective on an indicator vector."""
    s = np.asarray(members, dtype=np.float64)
    new = int(round(float(s @ obj.empty_without_n)))
    return float(-0.5 * (s @ obj.w @ s) + s @ obj.omega + obj.constant
                 - log_factorial(obj.k_plus_without_n + new))


class SolutionSet:
    """A member set with the auxiliary cross-weight vector for O(1) gains.

    ``aux[j]`` is the sum of w[i, j] over current members i.
    """

    def __init__(self, obj, members=None):
        self.obj = obj
        k = obj.size
        self.members = np.zeros(k, dtype=bool) if members is None else np.array(members, dtype=bool)
        s = self.members.astype(np.float64)
        self.aux = obj.w @ s
        self.new_feature_count = int(np.count_nonzero(self.members & obj.empty_without_n))
        self.value = eval_full(obj, self.members)
        self.gain_evals = 0
        self.pass_capped = False

    def __contains__(self, k):
        return bool(self.members[k])

    def _logfact_step(self, c):
        base = self.obj.k_plus_without_n
        return log_factorial(base + c + 1) - log_factorial(base + c)

    def gain_add(self, k):
        if self.members[k]:
            raise KeyError(f"{k} already a member")
        obj = self.obj
        pen = self._logfact_step(self.new_feature_count) if obj.empty_without_n[k] else 0.0
        return obj.omega[k] - 0.5 * obj.diag[k] - self.aux[k] - pen

    def gain_remove(self, k):
        if not self.members[k]:
            raise KeyError(f"{k} not a member")
        obj = self.obj
        pen = self._logfact_step(self.new_feature_count - 1) if obj.empty_without_n[k] else 0.0
        return self.aux[k] - obj.omega[k] - 0.5 * obj.diag[k] + pen

    def add_gains(self):
        """Gain of adding each element (meaningful for non-members only)."""
        obj = self.obj
        step = self._logfact_step(self.new_feature_count)
        return obj.omega - 0.5 * obj.diag - self.aux - step * obj.empty_without_n

    def remove_gains(self):
        """Gain of removing each element (meaningful for members only)."""
        obj = self.obj
        c = self.new_feature_count
        step = self._logfact_step(c - 1) if c > 0 else 0.0
        return self.aux - obj.omega - 0.5 * obj.diag + step * obj.empty_without_n

    def add(self, k, gain=None):
        if gain is None:
            gain = self.gain_add(k)
        self.members[k] = True
        self.aux += self.obj.w[k]
        self.new_feature_count += int(self.obj.empty_without_n[k])
        self.value += gain

    def remove(self, k, gain=None):
        if gain is None:
            gain = self.gain_remove(k)
        self.members[k] = False
        self.aux -= self.obj.w[k]
        self.new_feature_count -= int(self.obj.empty_without_n[k])
        self.value += gain

    def recompute(self):
        return eval_full(self.obj, self.members)


def _first_passing(gains, candidates, threshold, scan_order):
    """Pick an improving element; returns (index or None, evaluations spent)."""
    if candidates.size == 0:
        return None, 0
    g = gains[candidates]
    if scan_order == "best-first":
        j = int(np.argmax(g))
        return (int(candidates[j]) if g[j] > threshold else None), candidates.size
    passing = g > threshold
    if not passing.any():
        return None, candidates.size
    j = int(np.argmax(passing))
    return int(candidates[j]), j + 1


def ls_maximize(obj, cfg=LsConfig()):
    """Local search: best singleton, then grow/prune, then compare with the complement.

    Moves must beat the current value by the factor (1 + eps/|V|^2) measured
    from a reference level (the empty set, lowered to the worst singleton
    when that is below it).  ``gain_evals`` on the result counts O(1) gain
    evaluations.
    """
    k = obj.size
    if k == 0:
        raise ValueError("empty ground set")
    delta = cfg.epsilon / (k * k)
    sol = SolutionSet(obj)
    singles = sol.add_gains()
    evals = k
    reference = sol.value + min(0.0, float(singles.min()))
    best = int(np.argmax(singles))
    sol.add(best, singles[best])

    passes = 0
    while True:
        passes += 1
        if passes > cfg.max_passes:
            sol.pass_capped = True
            break
        while True:
            thr = delta * max(sol.value - reference, 0.0)
            gains = sol.add_gains()
            idx, spent = _first_passing(gains, np.flatnonzero(~sol.members), thr, cfg.scan_order)
            evals += spent
            if idx is None:
                break
            sol.add(idx, gains[idx])
        thr = delta * max(sol.value - reference, 0.0)
        gains = sol.remove_gains()
        idx, spent = _first_passing(gains, np.flatnonzero(sol.members), thr, cfg.scan_order)
        evals += spent
        if idx is None:
            break
        sol.remove(idx, gains[idx])

    comp = SolutionSet(obj, ~sol.members)
    out = comp if comp.value > sol.value else sol
    out.gain_evals = evals
    out.pass_capped = sol.pass_capped
    return out


def double_greedy_maximize(obj, rng):
    """Randomized double greedy: one pass, keep or drop each element."""
    k = obj.size
    if k == 0:
        raise ValueError("empty ground set")
    lower = SolutionSet(obj)
    upper = SolutionSet(obj, np.ones(k, dtype=bool))
    for i in range(k):
        a = max(lower.gain_add(i), 0.0)
        b = max(upper.gain_remove(i), 0.0)
        if a + b > 0 and rng.random() < a / (a + b):
            lower.add(i)
        else:
            upper.remove(i)
    lower.gain_evals = 2 * k
    return lower


def subset_matrix(k, start=0, stop=None):
    """Rows are the indicator vectors of subsets start..stop-1 in binary order."""
    stop = 1 << k if stop is None else stop
    codes = np.arange(start, stop, dtype=np.int64)
    return ((codes[:, None] >> np.arange(k)) & 1).astype(np.float64)


def enumerate_values(obj, chunk=1 << 15):
    """Objective value of every subset, indexed by its bit code."""
    k = obj.size
    if k > BRUTE_FORCE_CAP:
        raise CapacityError(f"ground set of {k} exceeds brute-force cap {BRUTE_FORCE_CAP}")
    out = np.empty(1 << k)
    empty = obj.empty_without_n.astype(np.float64)
    for start in range(0, 1 << k, chunk):
        stop = min(start + chunk, 1 << k)
        s = subset_matrix(k, start, stop)
        quad = np.einsum("ij,jk,ik->i", s, obj.w, s)
        new = (s @ empty).round().astype(np.int64)
        out[start:stop] = (-0.5 * quad + s @ obj.omega + obj.constant
                           - log_factorial(obj.k_plus_without_n + new))
    return out


def brute_force_maximize(obj):
    """Exhaustive maximizer; returns (best set, minimum objective value F_n0)."""
    values = enumerate_values(obj)
    code = int(np.argmax(values))
    members = ((code >> np.arange(obj.size)) & 1).astype(bool)
    sol = SolutionSet(obj, members)
    sol.gain_evals = values.size
    return sol, float(values.min())


def random_solution(obj, rng):
    """Each element included independently with probability 1/2."""
    if obj.size == 0:
        raise ValueError("empty ground set")
    return SolutionSet(obj, rng.random(obj.size) < 0.5)


OPTIMIZERS = ("ls", "double-greedy", "brute", "random")


def maximize(obj, optimizer="ls", ls_config=LsConfig(), rng=None):
    if optimizer == "ls":
        return ls_maximize(obj, ls_config)
    if optimizer == "double-greedy":
        return double_greedy_maximize(obj, rng)
    if optimizer == "brute":
        return brute_force_maximize(obj)[0]
    if optimizer == "random":
        return random_solution(obj, rng)
    raise ValueError(f"unknown optimizer {optimizer!r}")
