"""Mean-field updates for the truncated-Gaussian factors, the ELBO, and the
optional gamma hyperprior posteriors.

Every function here takes a ``ModelState`` (see :mod:`meibp.engine`) and
reads the hyperparameters through :func:`effective_params`, so the fixed and
the hyper-inference variants share one code path.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import special

from .model import log_prior_shifted
from .numerics import harmonic, log_factorial, tg_entropy, tg_moments

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_PI_OVER_2 = 0.5 * math.log(0.5 * math.pi)


class NumericalError(ArithmeticError):
    """A non-finite or impossible value appeared in an update."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location


class FactorPosterior:
    """Truncated-Gaussian q(a_kd) parameters with cached moments and entropy."""

    def __init__(self, mu_tilde, sigma2_tilde):
        self.mu_tilde = np.array(mu_tilde, dtype=np.float64)
        self.sigma2_tilde = np.array(sigma2_tilde, dtype=np.float64)
        if self.mu_tilde.shape != self.sigma2_tilde.shape or self.mu_tilde.ndim != 2:
            raise ValueError("mu_tilde and sigma2_tilde must be matching K x D matrices")
        self.refresh()

    @classmethod
    def at_rest(cls, k, d, sigma_a2):
        return cls(np.zeros((k, d)), np.full((k, d), float(sigma_a2)))

    @property
    def shape(self):
        return self.mu_tilde.shape

    @property
    def variance(self):
        return self.e_a2 - self.e_a * self.e_a

    def refresh(self):
        """Recompute every cached moment from (mu_tilde, sigma2_tilde)."""
        sigma = np.sqrt(self.sigma2_tilde)
        self.e_a, self.e_a2 = tg_moments(self.mu_tilde, sigma)
        self.entropy = tg_entropy(self.mu_tilde, sigma)

    def set_row(self, k, mu, sigma2):
        self.mu_tilde[k] = mu
        self.sigma2_tilde[k] = sigma2
        sigma = np.sqrt(self.sigma2_tilde[k])
        self.e_a[k], self.e_a2[k] = tg_moments(self.mu_tilde[k], sigma)
        self.entropy[k] = tg_entropy(self.mu_tilde[k], sigma)

    def reset_rows(self, ks, sigma_a2):
        """Put rows ``ks`` back at the prior (0, sigma_a2)."""
        ks = np.atleast_1d(ks)
        if ks.size == 0:
            return
        d = self.shape[1]
        for k in ks:
            self.set_row(k, np.zeros(d), np.full(d, sigma_a2))

    def permute(self, order):
        self.mu_tilde = np.ascontiguousarray(self.mu_tilde[order])
        self.sigma2_tilde = np.ascontiguousarray(self.sigma2_tilde[order])
        self.e_a = np.ascontiguousarray(self.e_a[order])
        self.e_a2 = np.ascontiguousarray(self.e_a2[order])
        self.entropy = np.ascontiguousarray(self.entropy[order])

    def copy(self):
        out = FactorPosterior.__new__(FactorPosterior)
        for name in ("mu_tilde", "sigma2_tilde", "e_a", "e_a2", "entropy"):
            setattr(out, name, getattr(self, name).copy())
        return out


@dataclass(frozen=True)
class GammaPosterior:
    a_tilde: float
    b_tilde: float

    def __post_init__(self):
        if not (self.a_tilde > 0 and self.b_tilde > 0):
            raise NumericalError(f"gamma posterior needs positive shape/rate, got {self}")

    @property
    def mean(self):
        return self.a_tilde / self.b_tilde

    @property
    def mean_log(self):
        return float(special.digamma(self.a_tilde) - math.log(self.b_tilde))

    def entropy(self):
        a = self.a_tilde
        return float(a - math.log(self.b_tilde) + special.gammaln(a)
                     + (1.0 - a) * special.digamma(a))

    def expected_log_prior(self, a0, b0):
        """E_q[ln Gamma(tau; a0, b0)]."""
        return float(a0 * math.log(b0) - special.gammaln(a0)
                     + (a0 - 1.0) * self.mean_log - b0 * self.mean)


@dataclass(frozen=True)
class EffectiveParams:
    """Hyperparameter expectations as they enter the bound.

    With fixed hyperparameters the log entries are plain logs; under
    hyper-inference they are E[ln tau] and E[ln alpha].
    """

    tau_x: float
    log_tau_x: float
    tau_a: float
    log_tau_a: float
    alpha: float
    log_alpha: float

    @property
    def sigma_x2(self):
        return 1.0 / self.tau_x

    @property
    def sigma_a2(self):
        return 1.0 / self.tau_a

    @classmethod
    def fixed(cls, hyper):
        tx = 1.0 / hyper.sigma_x ** 2
        ta = 1.0 / hyper.sigma_a ** 2
        return cls(tx, math.log(tx), ta, math.log(ta), hyper.alpha, math.log(hyper.alpha))

    @classmethod
    def from_gamma(cls, gamma):
        qx, qa, qal = gamma["tau_x"], gamma["tau_a"], gamma["alpha"]
        return cls(qx.mean, qx.mean_log, qa.mean, qa.mean_log, qal.mean, qal.mean_log)


def effective_params(state):
    if state.gamma is not None:
        return EffectiveParams.from_gamma(state.gamma)
    return EffectiveParams.fixed(state.hyper)


def initial_gamma_posteriors(hyper):
    """q(tau), q(alpha) seeded with the priors' shapes and the given point values as means."""
    g = hyper.gamma_priors
    return {
        "tau_x": GammaPosterior(g.a_x, g.a_x * hyper.sigma_x ** 2),
        "tau_a": GammaPosterior(g.a_a, g.a_a * hyper.sigma_a ** 2),
        "alpha": GammaPosterior(g.a_alpha, g.a_alpha / hyper.alpha),
    }


def update_factor_row(state, k):
    """Coordinate-ascent update of q(a_k.) given Z and the other rows of q(A).

    Keeps ``state.pred`` (= Z E[A]) in step.  A feature with no observing
    rows is set to the prior exactly.
    """
    eff = effective_params(state)
    q = state.q
    rows = np.flatnonzero(state.z.z[:, k])
    d = q.shape[1]
    if rows.size == 0:
        q.set_row(k, np.zeros(d), np.full(d, eff.sigma_a2))
        return
    ea_old = q.e_a[k].copy()
    if state.fully_observed:
        counts = np.full(d, float(rows.size))
        resid = state.x_masked[rows].sum(axis=0) - state.pred[rows].sum(axis=0) + counts * ea_old
    else:
        obs = state.dataset.observed[rows]
        counts = obs.sum(axis=0).astype(np.float64)
        resid = (state.x_masked[rows].sum(axis=0) - (state.pred[rows] * obs).sum(axis=0)
                 + counts * ea_old)
    rho = 1.0 / (counts + eff.sigma_x2 / eff.sigma_a2)
    mu = rho * resid
    sigma2 = rho * eff.sigma_x2
    bad = ~np.isfinite(mu)
    if bad.any():
        raise NumericalError("non-finite factor residual", (int(k), int(np.argmax(bad))))
    q.set_row(k, mu, sigma2)
    state.pred[rows] += q.e_a[k] - ea_old


def _expected_sq_error(state):
    """Sum over observed entries of E_q[(x_nd - Z_n. a_.d)^2]."""
    obs = state.dataset.observed
    resid = np.where(obs, state.dataset.x - state.pred, 0.0)
    var = state.q.variance
    if state.fully_observed:
        spread = float(state.z.m @ var.sum(axis=1))
    else:
        m_kd = state.z.z.T.astype(np.float64) @ obs
        spread = float(np.sum(m_kd * var))
    return float(np.sum(resid * resid)) + spread


def factor_terms(q, eff, rows=None):
    """Per-feature E_q[ln p(a_k.)] + H[q(a_k.)], summed over dimensions."""
    e_a2, ent = (q.e_a2, q.entropy) if rows is None else (q.e_a2[rows], q.entropy[rows])
    per = (-_HALF_LOG_PI_OVER_2 + 0.5 * eff.log_tau_a) - 0.5 * eff.tau_a * e_a2 + ent
    return per.sum(axis=1)


def gamma_terms(state):
    g, pri = state.gamma, state.hyper.gamma_priors
    total = 0.0
    for name, a0, b0 in (("tau_x", pri.a_x, pri.b_x), ("tau_a", pri.a_a, pri.b_a),
                         ("alpha", pri.a_alpha, pri.b_alpha)):
        total += g[name].expected_log_prior(a0, b0) + g[name].entropy()
    return total


def compute_elbo(state, slots="auto"):
    """Evidence lower bound with every normalizing constant included.

    ``slots`` selects which feature slots contribute factor terms: ``"all"``
    uses every allocated column, ``"active"`` only columns with m_k > 0.
    ``"auto"`` is ``"all"`` for fixed hyperparameters and ``"active"`` under
    hyper-inference, where a slot at the prior no longer contributes zero.
    """
    eff = effective_params(state)
    if slots == "auto":
        slots = "active" if state.gamma is not None else "all"
    n_obs = state.dataset.n_observed
    lik = n_obs * (0.5 * eff.log_tau_x - _HALF_LOG_2PI) - 0.5 * eff.tau_x * _expected_sq_error(state)
    if slots == "all":
        a_part = float(factor_terms(state.q, eff).sum())
    elif slots == "active":
        a_part = float(factor_terms(state.q, eff, np.flatnonzero(state.z.m > 0)).sum())
    else:
        raise ValueError(f"unknown slots selector {slots!r}")
    n = state.n_rows
    if state.gamma is None:
        prior = log_prior_shifted(state.z, state.hyper.alpha, n)
    else:
        m = state.z.m[state.z.m > 0]
        k_plus = m.size
        prior = (k_plus * eff.log_alpha - log_factorial(k_plus) - eff.alpha * harmonic(n)
                 + float(np.sum(log_factorial(n - m) + log_factorial(m - 1) - log_factorial(n))))
    total = lik + a_part + prior
    if state.gamma is not None:
        total += gamma_terms(state)
    return float(total)


def update_gamma_tau_a(state):
    pri = state.hyper.gamma_priors
    active = state.z.m > 0
    k_plus = int(active.sum())
    d = state.n_cols
    return GammaPosterior(pri.a_a + 0.5 * k_plus * d,
                          pri.b_a + 0.5 * float(state.q.e_a2[active].sum()))


def update_gamma_tau_x(state):
    pri = state.hyper.gamma_priors
    inc = 0.5 * _expected_sq_error(state)
    if inc < 0:
        raise NumericalError(f"negative noise-rate increment {inc}; stale caches?")
    return GammaPosterior(pri.a_x + 0.5 * state.dataset.n_observed, pri.b_x + inc)


def update_gamma_alpha(state):
    pri = state.hyper.gamma_priors
    return GammaPosterior(pri.a_alpha + state.z.k_plus, pri.b_alpha + harmonic(state.n_rows))


def update_gammas(state):
    """Apply the three gamma updates in turn, each seeing the previous ones."""
    state.gamma["tau_a"] = update_gamma_tau_a(state)
    state.gamma["tau_x"] = update_gamma_tau_x(state)
    state.gamma["alpha"] = update_gamma_alpha(state)
