"""Scalar special-function kernels.

Moments and entropy of a Gaussian truncated to [0, inf), written in terms of
the scaled complementary error function so that they stay finite when the
location sits many scales below zero.  All kernels accept numpy arrays and
broadcast.
"""

from dataclasses import dataclass
import math
import threading

import numpy as np
from scipy import special

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# erfcx(x) = exp(x^2) erfc(x) overflows float64 just below this.
ERFCX_MIN_ARG = -26.0


@dataclass(frozen=True)
class TruncGaussParams:
    """Location/scale of the underlying Gaussian of a [0, inf) truncation."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError(f"non-finite truncated Gaussian parameters {self}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @property
    def wp(self):
        """Standardized truncation argument -mu / (sigma sqrt 2)."""
        return -self.mu / (self.sigma * _SQRT2)

    def mean(self):
        return float(tg_mean(self.mu, self.sigma))

    def second_moment(self):
        return float(tg_second_moment(self.mu, self.sigma))

    def entropy(self):
        return float(tg_entropy(self.mu, self.sigma))


def erfcx(x):
    """Scaled complementary error function exp(x^2) * erfc(x).

    Raises ``ValueError`` on NaN input and ``OverflowError`` for x < -26,
    where the result no longer fits in a float64.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("erfcx: NaN argument")
    if (arr < ERFCX_MIN_ARG).any():
        raise OverflowError(f"erfcx: argument below {ERFCX_MIN_ARG} overflows")
    out = special.erfcx(arr)
    return float(out) if out.ndim == 0 else out


def _check_scale(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("truncated Gaussian scale must be positive and finite")
    return sigma


def _mills(mu, sigma):
    # sqrt(2/pi) / erfcx(wp); goes to 0 (not NaN) when erfcx overflows.
    wp = -mu / (sigma * _SQRT2)
    with np.errstate(over="ignore"):
        return _SQRT_2_OVER_PI / special.erfcx(wp)


def _unwrap(out):
    return float(out) if np.ndim(out) == 0 else out


def tg_mean(mu, sigma):
    """E[a] for a ~ N(mu, sigma^2) truncated to [0, inf)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = _check_scale(sigma)
    out = mu + sigma * _mills(mu, sigma)
    return _unwrap(np.maximum(out, 0.0))


def tg_second_moment(mu, sigma):
    """E[a^2] for a ~ N(mu, sigma^2) truncated to [0, inf)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = _check_scale(sigma)
    return _unwrap(mu * mu + sigma * sigma + sigma * mu * _mills(mu, sigma))


def tg_moments(mu, sigma):
    """Return (E[a], E[a^2]) sharing one erfcx evaluation."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = _check_scale(sigma)
    r = _mills(mu, sigma)
    mean = np.maximum(mu + sigma * r, 0.0)
    second = mu * mu + sigma * sigma + sigma * mu * r
    return _unwrap(mean), _unwrap(second)


def log_erfc(x):
    """ln erfc(x) without underflow for large positive x."""
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    safe_pos = np.where(pos, x, 0.0)
    safe_neg = np.where(pos, 0.0, x)
    out = np.where(pos,
                   np.log(special.erfcx(safe_pos)) - safe_pos * safe_pos,
                   np.log(special.erfc(safe_neg)))
    return _unwrap(out)


def tg_entropy(mu, sigma):
    """Differential entropy of N(mu, sigma^2) truncated to [0, inf).

    H = 1/2 ln(pi e sigma^2 / 2) + ln erfc(wp) - (mu/sigma) / (sqrt(2 pi) erfcx(wp))
    with wp = -mu / (sigma sqrt 2).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = _check_scale(sigma)
    wp = -mu / (sigma * _SQRT2)
    with np.errstate(over="ignore"):
        tail = (mu / sigma) * _INV_SQRT_2PI / special.erfcx(wp)
    out = 0.5 * np.log(0.5 * math.pi * math.e * sigma * sigma) + log_erfc(wp) - tail
    return _unwrap(out)


class LogFactorialTable:
    """ln(n!) lookups backed by a lazily grown table of lgamma values."""

    def __init__(self, limit=1024):
        self._lock = threading.Lock()
        self._table = special.gammaln(np.arange(limit + 1, dtype=np.float64) + 1.0)

    @property
    def limit(self):
        return self._table.shape[0] - 1

    def ensure(self, limit):
        if limit <= self.limit:
            return
        with self._lock:
            if limit > self.limit:
                size = max(limit, 2 * self.limit)
                self._table = special.gammaln(np.arange(size + 1, dtype=np.float64) + 1.0)

    def __call__(self, n):
        arr = np.asarray(n)
        if arr.ndim == 0:
            k = int(arr)
            if k < 0:
                raise ValueError(f"log_factorial of negative {k}")
            if k > self.limit:
                self.ensure(k)
            return float(self._table[k])
        if arr.size and arr.min() < 0:
            raise ValueError("log_factorial of negative argument")
        if arr.size and arr.max() > self.limit:
            self.ensure(int(arr.max()))
        return self._table[arr.astype(np.int64)]


_LOG_FACTORIAL = LogFactorialTable()


def log_factorial(n):
    """ln(n!) for a non-negative integer or integer array."""
    return _LOG_FACTORIAL(n)


def ensure_log_factorial_table(limit):
    """Pre-build the ln(n!) table up to ``limit`` (done once per engine)."""
    _LOG_FACTORIAL.ensure(int(limit))


def harmonic(n):
    """N-th harmonic number sum_{i=1}^n 1/i."""
    n = int(n)
    if n < 1:
        raise ValueError(f"harmonic number needs n >= 1, got {n}")
    if n <= 64:
        return math.fsum(1.0 / i for i in range(1, n + 1))
    return float(special.digamma(n + 1.0) + np.euler_gamma)
