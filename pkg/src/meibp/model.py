"""Data containers and the IBP log-prior.

Also holds the dataset/mask file formats: CSV or the raw ``MEIB`` binary
layout (16-byte header: magic, u32 N, u32 D, u32 reserved; then N*D
little-endian float64, row-major), and held-out masks as CSV (row, col)
pairs.
"""

from dataclasses import dataclass, field, replace
import csv
import io
import math
import os
import struct
from collections import Counter

import numpy as np

from .numerics import harmonic, log_factorial

MAGIC = b"MEIB"
_HEADER = struct.Struct("<4sIII")

PREPROCESS_SCHEMES = ("zero-min", "zero-mean", "none")


class InconsistentMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class Preprocessing:
    scheme: str = "none"
    shift_applied: float = 0.0


@dataclass
class Dataset:
    """N x D observations plus a mask of entries that take part in training."""

    x: np.ndarray
    observed: np.ndarray = None
    preprocessing: Preprocessing = field(default_factory=Preprocessing)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise ValueError(f"dataset must be a non-empty 2-D matrix, got shape {self.x.shape}")
        if self.observed is None:
            self.observed = np.ones(self.x.shape, dtype=bool)
        self.observed = np.ascontiguousarray(self.observed, dtype=bool)
        if self.observed.shape != self.x.shape:
            raise ValueError("observation mask shape does not match data")
        if not np.isfinite(self.x[self.observed]).all():
            raise ValueError("observed entries must be finite")

    @property
    def n_rows(self):
        return self.x.shape[0]

    @property
    def n_cols(self):
        return self.x.shape[1]

    @property
    def heldout(self):
        return ~self.observed

    @property
    def n_observed(self):
        return int(self.observed.sum())

    def with_mask(self, heldout):
        """Copy of this dataset with ``heldout`` entries excluded from training."""
        heldout = np.asarray(heldout, dtype=bool)
        if heldout.shape != self.x.shape:
            raise ValueError(f"mask shape {heldout.shape} does not match data {self.x.shape}")
        return Dataset(self.x.copy(), ~heldout, self.preprocessing)

    def preprocess(self, scheme="zero-min"):
        """Shift the data so observed entries have zero minimum (or zero mean)."""
        if scheme not in PREPROCESS_SCHEMES:
            raise ValueError(f"unknown preprocessing scheme {scheme!r}")
        if self.preprocessing.scheme != "none":
            raise ValueError("dataset already preprocessed")
        vals = self.x[self.observed]
        if scheme == "zero-min":
            shift = -float(vals.min())
        elif scheme == "zero-mean":
            shift = -float(vals.mean())
        else:
            shift = 0.0
        return self.apply_shift(scheme, shift)

    def apply_shift(self, scheme, shift):
        return Dataset(self.x + shift, self.observed.copy(), Preprocessing(scheme, float(shift)))

    def pooled_std(self):
        """Standard deviation of all observed entries pooled across dimensions."""
        return float(self.x[self.observed].std())


class BinaryFeatureMatrix:
    """N x K binary feature assignments with cached column sums.

    Rows are kept as a dense uint8 array; the engine reads and writes one row
    at a time and keeps ``m`` in step through :meth:`set_row`.
    """

    def __init__(self, z, k_max=None):
        z = np.array(z, dtype=np.uint8, copy=True)
        if z.ndim != 2:
            raise ValueError("Z must be 2-D")
        if ((z != 0) & (z != 1)).any():
            raise ValueError("Z must be binary")
        if k_max is not None and k_max != z.shape[1]:
            raise ValueError("k_max must equal the number of allocated columns")
        self.z = z
        self.m = z.sum(axis=0, dtype=np.int64)

    @classmethod
    def zeros(cls, n, k_max):
        return cls(np.zeros((n, k_max), dtype=np.uint8))

    @property
    def n_rows(self):
        return self.z.shape[0]

    @property
    def k_max(self):
        return self.z.shape[1]

    @property
    def k_plus(self):
        return int(np.count_nonzero(self.m))

    @property
    def active(self):
        return self.m > 0

    def copy(self):
        out = BinaryFeatureMatrix.__new__(BinaryFeatureMatrix)
        out.z = self.z.copy()
        out.m = self.m.copy()
        return out

    def set_row(self, n, row):
        row = np.asarray(row, dtype=np.uint8)
        self.m += row.astype(np.int64) - self.z[n].astype(np.int64)
        self.z[n] = row

    def check(self):
        """Raise if the cached column sums drifted from Z."""
        if not np.array_equal(self.m, self.z.sum(axis=0, dtype=np.int64)):
            raise InconsistentMatrixError("cached column sums disagree with Z")
        if (self.m > self.n_rows).any():
            raise InconsistentMatrixError("column sum exceeds number of rows")

    def compaction_order(self):
        """Column permutation that moves all-zero columns to the right."""
        active = np.flatnonzero(self.m > 0)
        empty = np.flatnonzero(self.m == 0)
        return np.concatenate([active, empty])

    def permute_columns(self, order):
        out = BinaryFeatureMatrix.__new__(BinaryFeatureMatrix)
        out.z = np.ascontiguousarray(self.z[:, order])
        out.m = self.m[order].copy()
        return out

    def __eq__(self, other):
        return isinstance(other, BinaryFeatureMatrix) and np.array_equal(self.z, other.z)

    def __repr__(self):
        return f"BinaryFeatureMatrix(n={self.n_rows}, k_max={self.k_max}, k_plus={self.k_plus})"


def compact_columns(zm):
    """Shift all-zero columns right, keeping the order of the active ones."""
    return zm.permute_columns(zm.compaction_order())


@dataclass(frozen=True)
class GammaPriors:
    a_x: float = 1.0
    b_x: float = 1.0
    a_a: float = 1.0
    b_a: float = 1.0
    a_alpha: float = 1.0
    b_alpha: float = 1.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if not val > 0:
                raise ValueError(f"gamma prior {name} must be > 0, got {val}")


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 3.0
    sigma_x: float = 1.0
    sigma_a: float = 1.0
    hyper_inference: bool = False
    gamma_priors: GammaPriors = None

    def __post_init__(self):
        for name in ("alpha", "sigma_x", "sigma_a"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be positive and finite, got {val}")
        if self.hyper_inference and self.gamma_priors is None:
            raise ValueError("hyper_inference requires gamma_priors")
        if not self.hyper_inference and self.gamma_priors is not None:
            raise ValueError("gamma_priors given without hyper_inference")

    def with_scales(self, sigma_x, sigma_a):
        return replace(self, sigma_x=float(sigma_x), sigma_a=float(sigma_a))


def _column_log_terms(m, n):
    m = np.asarray(m, dtype=np.int64)
    m = m[m > 0]
    if (m > n).any():
        raise InconsistentMatrixError(f"column sum exceeds N={n}")
    return float(np.sum(log_factorial(n - m) + log_factorial(m - 1) - log_factorial(n)))


def _m_of(zm):
    return zm.m if isinstance(zm, BinaryFeatureMatrix) else np.asarray(zm).sum(axis=0)


def log_prior_shifted(zm, alpha, n):
    """Log IBP prior of the shifted equivalence class of Z.

    Depends on Z only through the column sums and K_+.
    """
    m = np.asarray(_m_of(zm), dtype=np.int64)
    k_plus = int(np.count_nonzero(m))
    return (k_plus * math.log(alpha) - log_factorial(k_plus) - alpha * harmonic(n)
            + _column_log_terms(m, n))


def column_history_counts(z):
    """Multiplicities K_h of each distinct non-zero column of Z.

    Columns are keyed by their packed bits, so any N works.
    """
    z = np.asarray(z, dtype=np.uint8)
    cols = [np.packbits(z[:, k]).tobytes() for k in range(z.shape[1]) if z[:, k].any()]
    return Counter(cols)


def log_prior_lof(zm, alpha, n):
    """Log IBP prior of the left-ordered-form equivalence class of Z."""
    z = zm.z if isinstance(zm, BinaryFeatureMatrix) else np.asarray(zm)
    m = z.sum(axis=0).astype(np.int64)
    k_plus = int(np.count_nonzero(m))
    multiplicity = sum(log_factorial(c) for c in column_history_counts(z).values())
    return (k_plus * math.log(alpha) - multiplicity - alpha * harmonic(n)
            + _column_log_terms(m, n))


# --- file formats -----------------------------------------------------------

def _looks_numeric(row):
    try:
        [float(v) for v in row]
    except ValueError:
        return False
    return True


def read_csv_matrix(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _looks_numeric(rows[0]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)


def write_csv_matrix(path, x):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(x):
            w.writerow([repr(float(v)) for v in row])


def read_binary_matrix(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, n, d, _ = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        body = fh.read()
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} float64 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)


def write_binary_matrix(path, x):
    x = np.ascontiguousarray(x, dtype="<f8")
    n, d = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, 0))
        fh.write(x.tobytes())


def _is_binary_file(path):
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC


def load_dataset(path, mask_path=None):
    """Load a CSV or MEIB file; ``mask_path`` lists held-out (row, col) pairs."""
    x = read_binary_matrix(path) if _is_binary_file(path) else read_csv_matrix(path)
    ds = Dataset(x)
    if mask_path is not None:
        ds = ds.with_mask(read_mask(mask_path, x.shape))
    return ds


def save_dataset(path, dataset_or_x, binary=None):
    x = dataset_or_x.x if isinstance(dataset_or_x, Dataset) else np.asarray(dataset_or_x)
    if binary is None:
        binary = os.fspath(path).endswith((".bin", ".meib"))
    (write_binary_matrix if binary else write_csv_matrix)(path, x)


def read_mask(path, shape):
    """Boolean held-out matrix from a CSV of zero-based (row, col) pairs."""
    heldout = np.zeros(shape, dtype=bool)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not _looks_numeric(row):
                continue
            r, c = int(row[0]), int(row[1])
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise ValueError(f"{path}: mask entry ({r}, {c}) outside {shape}")
            heldout[r, c] = True
    return heldout


def write_mask(path, heldout):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col"])
    for r, c in zip(*np.nonzero(heldout)):
        w.writerow([int(r), int(c)])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
