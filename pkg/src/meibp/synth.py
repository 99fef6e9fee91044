"""Synthetic data: sparse binary-factor data, 6x6 binary images, held-out masks."""

from dataclasses import asdict, dataclass
import json
import math

import numpy as np

from .model import Dataset, save_dataset, write_mask


@dataclass(frozen=True)
class SynthSpec:
    n: int = 500
    d: int = 500
    k: int = 20
    density: float = 0.4
    sigma_noise: float = 1.0
    factor_scheme: str = "random-binary-overlapping"
    factor_density: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.d, self.k) < 1:
            raise ValueError("n, d, k must be >= 1")
        if not 0.0 <= self.density <= 1.0 or not 0.0 <= self.factor_density <= 1.0:
            raise ValueError("densities must lie in [0, 1]")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        if self.factor_scheme not in ("random-binary-overlapping", "image-blocks"):
            raise ValueError(f"unknown factor scheme {self.factor_scheme!r}")


def gen_sparse_factor_data(spec):
    """X = Z A + noise with Bernoulli(density) Z and random binary factor rows A.

    Returns (Dataset, Z, A).
    """
    if spec.factor_scheme == "image-blocks":
        return gen_binary_images(spec.n, spec.sigma_noise, spec.seed)
    rng = np.random.default_rng(spec.seed)
    z = (rng.random((spec.n, spec.k)) < spec.density).astype(np.uint8)
    a = (rng.random((spec.k, spec.d)) < spec.factor_density).astype(np.float64)
    x = z @ a
    if spec.sigma_noise > 0:
        x = x + rng.normal(0.0, spec.sigma_noise, x.shape)
    return Dataset(x), z, a


def corner_block_factors(overlapping=False):
    """Four 6x6 bitmaps, one 3x3 block per corner (4x4 blocks if overlapping)."""
    size = 4 if overlapping else 3
    factors = np.zeros((4, 6, 6))
    factors[0, :size, :size] = 1
    factors[1, :size, 6 - size:] = 1
    factors[2, 6 - size:, :size] = 1
    factors[3, 6 - size:, 6 - size:] = 1
    return factors.reshape(4, 36)


def gen_binary_images(n, sigma_noise, seed=0, factors=None, prob=0.5, overlapping=False):
    """6x6 images built from binary factors each present with probability ``prob``.

    Returns (Dataset, Z, A).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if factors is None:
        factors = corner_block_factors(overlapping)
    a = np.asarray(factors, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 36 or ((a != 0) & (a != 1)).any():
        raise ValueError("image factors must be binary 36-dimensional rows")
    rng = np.random.default_rng(seed)
    z = (rng.random((n, a.shape[0])) < prob).astype(np.uint8)
    x = z @ a
    if sigma_noise > 0:
        x = x + rng.normal(0.0, sigma_noise, x.shape)
    return Dataset(x), z, a


def make_holdout_mask(n, d, frac=0.2, seed=0):
    """Hold out ceil(frac*d) shared columns on rows n//2 .. n-1."""
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must lie strictly between 0 and 1")
    n_cols = math.ceil(frac * d)
    if n_cols <= 0 or n_cols >= d:
        raise ValueError(f"frac={frac} with d={d} masks {n_cols} columns")
    rng = np.random.default_rng(seed)
    cols = np.sort(rng.choice(d, size=n_cols, replace=False))
    heldout = np.zeros((n, d), dtype=bool)
    heldout[np.ix_(np.arange(n // 2, n), cols)] = True
    return heldout


def write_generated(prefix, dataset, heldout=None, provenance=None, binary=False):
    """Write ``prefix``.{csv|bin}, optional ``prefix``.mask.csv and a JSON sidecar."""
    data_path = f"{prefix}.{'bin' if binary else 'csv'}"
    save_dataset(data_path, dataset, binary=binary)
    paths = {"data": data_path}
    if heldout is not None:
        paths["mask"] = f"{prefix}.mask.csv"
        write_mask(paths["mask"], heldout)
    meta = dict(provenance or {})
    meta["files"] = paths
    paths["provenance"] = f"{prefix}.json"
    with open(paths["provenance"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def spec_provenance(spec, **extra):
    out = {"protocol": "sparse", **asdict(spec)}
    out.update(extra)
    return out
