import json
import math

import numpy as np
import pytest
from scipy import stats

from meibp.model import load_dataset, read_mask
from meibp.synth import (
    SynthSpec,
    corner_block_factors,
    gen_binary_images,
    gen_sparse_factor_data,
    make_holdout_mask,
    spec_provenance,
    write_generated,
)


class TestSparse:
    def test_default_is_small_protocol(self):
        spec = SynthSpec()
        assert (spec.n, spec.d, spec.k, spec.density, spec.sigma_noise) == (500, 500, 20, 0.4, 1.0)

    def test_noiseless_is_product(self):
        ds, z, a = gen_sparse_factor_data(SynthSpec(n=30, d=12, k=4, sigma_noise=0, seed=1))
        assert np.array_equal(ds.x, z @ a)
        assert np.all(ds.x == np.round(ds.x))
        assert set(np.unique(a)) <= {0.0, 1.0}

    def test_seeded(self):
        spec = SynthSpec(n=20, d=10, k=3, seed=9)
        assert np.array_equal(gen_sparse_factor_data(spec)[0].x, gen_sparse_factor_data(spec)[0].x)

    def test_density_within_binomial_band(self):
        spec = SynthSpec(n=500, d=5, k=20, seed=2)
        _, z, a = gen_sparse_factor_data(spec)
        size = z.size
        assert abs(z.mean() - 0.4) < 3 * math.sqrt(0.4 * 0.6 / size)
        assert abs(a.mean() - 0.5) < 3 * math.sqrt(0.25 / a.size)

    def test_noise_scale(self):
        ds, z, a = gen_sparse_factor_data(SynthSpec(n=200, d=100, k=5, sigma_noise=2.0, seed=3))
        resid = (ds.x - z @ a).ravel()
        assert stats.kstest(resid / 2.0, "norm").pvalue > 1e-3

    @pytest.mark.parametrize("kw", [dict(n=0), dict(density=1.5), dict(sigma_noise=-1),
                                    dict(factor_scheme="other")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)


class TestImages:
    def test_single_factor_image(self):
        factors = corner_block_factors()
        ds, z, _ = gen_binary_images(200, 0.0, seed=0)
        rows = np.flatnonzero(z.sum(axis=1) == 1)
        assert rows.size > 0
        for r in rows:
            assert np.array_equal(ds.x[r], factors[np.argmax(z[r])])

    def test_factor_shapes(self):
        f = corner_block_factors().reshape(4, 6, 6)
        assert f.sum(axis=(1, 2)).tolist() == [9, 9, 9, 9]
        assert f.sum(axis=0).max() == 1  # disjoint
        assert corner_block_factors(True).reshape(4, 6, 6).sum(axis=0).max() > 1

    def test_activation_frequency(self):
        _, z, _ = gen_binary_images(10_000, 0.5, seed=4)
        for col in z.T:
            assert abs(col.mean() - 0.5) < 3 * math.sqrt(0.25 / col.size)

    def test_dimensions(self):
        ds, _, a = gen_binary_images(5, 0.1)
        assert ds.x.shape == (5, 36) and a.shape == (4, 36)

    def test_injected_factors_validated(self):
        with pytest.raises(ValueError):
            gen_binary_images(5, 0.1, factors=np.ones((2, 35)))
        with pytest.raises(ValueError):
            gen_binary_images(5, 0.1, factors=np.full((2, 36), 0.5))
        with pytest.raises(ValueError):
            gen_binary_images(0, 0.1)

    def test_image_scheme_via_spec(self):
        ds, _, _ = gen_sparse_factor_data(SynthSpec(n=7, d=36, k=4, factor_scheme="image-blocks"))
        assert ds.x.shape == (7, 36)


class TestHoldout:
    def test_example(self):
        mask = make_holdout_mask(8, 10, 0.2, seed=0)
        assert not mask[:4].any()
        cols = np.flatnonzero(mask.any(axis=0))
        assert cols.size == 2
        assert mask[4:][:, cols].all()

    def test_cardinality(self):
        for n, d, frac in [(7, 13, 0.3), (500, 500, 0.2), (3, 4, 0.5)]:
            mask = make_holdout_mask(n, d, frac, seed=1)
            assert mask.sum() == math.ceil(frac * d) * math.ceil(n / 2)

    def test_seeded(self):
        assert np.array_equal(make_holdout_mask(10, 20, seed=3), make_holdout_mask(10, 20, seed=3))

    def test_invalid(self):
        for frac in (0.0, 1.0):
            with pytest.raises(ValueError):
                make_holdout_mask(4, 10, frac)
        with pytest.raises(ValueError):
            make_holdout_mask(4, 2, 0.9)


def test_write_generated(tmp_path):
    spec = SynthSpec(n=6, d=5, k=2, seed=1)
    ds, _, _ = gen_sparse_factor_data(spec)
    mask = make_holdout_mask(6, 5, 0.2, seed=1)
    paths = write_generated(tmp_path / "run", ds, mask, spec_provenance(spec, mask_seed=1))
    assert np.array_equal(load_dataset(paths["data"]).x, ds.x)
    assert np.array_equal(read_mask(paths["mask"], (6, 5)), mask)
    meta = json.loads(open(paths["provenance"], encoding="utf-8").read())
    assert meta["seed"] == 1 and meta["protocol"] == "sparse" and meta["mask_seed"] == 1
    binary = write_generated(tmp_path / "bin", ds, binary=True)
    assert binary["data"].endswith(".bin") and "mask" not in binary
    assert np.array_equal(load_dataset(binary["data"]).x, ds.x)
