import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bflow.data import (
    banded_mixing,
    batch_iter,
    dequantize,
    gaussian_entropy_per_dim,
    gaussian_log_prob,
    load_bfdata,
    make_dataset,
    parse_dataset_spec,
    periodic1d,
    permuted_gaussian,
    permuted_patterns,
    save_bfdata,
    standard_normal,
    toy2d,
)
from bflow.errors import InvalidArgumentError


def all_splits(ds):
    return np.concatenate([ds.train, ds.val, ds.test])


class TestToy2d:
    def test_two_rings_radii(self):
        ds = toy2d("two_rings", 5000, seed=1, normalize=False)
        r = np.linalg.norm(all_splits(ds), axis=1)
        assert r.min() >= 0.8 and r.max() <= 2.2
        assert np.mean(np.abs(r - 1) < 0.2) == pytest.approx(0.5, abs=0.03)

    @pytest.mark.parametrize("kind", ["two_rings", "moons", "checkerboard"])
    def test_seed_determinism_and_moments(self, kind):
        a, b = toy2d(kind, 10000, seed=4), toy2d(kind, 10000, seed=4)
        assert all(np.array_equal(getattr(a, s), getattr(b, s)) for s in ("train", "val", "test"))
        assert np.all(np.abs(a.train.mean(axis=0)) < 0.05)
        assert not np.array_equal(a.train[:100], toy2d(kind, 10000, seed=5).train[:100])

    def test_splits_differ(self):
        ds = toy2d("moons", 400, seed=0)
        assert ds.train.shape == (400, 2) and ds.val.shape == (100, 2) and ds.test.shape == (100, 2)
        assert not np.array_equal(ds.train[:100], ds.val)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            toy2d("spirals", 10)
        with pytest.raises(InvalidArgumentError):
            toy2d("moons", 0)


class TestPermutedGaussian:
    def test_identity_perm_covariance(self):
        ds = permuted_gaussian(16, seed=0, n=100000, permute=False)
        a = banded_mixing(16)
        emp = ds.train.T @ ds.train / ds.train.shape[0]
        assert np.linalg.norm(emp - a @ a.T) <= 0.1 * np.linalg.norm(a @ a.T)

    def test_mixing_is_banded(self):
        a = banded_mixing(6)
        assert np.array_equal(np.diag(a), np.ones(6))
        assert np.all(np.diag(a, -1) == 0.9) and np.all(np.diag(a, -2) == 0.5)
        assert np.count_nonzero(np.tril(a, -3)) == 0 and np.count_nonzero(np.triu(a, 1)) == 0

    def test_permutation_applies_as_gather(self):
        plain = permuted_gaussian(8, seed=3, n=50, permute=False)
        mixed = permuted_gaussian(8, seed=3, n=50)
        assert np.array_equal(mixed.train, plain.train[:, mixed.perm])
        np.testing.assert_allclose(mixed.meta["cov"], plain.meta["cov"][np.ix_(mixed.perm, mixed.perm)])

    def test_entropy_is_permutation_invariant(self):
        ds = permuted_gaussian(32, seed=2, n=10)
        a = banded_mixing(32)
        assert gaussian_entropy_per_dim(ds.meta["cov"]) == pytest.approx(gaussian_entropy_per_dim(a @ a.T), abs=1e-12)
        # unit-diagonal triangular A has det 1
        assert gaussian_entropy_per_dim(a @ a.T) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-12)

    def test_log_prob_matches_dense_formula(self):
        ds = permuted_gaussian(8, seed=1, n=20)
        cov = ds.meta["cov"]
        x = ds.test[:5]
        inv = np.linalg.inv(cov)
        ref = -0.5 * np.einsum("ni,ij,nj->n", x, inv, x) - 0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]
        np.testing.assert_allclose(gaussian_log_prob(x, cov), ref, rtol=1e-12)

    def test_same_perm_across_splits_and_seed(self):
        a, b = permuted_gaussian(16, seed=7, n=40), permuted_gaussian(16, seed=7, n=400)
        assert np.array_equal(a.perm, b.perm)
        assert sorted(a.perm) == list(range(16))

    def test_non_power_of_two(self):
        with pytest.raises(InvalidArgumentError):
            permuted_gaussian(12)


class TestPeriodic:
    @pytest.mark.parametrize("f", [2, 4])  # 64 / f must be a whole number of samples
    def test_single_harmonic_is_periodic(self, f):
        ds = periodic1d(64, 2, n=20, seed=f, noise=0.0, harmonics=1, freqs=(f,), normalize=False)
        x = all_splits(ds)
        period = 64 // f
        assert np.max(np.abs(x[..., : 64 - period] - x[..., period:])) <= 1e-9

    @pytest.mark.parametrize("f", [2, 3, 4])
    def test_spectrum_concentrated_on_harmonics(self, f):
        ds = periodic1d(64, 2, n=50, seed=0, noise=0.0, freqs=(f,), normalize=False)
        power = np.abs(np.fft.rfft(ds.train, axis=-1)) ** 2
        on = power[..., [f, 2 * f, 3 * f]].sum(axis=-1)
        assert np.min(on / power.sum(axis=-1)) >= 0.95

    def test_normalized_range(self):
        x = all_splits(periodic1d(n=400, seed=1))
        assert x.min() == pytest.approx(-1.0) and x.max() == pytest.approx(1.0)
        assert x.shape[1:] == (2, 64)

    def test_non_power_of_two(self):
        with pytest.raises(InvalidArgumentError):
            periodic1d(48)


class TestPatterns:
    def test_raw_values_are_bytes(self):
        ds = permuted_patterns(8, n=100, seed=0, permute=False, dequantize_data=False)
        x = all_splits(ds)
        assert np.array_equal(x, np.round(x)) and x.min() >= 0 and x.max() <= 255
        assert np.array_equal(ds.perm, np.arange(64))

    def test_unscramble_recovers_originals(self):
        plain = permuted_patterns(8, n=60, seed=5, permute=False, dequantize_data=False)
        mixed = permuted_patterns(8, n=60, seed=5)
        for raw, ref in zip(mixed.meta["raw"], plain.meta["raw"]):
            assert np.array_equal(mixed.unscramble(raw), ref)

    def test_dequantized_within_bins(self):
        ds = permuted_patterns(8, n=60, seed=5)
        for x, raw in zip((ds.train, ds.val, ds.test), ds.meta["raw"]):
            diff = 256 * x - raw
            assert diff.min() >= 0 and diff.max() < 1

    def test_unscramble_without_perm(self):
        with pytest.raises(InvalidArgumentError):
            standard_normal(4, 10).unscramble(np.zeros((1, 4)))


class TestDequantize:
    def test_top_value(self):
        x = dequantize(np.full(1000, 255), 8, seed=0)
        assert np.all(x >= 255 / 256) and np.all(x < 1)

    @given(st.integers(1, 8), st.integers(0, 2**16))
    def test_within_bins(self, bits, seed):
        rng = np.random.default_rng(seed)
        xi = rng.integers(0, 2**bits, 50)
        x = dequantize(xi, bits, seed)
        assert np.array_equal(np.floor(x * 2**bits), xi)

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            dequantize(np.array([256]), 8)
        with pytest.raises(InvalidArgumentError):
            dequantize(np.array([-1]), 8)


class TestBatchIter:
    @given(st.integers(1, 300), st.integers(1, 64))
    def test_batch_count(self, n, bs):
        assert len(list(batch_iter(np.zeros((n, 1)), bs))) == n // bs

    def test_epochs_differ_but_reproduce(self):
        x = np.arange(100.0)[:, None]
        e0 = np.concatenate(list(batch_iter(x, 10, seed=1, epoch=0)))
        e1 = np.concatenate(list(batch_iter(x, 10, seed=1, epoch=1)))
        assert not np.array_equal(e0, e1)
        assert np.array_equal(e0, np.concatenate(list(batch_iter(x, 10, seed=1, epoch=0))))
        assert sorted(e0.ravel()) == list(range(100))


class TestSpecsAndFiles:
    def test_parse(self):
        assert parse_dataset_spec("two_rings:n=200,noise=0.1") == {"kind": "two_rings", "n": 200, "noise": 0.1}
        with pytest.raises(InvalidArgumentError):
            parse_dataset_spec("two_rings:n")
        with pytest.raises(InvalidArgumentError):
            parse_dataset_spec({"n": 3})

    def test_make_dataset(self):
        ds = make_dataset("permuted_gaussian:dim=8,n=40", seed=2)
        assert ds.shape == (8,) and ds.seed == 2
        with pytest.raises(InvalidArgumentError):
            make_dataset("nope")
        with pytest.raises(InvalidArgumentError):
            make_dataset("two_rings:bogus=1")

    def test_bfdata_round_trip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((7, 2, 4))
        p = tmp_path / "x.bfdata"
        save_bfdata(p, "periodic1d", x)
        assert p.read_bytes().startswith(b"bfdata v1 periodic1d 2x4 7\n")
        kind, y = load_bfdata(p)
        assert kind == "periodic1d" and np.array_equal(x, y)
        ds = make_dataset({"kind": "file", "path": str(p)})
        assert ds.shape == (2, 4) and np.array_equal(ds.test, x)

    def test_bfdata_rejects_bad_files(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"something else\n")
        with pytest.raises(InvalidArgumentError):
            load_bfdata(p)
        p.write_bytes(b"bfdata v1 k 4 2\n" + b"\0" * 8)
        with pytest.raises(InvalidArgumentError):
            load_bfdata(p)
