import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bflow.butterfly import (
    ButterflyLayer,
    PairIndexing,
    factor_invert,
    factor_log_det,
    factor_matvec,
    factor_new,
    factor_to_dense,
    layer_apply,
    layer_invert,
    layer_invert_apply,
    layer_new,
    layer_to_dense,
    segmented_apply,
    segmented_invert_apply,
    segmented_new,
)
from bflow.errors import InvalidArgumentError, SingularFactorError
from bflow.permutation import perm_decompose

from oracles import dense_factor, dense_layer, lu_logabsdet, pair_positions


def random_factor(level, dim, seed, field="real64"):
    rng = np.random.default_rng(seed)
    f = factor_new(level, dim, "identity", field=field)
    w = rng.standard_normal(f.weights.shape)
    if field == "complex128":
        w = w + 1j * rng.standard_normal(f.weights.shape)
    f.weights[...] = w
    return f


dims_and_levels = st.integers(1, 8).flatmap(
    lambda k: st.tuples(st.just(2**k), st.integers(1, k), st.integers(0, 2**31))
)


class TestPairIndexing:
    def test_level_one_pairs_j_with_j_plus_half(self):
        p, q = PairIndexing(1, 8).pairs()
        assert list(zip(p, q)) == [(0, 4), (1, 5), (2, 6), (3, 7)]

    @given(dims_and_levels)
    def test_pairs_partition_the_coordinates(self, case):
        d, lvl, _ = case
        p, q = PairIndexing(lvl, d).pairs()
        assert sorted(np.concatenate([p, q]).tolist()) == list(range(d))
        assert list(zip(p.tolist(), q.tolist())) == pair_positions(lvl, d)

    @pytest.mark.parametrize("level,dim", [(0, 8), (2, 6), (4, 8), (1, 3)])
    def test_invalid(self, level, dim):
        with pytest.raises(InvalidArgumentError):
            PairIndexing(level, dim)


class TestFactorNew:
    def test_identity_dim8(self):
        f = factor_new(1, 8, "identity")
        assert np.array_equal(f.pair_dets(), np.ones((1, 4)))
        assert np.array_equal(factor_to_dense(f), np.eye(8))

    def test_rotation_blocks_have_unit_determinant(self):
        f = factor_new(1, 2, "rotation", seed=0)
        w = f.weights[0, 0]
        phi = np.arctan2(w[1, 0], w[0, 0])
        assert -np.pi < phi <= np.pi
        np.testing.assert_allclose(w, [[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]], atol=1e-15)
        assert factor_log_det(f)[0] == pytest.approx(0.0, abs=1e-15)

    def test_quarter_turn_block(self):
        f = factor_new(1, 2, "identity")
        f.weights[0, 0] = [[0.0, -1.0], [1.0, 0.0]]
        np.testing.assert_array_equal(factor_matvec(f, np.array([1.0, 0.0])), [0.0, 1.0])
        assert factor_log_det(f) == (0.0, 1.0)

    def test_rotation_angles_cover_the_circle(self):
        f = factor_new(1, 4096, "rotation", seed=1)
        phi = np.arctan2(f.weights[..., 1, 0], f.weights[..., 0, 0]).ravel()
        assert phi.min() < -3.0 and phi.max() > 3.0
        assert abs(np.mean(phi)) < 0.1

    def test_level3_dim16_is_block_diagonal(self):
        f = factor_new(3, 16, "rotation", seed=7)
        dense = factor_to_dense(f)
        np.testing.assert_array_equal(dense, dense_factor(f.weights, 3, 16))
        mask = np.kron(np.eye(4), np.ones((4, 4))).astype(bool)
        assert np.all(dense[~mask] == 0)

    def test_seeded_is_deterministic(self):
        a = factor_new(2, 32, "rotation", seed=5)
        b = factor_new(2, 32, "rotation", seed=5)
        assert np.array_equal(a.weights, b.weights)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            factor_new(3, 12)
        with pytest.raises(InvalidArgumentError):
            factor_new(0, 8)
        with pytest.raises(InvalidArgumentError):
            factor_new(1, 8, "bogus")

    def test_tied_shares_one_block_per_subblock(self):
        f = factor_new(2, 16, "rotation", seed=3, tied=True)
        assert f.weights.shape == (2, 1, 2, 2)
        dense = factor_to_dense(f)
        # within each level-1 sub-block the four diagonals are constant
        for m in range(2):
            sub = dense[m * 8 : m * 8 + 8, m * 8 : m * 8 + 8]
            for r0, c0 in ((0, 0), (0, 4), (4, 0), (4, 4)):
                diag = np.diag(sub[r0 : r0 + 4, c0 : c0 + 4])
                assert np.all(diag == diag[0])


class TestMatvec:
    def test_identity(self):
        x = np.arange(8.0)
        assert np.array_equal(factor_matvec(factor_new(2, 8), x), x)

    def test_hadamard_pairs(self):
        f = factor_new(1, 4)
        f.weights[...] = [[1.0, 1.0], [1.0, -1.0]]
        np.testing.assert_array_equal(factor_matvec(f, np.array([1.0, 2, 3, 4])), [4, 6, -2, -2])

    def test_random_vs_dense(self):
        f = random_factor(2, 32, 3)
        x = np.random.default_rng(0).standard_normal(32)
        ref = dense_factor(f.weights, 2, 32) @ x
        assert np.max(np.abs(factor_matvec(f, x) - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_batched_rows_are_independent(self):
        f = random_factor(3, 16, 1)
        x = np.random.default_rng(1).standard_normal((5, 16))
        batched = factor_matvec(f, x)
        for i in range(5):
            np.testing.assert_array_equal(batched[i], factor_matvec(f, x[i]))

    def test_complex_field(self):
        f = random_factor(2, 16, 4, field="complex128")
        x = np.random.default_rng(2).standard_normal(16) + 0j
        np.testing.assert_allclose(factor_matvec(f, x), dense_factor(f.weights, 2, 16) @ x, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            factor_matvec(factor_new(1, 8), np.zeros(6))


class TestLogDet:
    def test_identity(self):
        assert factor_log_det(factor_new(1, 16)) == (0.0, 1.0)

    def test_two_by_two(self):
        f = factor_new(1, 2)
        f.weights[0, 0] = [[2.0, 1.0], [1.0, 1.0]]
        assert factor_log_det(f) == (0.0, 1.0)

    def test_random_vs_lu(self):
        f = random_factor(4, 64, 11)
        ref = lu_logabsdet(dense_factor(f.weights, 4, 64))
        assert abs(factor_log_det(f)[0] - ref) <= 1e-10 * abs(ref)

    def test_sign_matches_dense(self):
        for seed in range(20):
            f = random_factor(2, 8, seed)
            assert factor_log_det(f)[1] == np.sign(np.linalg.det(dense_factor(f.weights, 2, 8)))

    def test_complex_phase(self):
        f = random_factor(1, 8, 5, field="complex128")
        det = np.linalg.det(dense_factor(f.weights, 1, 8))
        mag, phase = factor_log_det(f)
        assert mag == pytest.approx(np.log(abs(det)), rel=1e-12)
        assert phase == pytest.approx(det / abs(det), abs=1e-12)

    def test_singular_marker(self):
        f = factor_new(1, 8)
        f.weights[0, 2] = [[1.0, 2.0], [2.0, 4.0]]
        mag, _ = factor_log_det(f)
        assert mag == -np.inf

    def test_tied_counts_every_pair(self):
        f = factor_new(1, 8, "identity", tied=True)
        f.weights[0, 0] = [[2.0, 0.0], [0.0, 1.0]]
        assert factor_log_det(f)[0] == pytest.approx(4 * np.log(2.0))

    @given(dims_and_levels)
    def test_property_matches_lu(self, case):
        d, lvl, seed = case
        f = random_factor(lvl, d, seed)
        ref = lu_logabsdet(dense_factor(f.weights, lvl, d))
        assert abs(factor_log_det(f)[0] - ref) <= 1e-10 * max(1.0, abs(ref))


class TestInvert:
    def test_identity(self):
        inv = factor_invert(factor_new(2, 8))
        assert np.array_equal(inv.weights, factor_new(2, 8).weights)

    def test_diagonal_block(self):
        f = factor_new(1, 2)
        f.weights[0, 0] = [[2.0, 0.0], [0.0, 4.0]]
        np.testing.assert_array_equal(factor_invert(f).weights[0, 0], [[0.5, 0.0], [0.0, 0.25]])

    def test_random_dim128(self):
        f = random_factor(3, 128, 8)
        prod = dense_factor(f.weights, 3, 128) @ dense_factor(factor_invert(f).weights, 3, 128)
        assert np.linalg.norm(prod - np.eye(128), np.inf) <= 1e-10

    def test_singular_pair_is_identified(self):
        f = factor_new(2, 16)
        f.weights[1, 2] = 0.0
        with pytest.raises(SingularFactorError) as info:
            factor_invert(f)
        # second block (offset 8), j = 2 -> pair (10, 14); pairs are numbered in storage order
        assert info.value.pair_index == 1 * 4 + 2

    @given(dims_and_levels)
    def test_keeps_level_and_sparsity(self, case):
        d, lvl, seed = case
        f = random_factor(lvl, d, seed)
        inv = factor_invert(f)
        assert inv.level == f.level and inv.indexing == f.indexing
        pattern = dense_factor(f.weights, lvl, d) != 0
        assert np.all(dense_factor(inv.weights, lvl, d)[~pattern] == 0)


class TestLayer:
    def test_identity_layer(self):
        x = np.arange(16.0)
        y, ld = layer_apply(layer_new(16, 4), x)
        assert np.array_equal(y, x) and ld == 0.0

    def test_single_factor_layer(self):
        layer = layer_new(8, [2], "rotation", seed=4)
        x = np.random.default_rng(4).standard_normal(8)
        y, ld = layer_apply(layer, x)
        assert np.array_equal(y, factor_matvec(layer.factors[0], x))
        assert ld == factor_log_det(layer.factors[0])[0]

    def test_bidirectional_dim16(self):
        layer = layer_new(16, 4, "rotation", seed=5, bidirectional=True)
        assert layer.levels == [1, 2, 3, 4, 4, 3, 2, 1]
        rng = np.random.default_rng(5)
        for f in layer.factors:
            f.weights[...] += 0.5 * rng.standard_normal(f.weights.shape)
        x = rng.standard_normal(16)
        y, ld = layer_apply(layer, x)
        dense = dense_layer(layer.factors)
        ref = dense @ x
        assert np.max(np.abs(y - ref)) <= 1e-11 * np.max(np.abs(ref))
        assert abs(ld - lu_logabsdet(dense)) <= 1e-9
        np.testing.assert_array_equal(layer_to_dense(layer), layer_to_dense(layer))
        np.testing.assert_allclose(layer_to_dense(layer), dense, atol=1e-13)

    def test_last_factor_is_applied_first(self):
        a, b = random_factor(1, 4, 0), random_factor(2, 4, 1)
        x = np.arange(4.0)
        y, _ = layer_apply(ButterflyLayer(4, [a, b]), x)
        np.testing.assert_array_equal(y, factor_matvec(a, factor_matvec(b, x)))

    def test_log_det_is_sum_of_factor_log_dets(self):
        layer = layer_new(32, 5, "rotation", seed=2, bidirectional=True)
        rng = np.random.default_rng(2)
        for f in layer.factors:
            f.weights[...] *= rng.uniform(0.5, 2.0, f.weights.shape)
        total = 0.0
        for f in reversed(layer.factors):
            total += factor_log_det(f)[0]
        assert layer_apply(layer, np.zeros(32))[1] == total

    def test_invert_apply_identity(self):
        z = np.arange(8.0)
        assert np.array_equal(layer_invert_apply(layer_new(8, 3), z), z)

    def test_rotation_inverse_is_transpose(self):
        layer = layer_new(8, [1], "rotation", seed=9)
        z = np.random.default_rng(9).standard_normal(8)
        dense = dense_factor(layer.factors[0].weights, 1, 8)
        np.testing.assert_allclose(layer_invert_apply(layer, z), dense.T @ z, atol=1e-15)

    def test_six_factor_round_trip(self):
        rng = np.random.default_rng(6)
        layer = layer_new(64, [1, 2, 3, 4, 5, 6], "rotation", seed=6)
        for f in layer.factors:
            f.weights[...] += 0.3 * rng.standard_normal(f.weights.shape)
        x = rng.standard_normal((4, 64))
        y, _ = layer_apply(layer, x)
        assert np.max(np.abs(layer_invert_apply(layer, y) - x)) <= 1e-9
        np.testing.assert_allclose(layer_apply(layer_invert(layer), y)[0], x, atol=1e-9)

    def test_singular_layer_refuses_inverse(self):
        layer = layer_new(8, 2)
        layer.factors[1].weights[0, 0] = 0.0
        with pytest.raises(SingularFactorError):
            layer_invert_apply(layer, np.zeros(8))

    def test_non_monotone_schedule(self):
        layer = layer_new(16, [2, 2, 1, 4], "rotation", seed=0)
        assert layer.levels == [2, 2, 1, 4]
        x = np.random.default_rng(0).standard_normal(16)
        np.testing.assert_allclose(layer_apply(layer, x)[0], dense_layer(layer.factors) @ x, atol=1e-13)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            layer_apply(layer_new(8, 2), np.zeros(4))
        with pytest.raises(InvalidArgumentError):
            layer_invert_apply(layer_new(8, 2), np.zeros(4))


class TestSegmented:
    def test_identity_segments(self):
        s = segmented_new((512, 256, 16), (9, 8, 4))
        x = np.random.default_rng(0).standard_normal(784)
        y, ld = segmented_apply(s, x)
        assert np.array_equal(y, x) and ld == 0.0

    def test_swaps_stay_inside_segments(self):
        s = segmented_new((4, 4), (2, 2))
        perm = np.array([3, 2, 1, 0])
        s.layers = [perm_decompose(perm), perm_decompose(perm)]
        y, _ = segmented_apply(s, np.arange(8.0))
        np.testing.assert_array_equal(y, [3, 2, 1, 0, 7, 6, 5, 4])

    def test_random_vs_block_diagonal(self):
        s = segmented_new((8, 8), (3, 2), "rotation", seed=1)
        rng = np.random.default_rng(1)
        for layer in s.layers:
            for f in layer.factors:
                f.weights[...] += 0.3 * rng.standard_normal(f.weights.shape)
        dense = np.zeros((16, 16))
        dense[:8, :8] = dense_layer(s.layers[0].factors)
        dense[8:, 8:] = dense_layer(s.layers[1].factors)
        x = rng.standard_normal(16)
        y, ld = segmented_apply(s, x)
        assert np.max(np.abs(y - dense @ x)) <= 1e-11
        assert ld == pytest.approx(lu_logabsdet(dense), abs=1e-11)
        np.testing.assert_allclose(segmented_invert_apply(s, y), x, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            segmented_apply(segmented_new((4, 4), (2, 2)), np.zeros(9))


class TestDense:
    def test_level1_dim4_pattern(self):
        dense = factor_to_dense(random_factor(1, 4, 0))
        nz = set(zip(*np.nonzero(dense)))
        expected = {(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 2), (3, 1), (3, 3)}
        assert {(int(a), int(b)) for a, b in nz} == expected

    def test_layer_dense_is_ordered_product(self):
        layer = layer_new(16, [1, 3, 2], "rotation", seed=3)
        prod = np.eye(16)
        for f in layer.factors:
            prod = prod @ factor_to_dense(f)
        np.testing.assert_array_equal(layer_to_dense(layer), prod)

    @given(dims_and_levels)
    def test_factor_dense_matches_scatter_oracle(self, case):
        d, lvl, seed = case
        f = random_factor(lvl, d, seed)
        np.testing.assert_array_equal(factor_to_dense(f), dense_factor(f.weights, lvl, d))
        assert np.max(np.count_nonzero(factor_to_dense(f), axis=1)) <= 2
