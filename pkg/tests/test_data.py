import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csid.data import (
    DataError,
    Dataset,
    DegenerateCodebookError,
    Encoder,
    MarginalSet,
    Quantizer,
    aggregate,
    aggregate_arrays,
    fit_marginals,
    kfold,
    lloyd_max_fit,
    quantize,
    split,
)
from helpers import two_level_optimum


class TestLloydMax:
    def test_two_point_masses(self):
        q = lloyd_max_fit([0, 0, 1, 1], 2)
        np.testing.assert_array_equal(q.levels, [0.0, 1.0])
        np.testing.assert_array_equal(q.boundaries, [0.5])
        assert q.distortion == 0.0

    def test_four_points_two_levels(self):
        q = lloyd_max_fit([1, 2, 3, 4], 2)
        np.testing.assert_allclose(q.levels, [1.5, 3.5])
        np.testing.assert_allclose(q.boundaries, [2.5])
        assert q.distortion == pytest.approx(0.25)
        assert q.distortion == pytest.approx(two_level_optimum([1, 2, 3, 4]))

    @pytest.mark.parametrize("init", ["optimal", "quantile"])
    def test_one_level_per_distinct_value(self, init):
        values = [3.0, 1.0, 1.0, 7.5, 3.0, 2.0]
        q = lloyd_max_fit(values, 4, init=init)
        assert q.distortion == 0.0
        np.testing.assert_array_equal(q.levels, [1.0, 2.0, 3.0, 7.5])

    def test_degenerate_codebook(self):
        with pytest.raises(DegenerateCodebookError):
            lloyd_max_fit([1.0, 1.0, 2.0], 3)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            lloyd_max_fit([], 2)
        with pytest.raises(ValueError):
            lloyd_max_fit([1.0, np.inf], 2)
        with pytest.raises(ValueError):
            lloyd_max_fit([1.0, 2.0], 1)
        with pytest.raises(ValueError):
            lloyd_max_fit([1.0, 2.0], 2, init="kmeans++")

    @pytest.mark.parametrize("init", ["optimal", "quantile"])
    def test_distortion_non_increasing(self, init):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.standard_normal(200) ** 3
            q = lloyd_max_fit(v, int(rng.integers(2, 12)), init=init)
            assert np.all(np.diff(q.distortion_trace) <= 1e-15)
            cells = q.encode(v)
            assert q.distortion == pytest.approx(np.mean((v - q.levels[cells - 1]) ** 2))

    def test_quantile_seed_can_stall_where_optimal_seed_does_not(self):
        rng = np.random.default_rng(0)
        stalled = 0
        for _ in range(300):
            v = rng.standard_normal(int(rng.integers(10, 60)))
            best = two_level_optimum(v)
            assert lloyd_max_fit(v, 2).distortion <= best + 1e-12
            stalled += lloyd_max_fit(v, 2, init="quantile").distortion > best + 1e-9
        assert stalled > 0

    def test_many_levels_match_dynamic_programming_oracle(self):
        import itertools

        rng = np.random.default_rng(5)
        for _ in range(60):
            v = np.round(rng.standard_normal(int(rng.integers(4, 12))), 1)
            u = np.unique(v)
            k = int(rng.integers(2, min(4, u.size) + 1))
            best = np.inf
            for cuts in itertools.combinations(range(1, u.size), k - 1):
                edges = (0, *cuts, u.size)
                sse = 0.0
                for a, b in zip(edges, edges[1:]):
                    g = v[(v >= u[a]) & (v <= u[b - 1])]
                    sse += np.sum((g - g.mean()) ** 2)
                best = min(best, sse / v.size)
            assert lloyd_max_fit(v, k).distortion == pytest.approx(best, rel=1e-9, abs=1e-12)


class TestQuantize:
    q = Quantizer(np.array([2.0, 3.0]), np.array([2.5]))

    def test_cells(self):
        assert quantize(self.q, 2.4) == 1
        assert quantize(self.q, 2.6) == 2

    def test_tie_goes_to_lower_cell(self):
        assert quantize(self.q, 2.5) == 1

    def test_clamping(self):
        assert quantize(self.q, -1e9) == 1
        assert quantize(self.q, 1e9) == 2

    def test_non_finite(self):
        with pytest.raises(ValueError):
            quantize(self.q, np.nan)

    def test_encode_decode_idempotent_on_levels(self):
        q = lloyd_max_fit(np.random.default_rng(1).standard_normal(100), 6)
        idx = q.encode(q.levels)
        np.testing.assert_array_equal(idx, np.arange(1, 7))
        np.testing.assert_array_equal(q.decode(idx), q.levels)

    def test_invariants(self):
        with pytest.raises(ValueError):
            Quantizer(np.array([1.0, 1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            Quantizer(np.array([1.0, 2.0]), np.array([3.0]))
        with pytest.raises(ValueError):
            Quantizer(np.array([1.0, 2.0]), np.array([]))


class TestAggregate:
    def test_mean_of_duplicates(self):
        t = aggregate([((1, 1), 2.0), ((1, 1), 4.0), ((2, 1), 1.0)])
        d = t.as_dict()
        assert d[(1, 1)] == (2, pytest.approx(3.0))
        assert d[(2, 1)] == (1, pytest.approx(1.0))
        assert t.n_samples == 3
        assert t.shape == (2, 1)

    def test_distinct_samples(self):
        coords = np.array([[1, 2], [2, 1], [3, 3]])
        y = np.array([0.5, -1.0, 2.0])
        t = aggregate_arrays(coords, y, (3, 3))
        assert np.all(t.weights == 1)
        got = {tuple(c): v[0] for c, v in zip(t.coords, t.values)}
        assert got == {(1, 2): 0.5, (2, 1): -1.0, (3, 3): 2.0}

    def test_vector_responses_are_averaged_componentwise(self):
        t = aggregate([((1,), [1.0, 10.0]), ((1,), [3.0, 20.0])])
        np.testing.assert_allclose(t.values, [[2.0, 15.0]])
        assert t.n_outputs == 2

    def test_inconsistent_response_lengths(self):
        with pytest.raises((DataError, ValueError)):
            aggregate([((1,), [1.0, 2.0]), ((1,), [1.0])])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_equivalence_constant(self, seed):
        rng = np.random.default_rng(seed)
        shape = (3, 2, 4)
        m = int(rng.integers(1, 60))
        coords = np.column_stack([rng.integers(1, s + 1, m) for s in shape])
        y = rng.standard_normal(m)
        x = rng.standard_normal(shape)
        t = aggregate_arrays(coords, y, shape)
        per_sample = np.sum((y - x[tuple((coords - 1).T)]) ** 2)
        aggregated = np.sum(t.weights * (t.values[:, 0] - x[tuple((t.coords - 1).T)]) ** 2)
        assert per_sample == pytest.approx(aggregated + t.residual_ss, rel=1e-10, abs=1e-12)

    def test_weights_sum_to_samples(self):
        rng = np.random.default_rng(3)
        coords = rng.integers(1, 3, (50, 3))
        t = aggregate_arrays(coords, rng.standard_normal(50))
        assert t.weights.sum() == 50 == t.n_samples


class TestMarginals:
    def test_examples(self):
        np.testing.assert_array_equal(fit_marginals([(1,), (1,), (2,), (2,)], (2,))[0],
                                      [0.5, 0.5])
        np.testing.assert_array_equal(fit_marginals([(3,), (3,)], (4,))[0], [0, 0, 1, 0])
        np.testing.assert_array_equal(fit_marginals([(1,), (1,), (1,), (2,)], (2,))[0],
                                      [0.75, 0.25])

    def test_missing_entries_are_skipped(self):
        p = fit_marginals([(1, None), (2, 1), (0, 1)], (2, 3))
        np.testing.assert_array_equal(p[0], [0.5, 0.5])
        np.testing.assert_array_equal(p[1], [1.0, 0.0, 0.0])

    def test_smoothing(self):
        p = fit_marginals([(1,), (1,)], (3,), smoothing=1.0)
        np.testing.assert_allclose(p[0], [0.6, 0.2, 0.2])

    def test_validation(self):
        with pytest.raises(ValueError):
            MarginalSet((np.array([0.5, 0.6]),))
        with pytest.raises(ValueError):
            MarginalSet((np.array([1.5, -0.5]),))
        with pytest.raises(DataError):
            fit_marginals([], (2,))


class TestSplits:
    def test_split_sizes_and_disjointness(self):
        train, test = split(100, 0.8, seed=1)
        assert len(train) == 80 and len(test) == 20
        assert set(train).isdisjoint(test)
        assert set(train) | set(test) == set(range(100))

    def test_split_is_deterministic(self):
        a = split(list(range(30)), 0.8, seed=5)
        b = split(list(range(30)), 0.8, seed=5)
        assert a == b

    def test_kfold_partitions(self):
        folds = kfold(23, 5, seed=2)
        assert len(folds) == 5
        vals = np.concatenate([v for _, v in folds])
        assert sorted(vals) == list(range(23))
        for train, val in folds:
            assert set(train).isdisjoint(val)
            assert len(train) + len(val) == 23

    def test_errors(self):
        with pytest.raises(ValueError):
            split(10, 1.0)
        with pytest.raises(ValueError):
            kfold(10, 1)
        with pytest.raises(DataError):
            kfold(3, 5)


def table(**cols):
    names = tuple(cols)
    kinds = tuple(k for k, _ in cols.values())
    columns = tuple(np.asarray(v, dtype=object if k == "categorical" else float)
                    for k, v in cols.values())
    n = len(columns[0])
    return Dataset(names, kinds, columns, np.arange(n, dtype=float))


class TestEncoder:
    def test_kinds(self):
        rng = np.random.default_rng(0)
        data = table(
            c=("categorical", ["b", "a", "c", "a"] * 25),
            o=("ordinal", [1, 5, 3, 3] * 25),
            x=("continuous", rng.standard_normal(100)),
        )
        enc = Encoder.fit(data, alphabet=8)
        assert enc.schema.shape == (3, 3, 8)
        assert enc.schema.features[0].label_map == {"a": 1, "b": 2, "c": 3}
        np.testing.assert_array_equal(enc.schema.smooth_mask(), [False, True, True])
        coords = enc.encode(data)
        np.testing.assert_array_equal(coords[:4, 0], [2, 1, 3, 1])
        np.testing.assert_array_equal(coords[:4, 1], [1, 3, 2, 2])
        assert coords[:, 2].min() == 1 and coords[:, 2].max() == 8

    def test_continuous_with_few_values_keeps_them(self):
        data = table(x=("continuous", [0.1, 0.25, 0.4, 0.1] * 5))
        enc = Encoder.fit(data, alphabet=25)
        assert enc.schema.shape == (3,)
        np.testing.assert_array_equal(enc.quantizers["x"].levels, [0.1, 0.25, 0.4])

    def test_missing_and_unseen_encode_as_zero(self):
        train = table(c=("categorical", ["a", "b", "a"]), x=("continuous", [1.0, 2.0, 3.0]))
        test = table(c=("categorical", ["zzz", None, "b"]), x=("continuous", [np.nan, 2.0, 9.0]))
        coords = Encoder.fit(train).encode(test)
        np.testing.assert_array_equal(coords, [[0, 0], [0, 2], [2, 3]])

    def test_constant_column_rejected(self):
        with pytest.raises(DataError, match="x"):
            Encoder.fit(table(x=("continuous", [1.0, 1.0, 1.0])))

    def test_per_column_alphabet(self):
        rng = np.random.default_rng(1)
        data = table(a=("continuous", rng.standard_normal(200)),
                     b=("continuous", rng.standard_normal(200)))
        enc = Encoder.fit(data, {"a": 4, "b": 7})
        assert enc.schema.shape == (4, 7)

    def test_ordinal_alias(self):
        data = table(o=("ordinal-discrete", [1, 2, 1]))
        assert data.kinds == ("ordinal",)
