import math
from dataclasses import dataclass

import numpy as np
import pytest

from oracle_pbo import brute_force_pbo
from pbogate.errors import ConfigError, DataError
from pbogate.pbo import (
    ACCEPT,
    REJECT,
    PboGate,
    TrialMatrix,
    build_trial_matrix,
    estimate_pbo,
    evaluate_combination,
    gate,
    matrix_from_csv,
    matrix_to_csv,
    partition_rows,
)
from pbogate.splits import make_combinatorial

from conftest import make_matrix

# Frozen by an independent search: every one of the C(4,2) = 6
# combinations ranks the in-sample winner dead last out of sample.
INVERTED_RANK_MATRIX = [
    [-7.0, -3.0, 4.0],
    [-6.0, 7.0, 5.0],
    [9.0, -2.0, 3.0],
    [3.0, -7.0, 6.0],
    [9.0, 8.0, -8.0],
    [-9.0, -1.0, 6.0],
    [2.0, 5.0, -7.0],
    [-5.0, 8.0, 3.0],
]


def dominant_column_matrix(t_rows=8, h=3):
    """Column 1 wins every block; column 0 loses every block."""
    rows = []
    for r in range(t_rows):
        updown = 1.0 if r % 2 == 0 else 2.0
        rows.append([-updown, updown, 0.5 if r % 2 == 0 else -0.5])
    return rows


class TestTrialMatrix:
    def test_needs_two_trials(self):
        with pytest.raises(ConfigError, match="H >= 2"):
            make_matrix([[1.0], [2.0]])

    def test_non_finite_named(self):
        with pytest.raises(DataError, match="timestamp 1, trial 001"):
            make_matrix([[1.0, 2.0], [3.0, float("nan")]])


class TestBuildTrialMatrix:
    @dataclass
    class FakeTrial:
        trial_id: str
        series: dict

    def test_averages_across_overlapping_splits(self):
        # N=5, k=2: timestamp t in group g is validated by the 4 splits
        # whose validation pair contains g; the cell is their mean.
        plan = make_combinatorial(5, 2)
        group_ts = {g: [10 * g, 10 * g + 5] for g in range(5)}
        trials = []
        for trial_id, scale in (("a", 1.0), ("b", -1.0)):
            series = {}
            for j, split in enumerate(plan.splits):
                ts = []
                for g in split.validation_groups:
                    ts.extend(group_ts[g])
                ts = sorted(ts)
                series[j] = (np.array(ts), np.full(len(ts), scale * j, dtype=float))
            trials.append(self.FakeTrial(trial_id, series))
        matrix = build_trial_matrix(trials, plan)
        assert matrix.trial_ids == ("a", "b")
        assert matrix.n_rows == 10  # 5 groups x 2 timestamps
        expected = {}
        for g in range(5):
            js = [j for j, s in enumerate(plan.splits) if g in s.validation_groups]
            assert len(js) == 4  # C(4, 1)
            expected[g] = sum(js) / 4.0
        for g in range(5):
            row = np.flatnonzero(matrix.row_timestamps == 10 * g)[0]
            assert matrix.values[row, 0] == pytest.approx(expected[g])
            assert matrix.values[row, 1] == pytest.approx(-expected[g])

    def test_identical_series_gives_identical_column(self):
        plan = make_combinatorial(3, 1)
        rng = np.random.default_rng(0)
        per_split = {
            j: (np.arange(4) + 10 * j, rng.normal(size=4)) for j in range(3)
        }
        trials = [self.FakeTrial(i, dict(per_split)) for i in ("a", "b")]
        matrix = build_trial_matrix(trials, plan)
        assert np.array_equal(matrix.values[:, 0], matrix.values[:, 1])
        joined = np.concatenate([per_split[j][1] for j in range(3)])
        assert np.array_equal(matrix.values[:, 0], joined)

    def test_missing_split_named(self):
        plan = make_combinatorial(3, 1)
        series = {0: (np.array([0]), np.array([1.0])), 1: (np.array([10]), np.array([1.0]))}
        with pytest.raises(DataError, match="trial a missing split 2"):
            build_trial_matrix([self.FakeTrial("a", series)], plan)

    def test_timestamp_mismatch_rejected(self):
        plan = make_combinatorial(2, 1)
        a = self.FakeTrial(
            "a",
            {
                0: (np.array([0, 1]), np.zeros(2)),
                1: (np.array([2, 3]), np.zeros(2)),
            },
        )
        b = self.FakeTrial(
            "b",
            {
                0: (np.array([0, 9]), np.zeros(2)),
                1: (np.array([2, 3]), np.zeros(2)),
            },
        )
        with pytest.raises(DataError, match="trial b split 0: timestamps differ"):
            build_trial_matrix([a, b], plan)

    def test_rows_are_chronological(self):
        plan = make_combinatorial(2, 1)
        trial = self.FakeTrial(
            "a",
            {
                0: (np.array([50, 60]), np.array([1.0, 2.0])),
                1: (np.array([10, 20]), np.array([3.0, 4.0])),
            },
        )
        matrix = build_trial_matrix([trial, self.FakeTrial("b", trial.series)], plan)
        assert matrix.row_timestamps.tolist() == [10, 20, 50, 60]
        assert matrix.values[:, 0].tolist() == [3.0, 4.0, 1.0, 2.0]


class TestPartitionRows:
    def test_equal_blocks_tail_dropped(self):
        matrix = make_matrix(np.arange(58.0).reshape(29, 2).tolist())
        blocks = partition_rows(matrix, s=14)
        assert len(blocks) == 14
        assert all(b.shape == (2, 2) for b in blocks)
        # 29 rows, 14 blocks of 2: the last row never appears
        assert blocks[-1][-1, 0] == 54.0

    def test_odd_s_rejected(self):
        matrix = make_matrix(np.zeros((10, 2)).tolist())
        with pytest.raises(ConfigError, match="even"):
            partition_rows(matrix, s=3)

    def test_s_larger_than_rows_rejected(self):
        matrix = make_matrix(np.zeros((4, 2)).tolist())
        with pytest.raises(ConfigError, match="exceeds"):
            partition_rows(matrix, s=6)


class TestEvaluateCombination:
    def test_median_rank_gives_zero_logit(self):
        # IS: all 9 trials tie, so the highest index wins; OOS: that
        # trial lands exactly in the middle -> omega 0.5, logit 0.
        b_values = [1, 2, 3, 4, 6, 7, 8, 9, 5]  # trial 8 is the OOS median
        rows_is = [[1.0] * 9, [2.0] * 9]
        rows_oos = [
            [float(b) for b in b_values],
            [float(b + 1) for b in b_values],
        ]
        matrix = make_matrix(rows_is + rows_oos)
        sample = evaluate_combination(partition_rows(matrix, 2), (0,))
        assert sample.epsilon == 8
        assert sample.omega == pytest.approx(0.5)
        assert sample.lam == 0.0

    def test_dominant_column_reaches_max_logit(self):
        matrix = make_matrix(dominant_column_matrix())
        blocks = partition_rows(matrix, 4)
        for chosen in ((0, 1), (0, 2), (1, 3)):
            sample = evaluate_combination(blocks, chosen)
            assert sample.epsilon == 1
            assert sample.omega == pytest.approx(3.0 / 4.0)
            assert sample.lam == math.log(3.0)  # ln H

    def test_two_trials_inverted(self):
        rows = [
            [1.0, 1.0],
            [-1.0, 2.0],  # IS: trial 1 wins
            [2.0, -1.0],
            [3.0, -2.0],  # OOS: trial 1 is last
        ]
        sample = evaluate_combination(partition_rows(make_matrix(rows), 2), (0,))
        assert sample.epsilon == 1
        assert sample.omega == pytest.approx(1.0 / 3.0)
        assert sample.lam == pytest.approx(math.log(0.5))

    def test_complementary_sides_swap(self):
        rng = np.random.default_rng(1)
        matrix = make_matrix(rng.normal(size=(8, 4)).tolist())
        blocks = partition_rows(matrix, 2)
        a = evaluate_combination(blocks, (0,))
        b = evaluate_combination(blocks, (1,))
        assert np.array_equal(a.is_perf, b.oos_perf)
        assert np.array_equal(a.oos_perf, b.is_perf)

    def test_zero_variance_surrogates(self):
        rows = [
            # constant gain, huge-Sharpe noisy, constant loss, flat zero
            [0.01, 10.0, -0.01, 0.0],
            [0.01, 10.000001, -0.01, 0.0],
            [0.01, 10.0, -0.01, 0.0],
            [0.01, 10.000001, -0.01, 0.0],
        ]
        sample = evaluate_combination(partition_rows(make_matrix(rows), 2), (0,))
        # constant growth outranks any finite Sharpe, constant decline sinks
        assert sample.epsilon == 0
        assert sample.is_perf[0] == math.inf
        assert sample.is_perf[2] == -math.inf
        assert sample.is_perf[3] == 0.0
        assert sample.omega == pytest.approx(4.0 / 5.0)

    def test_tie_breaks_toward_lower_index(self):
        rows = [[1.0, 1.0], [2.0, 2.0], [1.0, 1.0], [2.0, 2.0]]
        sample = evaluate_combination(partition_rows(make_matrix(rows), 2), (0,))
        # identical columns: trial 1 gets the higher IS rank, and OOS
        # rank 2 of 2 -> omega 2/3
        assert sample.epsilon == 1
        assert sample.omega == pytest.approx(2.0 / 3.0)

    def test_input_validation(self):
        blocks = partition_rows(make_matrix(np.zeros((4, 2)).tolist()), 2)
        with pytest.raises(ConfigError, match="metric"):
            evaluate_combination(blocks, (0,), metric="sortino")
        with pytest.raises(ConfigError, match="invalid IS block"):
            evaluate_combination(blocks, (0, 0))
        with pytest.raises(ConfigError, match="outside"):
            evaluate_combination(blocks, (5,))


class TestEstimatePbo:
    def test_dominant_strategy_p_zero(self):
        result = estimate_pbo(make_matrix(dominant_column_matrix()), s=4)
        assert result.p == 0.0
        assert result.verdict == ACCEPT
        assert result.n_evaluated == 6
        assert np.all(result.lambdas == math.log(3.0))

    def test_inverted_ranks_p_one(self):
        result = estimate_pbo(make_matrix(INVERTED_RANK_MATRIX), s=4)
        assert result.p == 1.0
        assert result.verdict == REJECT
        assert result.lambdas.size == 6
        assert np.all(result.lambdas < 0.0)

    def test_half_count_at_zero_logit(self):
        rows = [
            [0.0, 1.0, 5.0],
            [-1.0, 2.0, 6.0],  # IS of combination 1: trial 2 wins
            [9.0, -5.0, 1.0],
            [10.0, -4.0, 2.0],  # its OOS rank is 2 of 3 -> logit 0
        ]
        result = estimate_pbo(make_matrix(rows), s=2)
        lams = sorted(result.lambdas.tolist())
        assert lams[1] == 0.0
        assert lams[0] < 0.0
        assert result.p == pytest.approx(0.75)  # (1 + 0.5) / 2

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for s in (2, 4, 6):
            for h in (2, 3, 5):
                for rep in range(4):
                    t_rows = s * int(rng.integers(2, 5))
                    if rep % 2 == 0:
                        values = rng.normal(0, 1, size=(t_rows, h))
                    else:
                        # small integers provoke ties and zero variance
                        values = rng.integers(-2, 3, size=(t_rows, h)).astype(float)
                    rows = values.tolist()
                    for metric in ("sharpe", "cumret"):
                        got = estimate_pbo(make_matrix(rows), s=s, metric=metric)
                        p, verdict, lams = brute_force_pbo(rows, s, metric=metric)
                        assert got.verdict == verdict
                        assert got.p == pytest.approx(p, abs=1e-12)
                        assert np.allclose(
                            np.sort(got.lambdas), np.sort(lams), atol=1e-9
                        )

    def test_sampled_full_budget_equals_exhaustive(self):
        rng = np.random.default_rng(7)
        matrix = make_matrix(rng.normal(size=(12, 4)).tolist())
        full = estimate_pbo(matrix, s=6)
        sampled = estimate_pbo(
            matrix, s=6, mode="sampled", n_samples=math.comb(6, 3), seed=123
        )
        assert sampled.p == full.p
        assert np.array_equal(sampled.lambdas, full.lambdas)
        assert sampled.mode == "sampled"

    def test_sampled_deterministic_and_subset(self):
        rng = np.random.default_rng(8)
        matrix = make_matrix(rng.normal(size=(16, 5)).tolist())
        a = estimate_pbo(matrix, s=8, mode="sampled", n_samples=20, seed=5)
        b = estimate_pbo(matrix, s=8, mode="sampled", n_samples=20, seed=5)
        assert np.array_equal(a.lambdas, b.lambdas)
        assert a.n_evaluated == 20
        assert a.combination_count == math.comb(8, 4)
        full = set(np.round(estimate_pbo(matrix, s=8).lambdas, 12))
        assert set(np.round(a.lambdas, 12)) <= full

    def test_exhaustive_cap(self):
        matrix = make_matrix(np.random.default_rng(0).normal(size=(40, 3)).tolist())
        with pytest.raises(ConfigError, match="exceeds the exhaustive cap"):
            estimate_pbo(matrix, s=40, max_exhaustive=1000)

    def test_scale_invariance_of_ranks(self):
        # scaling every entry by a positive constant is a monotone
        # transform of both metrics: p must not move
        rng = np.random.default_rng(9)
        rows = rng.normal(0, 1, size=(24, 6))
        for metric in ("sharpe", "cumret"):
            base = estimate_pbo(make_matrix(rows.tolist()), s=4, metric=metric)
            scaled = estimate_pbo(make_matrix((4.0 * rows).tolist()), s=4, metric=metric)
            assert scaled.p == base.p
            assert np.array_equal(scaled.lambdas, base.lambdas)

    def test_shift_invariance_for_cumret(self):
        # adding a constant to every entry shifts all column sums
        # equally: cumret ranks are unchanged
        rng = np.random.default_rng(10)
        rows = rng.normal(0, 1, size=(24, 6))
        base = estimate_pbo(make_matrix(rows.tolist()), s=4, metric="cumret")
        shifted = estimate_pbo(make_matrix((rows + 0.37).tolist()), s=4, metric="cumret")
        assert shifted.p == base.p

    def test_column_permutation_invariance(self):
        rng = np.random.default_rng(11)
        rows = rng.normal(size=(16, 5))
        perm = [3, 0, 4, 2, 1]
        base = estimate_pbo(make_matrix(rows.tolist()), s=4)
        permuted = estimate_pbo(make_matrix(rows[:, perm].tolist()), s=4)
        assert permuted.p == base.p
        assert np.array_equal(np.sort(permuted.lambdas), np.sort(base.lambdas))
        # the winner follows the permutation on any single combination
        blocks_a = partition_rows(make_matrix(rows.tolist()), 4)
        blocks_b = partition_rows(make_matrix(rows[:, perm].tolist()), 4)
        ea = evaluate_combination(blocks_a, (0, 1)).epsilon
        eb = evaluate_combination(blocks_b, (0, 1)).epsilon
        assert perm[eb] == ea

    def test_logit_bounds_and_histogram(self):
        rng = np.random.default_rng(12)
        for h in (2, 5, 9):
            matrix = make_matrix(rng.normal(size=(24, h)).tolist())
            result = estimate_pbo(matrix, s=6)
            bound = math.log(h)
            assert np.all(np.isfinite(result.lambdas))
            assert np.all(result.lambdas >= -bound - 1e-12)
            assert np.all(result.lambdas <= bound + 1e-12)
            assert result.histogram_edges[0] == pytest.approx(-bound)
            assert result.histogram_edges[-1] == pytest.approx(bound)
            assert result.histogram_counts.sum() == result.n_evaluated

    def test_parameter_validation(self):
        matrix = make_matrix(np.zeros((8, 2)).tolist())
        with pytest.raises(ConfigError, match="metric"):
            estimate_pbo(matrix, s=2, metric="calmar")
        with pytest.raises(ConfigError, match="alpha"):
            estimate_pbo(matrix, s=2, alpha=0.0)
        with pytest.raises(ConfigError, match="mode"):
            estimate_pbo(matrix, s=2, mode="bootstrap")
        with pytest.raises(ConfigError, match="n_samples"):
            estimate_pbo(matrix, s=2, mode="sampled", n_samples=0)

    def test_as_dict_is_json_ready(self):
        import json

        result = estimate_pbo(make_matrix(INVERTED_RANK_MATRIX), s=4)
        payload = result.as_dict()
        assert json.dumps(payload)
        assert payload["p"] == 1.0
        assert payload["verdict"] == REJECT
        assert payload["combination_count"] == 6


class TestGate:
    def test_reject_above_alpha(self):
        assert gate(0.175, alpha=0.10) == REJECT

    def test_accept_below_alpha(self):
        assert gate(0.079, alpha=0.10) == ACCEPT

    def test_boundary_rejects(self):
        assert gate(0.10, alpha=0.10) == REJECT

    def test_validation(self):
        with pytest.raises(ConfigError, match="p must be"):
            gate(1.5)
        with pytest.raises(ConfigError, match="alpha"):
            gate(0.5, alpha=1.0)


class TestMatrixCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        matrix = make_matrix(rng.normal(size=(10, 3)).tolist())
        path = tmp_path / "matrix.csv"
        matrix_to_csv(matrix, path)
        back = matrix_from_csv(path)
        assert back.trial_ids == matrix.trial_ids
        assert np.array_equal(back.row_timestamps, matrix.row_timestamps)
        assert np.array_equal(back.values, matrix.values)  # bitwise via repr

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,a,b\n0,1,2\n")
        with pytest.raises(DataError, match="expected header"):
            matrix_from_csv(path)

    def test_ragged_rows(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("timestamp,a,b\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(DataError, match="malformed row"):
            matrix_from_csv(path)


class TestPboGateEstimator:
    def test_fit_exposes_result(self):
        est = PboGate(s=4)
        est.fit(make_matrix(INVERTED_RANK_MATRIX))
        assert est.p_ == 1.0
        assert est.verdict_ == REJECT
        assert est.lambdas_.size == 6
        assert est.result_.S == 4

    def test_predict_maps_to_verdict(self):
        assert PboGate(s=4).predict(make_matrix(dominant_column_matrix())) == ACCEPT

    def test_accepts_plain_arrays(self):
        vals = np.asarray(INVERTED_RANK_MATRIX)
        est = PboGate(s=4).fit(vals)
        assert est.p_ == 1.0
        ref = PboGate(s=4).fit(make_matrix(vals))
        assert est.result_.as_dict() == ref.result_.as_dict()

    def test_rejects_non_2d_arrays(self):
        with pytest.raises(ConfigError, match="2-dimensional"):
            PboGate(s=4).fit(np.zeros(8))

    def test_get_params(self):
        est = PboGate(s=8, alpha=0.2)
        params = est.get_params()
        assert params["s"] == 8
        assert PboGate(**params).get_params() == params
