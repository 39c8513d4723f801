import numpy as np
import pytest

from asdbench.corpus import ClipMeta, DatasetIndex, format_clip_path
from asdbench.metrics import (
    MetricCell,
    ScoreRecord,
    ScoreValidationError,
    UndefinedMetricError,
    auc,
    brute_force_auc,
    decide,
    evaluate,
    harmonic_mean,
    official_score,
    pauc,
)


def random_cells(rng, count):
    return [
        MetricCell("m", 0, "source", rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0), 10, 10)
        for _ in range(count)
    ]


class TestDecide:
    def test_above_threshold_is_anomaly(self):
        assert decide(1.2, 1.0).label == "anomaly"

    def test_tie_is_normal(self):
        # strict inequality: a score equal to the threshold is not an alarm
        assert decide(1.0, 1.0).label == "normal"

    def test_below_threshold_is_normal(self):
        assert decide(-5.0, 0.0).label == "normal"

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            decide(float("nan"), 0.0)


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_all_tied_counts_zero(self):
        assert auc([1.0], [1.0]) == 0.0

    def test_documented_example(self):
        assert auc([0.4, 0.6], [0.5, 0.7]) == 0.75

    def test_empty_side_raises(self):
        with pytest.raises(UndefinedMetricError):
            auc([], [1.0])
        with pytest.raises(UndefinedMetricError):
            auc([1.0], [])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            auc([np.nan], [1.0])

    def test_complement_under_role_swap_without_ties(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            scores = rng.permutation(rng.uniform(0, 1, 20))
            normal, anomaly = scores[:9], scores[9:]
            assert auc(normal, anomaly) + auc(anomaly, normal) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_single_scores(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            normal = rng.uniform(0, 1, 12)
            anomaly = rng.uniform(0, 1, 8)
            base = auc(normal, anomaly)
            bumped = anomaly.copy()
            bumped[rng.integers(len(bumped))] += rng.uniform(0, 1)
            assert auc(normal, bumped) >= base
            raised_normal = normal.copy()
            raised_normal[rng.integers(len(normal))] += rng.uniform(0, 1)
            assert auc(raised_normal, anomaly) <= base

    def test_exact_tie_strictly_below_epsilon_separation(self):
        normal = [0.3, 0.5]
        anomaly_tied = [0.5, 0.9]
        anomaly_separated = [0.5 + 1e-9, 0.9]
        assert auc(normal, anomaly_tied) < auc(normal, anomaly_separated)


class TestPauc:
    def test_uses_only_top_normals(self):
        # ten normals, only the single top one (9) is kept at p=0.1
        assert pauc([9] + [1] * 9, [10, 5], 0.1) == 0.5

    def test_perfect(self):
        assert pauc(list(range(10)), [100, 200], 0.1) == 1.0

    def test_floor_zero_raises(self):
        with pytest.raises(UndefinedMetricError):
            pauc([1, 2, 3, 4, 5], [10], 0.1)

    def test_p_validation(self):
        with pytest.raises(ValueError):
            pauc([1] * 10, [2], 0.0)
        with pytest.raises(ValueError):
            pauc([1] * 10, [2], 1.5)

    def test_p_one_equals_auc(self):
        rng = np.random.default_rng(3)
        normal = rng.uniform(0, 1, 17)
        anomaly = rng.uniform(0, 1, 9)
        assert pauc(normal, anomaly, 1.0) == pytest.approx(auc(normal, anomaly), abs=1e-15)


class TestBruteForceEquivalence:
    def test_brute_force_examples(self):
        assert brute_force_auc([0.4, 0.6], [0.5, 0.7]) == 0.75
        assert brute_force_auc([1.0, 1.0], [1.0]) == 0.0
        assert brute_force_auc([9] + [1] * 9, [10, 5], p=0.1) == 0.5

    def test_matches_fast_path_on_random_instances_with_ties(self):
        rng = np.random.default_rng(1234)
        for _ in range(500):
            n_neg = int(rng.integers(1, 61))
            n_pos = int(rng.integers(1, 61))
            # coarse grid of values forces plenty of exact ties
            normal = rng.integers(0, 12, n_neg) / 4.0
            anomaly = rng.integers(0, 12, n_pos) / 4.0
            assert abs(auc(normal, anomaly) - brute_force_auc(normal, anomaly)) < 1e-12
            if n_neg >= 10:
                assert (
                    abs(pauc(normal, anomaly, 0.1) - brute_force_auc(normal, anomaly, p=0.1))
                    < 1e-12
                )

    def test_tie_order_does_not_change_pauc(self):
        # ties spanning the top-q cut: any selection yields the same value
        normal = [5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        anomaly = [5.0, 6.0]
        rng = np.random.default_rng(0)
        values = {pauc(rng.permutation(normal), anomaly, 0.2) for _ in range(20)}
        assert len(values) == 1


class TestOfficialScore:
    def test_equal_values_fixed_point(self):
        cells = [MetricCell("m", 0, "source", 0.7, 0.7, 5, 5)] * 3
        assert official_score(cells) == pytest.approx(0.7, abs=1e-12)

    def test_two_value_example(self):
        assert harmonic_mean([0.5, 1.0]) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_zero_pole(self):
        cells = [
            MetricCell("m", 0, "source", 0.9, 0.8, 5, 5),
            MetricCell("m", 0, "target", 0.0, 0.5, 5, 5),
        ]
        assert official_score(cells) == 0.0

    def test_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(77)
        cells = random_cells(rng, 9)
        base = official_score(cells)
        for _ in range(20):
            shuffled = list(rng.permutation(len(cells)))
            assert official_score([cells[i] for i in shuffled]) == base

    def test_bounded_by_min_and_arithmetic_mean(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            cells = random_cells(rng, int(rng.integers(1, 10)))
            values = [c.auc for c in cells] + [c.pauc for c in cells]
            omega = official_score(cells)
            assert min(values) - 1e-12 <= omega <= np.mean(values) + 1e-12


def tiny_test_index(tmp_path, n_normal=3, n_anomaly=3):
    entries = []
    for domain in ("source", "target"):
        for condition, count in (("normal", n_normal), ("anomaly", n_anomaly)):
            for i in range(count):
                meta = ClipMeta("fan", 0, domain, "test", condition, i)
                entries.append((format_clip_path(meta), meta))
    return DatasetIndex(tmp_path, entries)


class TestEvaluate:
    def test_oracle_scores_give_perfect_report(self, tmp_path):
        index = tiny_test_index(tmp_path, n_normal=10, n_anomaly=10)
        records = [
            ScoreRecord(meta, 1.0 if meta.condition == "anomaly" else 0.0)
            for _, meta in index.entries
        ]
        report = evaluate(index, records)
        assert all(c.auc == 1.0 and c.pauc == 1.0 for c in report.cells)
        assert report.official == 1.0

    def test_random_scores_near_half(self, tmp_path):
        index = tiny_test_index(tmp_path, n_normal=100, n_anomaly=100)
        rng = np.random.default_rng(9)
        records = [ScoreRecord(meta, float(rng.normal())) for _, meta in index.entries]
        report = evaluate(index, records)
        for cell in report.cells:
            assert 0.4 <= cell.auc <= 0.6

    def test_missing_score_is_named(self, tmp_path):
        index = tiny_test_index(tmp_path)
        records = [ScoreRecord(meta, 0.5) for _, meta in index.entries][:-1]
        dropped = index.entries[-1][0]
        with pytest.raises(ScoreValidationError) as err:
            evaluate(index, records)
        assert dropped in err.value.offenders

    def test_duplicate_score_is_named(self, tmp_path):
        index = tiny_test_index(tmp_path)
        records = [ScoreRecord(meta, 0.5) for _, meta in index.entries]
        records.append(records[0])
        with pytest.raises(ScoreValidationError) as err:
            evaluate(index, records)
        assert format_clip_path(records[0].meta) in err.value.offenders

    def test_unlabeled_test_clips_rejected(self, tmp_path):
        meta = ClipMeta("fan", 0, "source", "test", "unknown", 0)
        index = DatasetIndex(tmp_path, [(format_clip_path(meta), meta)])
        with pytest.raises(ScoreValidationError):
            evaluate(index, [ScoreRecord(meta, 0.5)])

    def test_report_csv_layout(self, tmp_path):
        index = tiny_test_index(tmp_path, n_normal=10, n_anomaly=10)
        records = [
            ScoreRecord(meta, 1.0 if meta.condition == "anomaly" else 0.0)
            for _, meta in index.entries
        ]
        report = evaluate(index, records)
        lines = report.to_csv().splitlines()
        assert lines[0] == "machine,section,domain,auc,pauc,n_neg,n_pos"
        assert lines[-1].startswith("official_score,")
        markdown = report.to_markdown()
        assert "| fan | 00 |" in markdown
        assert "official score: 1.0000" in markdown
