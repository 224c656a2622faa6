import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import calinski_harabasz_score, davies_bouldin_score

from rcl.metrics import (
    DegenerateClusteringError,
    MetricsReport,
    arithmetic_mean_acc,
    calinski_harabasz,
    davies_bouldin,
    evaluate_embeddings,
    harmonic_mean_acc,
    margin_stats,
    per_class_accuracy,
)

FOUR_POINTS = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [5.0, 0.0]])
FOUR_LABELS = np.array([0, 0, 1, 1])


class TestAccuracy:
    def test_perfect(self):
        np.testing.assert_array_equal(per_class_accuracy([0, 1, 2], [0, 1, 2], 3), [1, 1, 1])

    def test_direct_count(self):
        np.testing.assert_array_equal(per_class_accuracy([0, 1, 1], [0, 0, 1], 2), [0.5, 1.0])

    def test_constant_predictor(self):
        np.testing.assert_array_equal(per_class_accuracy([0] * 4, [0, 0, 1, 1], 2), [1.0, 0.0])

    def test_absent_class(self):
        with pytest.raises(ValueError, match="class 2"):
            per_class_accuracy([0, 1], [0, 1], 3)

    def test_means(self):
        assert arithmetic_mean_acc([1, 1, 1]) == 1 and harmonic_mean_acc([1, 1, 1]) == 1
        assert arithmetic_mean_acc([0.5, 1.0]) == 0.75
        assert harmonic_mean_acc([0.5, 1.0]) == pytest.approx(2 / 3, rel=1e-15)
        assert arithmetic_mean_acc([0.9, 0.0]) == pytest.approx(0.45)
        assert harmonic_mean_acc([0.9, 0.0]) == 0.0

    def test_am_hm_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.uniform(0, 1, size=int(rng.integers(1, 20)))
            assert harmonic_mean_acc(a) <= arithmetic_mean_acc(a) + 1e-15

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_am_hm_property(self, a):
        assert harmonic_mean_acc(a) <= arithmetic_mean_acc(a) + 1e-12


class TestCalinskiHarabasz:
    def test_hand_value(self):
        # centroids 0.5 and 4.5, global mean 2.5: B = 4 * 4 = 16, W = 4 * 0.25 = 1
        assert calinski_harabasz(FOUR_POINTS, FOUR_LABELS) == pytest.approx(32.0, rel=1e-15)

    def test_scale_and_permutation(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, size=30)
        ref = calinski_harabasz(x, y)
        assert calinski_harabasz(7.5 * x, y) == pytest.approx(ref, rel=1e-12)
        perm = rng.permutation(30)
        assert calinski_harabasz(x[perm], y[perm]) == pytest.approx(ref, rel=1e-12)

    def test_sklearn_cross_check(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x, y = rng.normal(size=(40, 4)), rng.integers(0, 4, size=40)
            y[:4] = np.arange(4)
            assert calinski_harabasz(x, y) == pytest.approx(
                calinski_harabasz_score(x, y), rel=1e-10)

    def test_degenerate(self):
        with pytest.raises(DegenerateClusteringError):
            calinski_harabasz(np.array([[0.0], [0.0], [1.0], [1.0]]), [0, 0, 1, 1])
        with pytest.raises(ValueError):
            calinski_harabasz(np.array([[0.0], [1.0]]), [0, 1])


class TestDaviesBouldin:
    def test_hand_value(self):
        # S = 0.5 per class, M = 4: (0.5 + 0.5) / 4
        assert davies_bouldin(FOUR_POINTS, FOUR_LABELS) == pytest.approx(0.25, rel=1e-15)

    def test_singletons(self):
        assert davies_bouldin(np.array([[0.0, 0.0], [3.0, 1.0]]), [0, 1]) == 0.0

    def test_translation(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, size=30)
        assert davies_bouldin(x + [10.0, -4.0, 2.0], y) == pytest.approx(
            davies_bouldin(x, y), rel=1e-10)

    def test_sklearn_cross_check(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            x, y = rng.normal(size=(40, 4)), rng.integers(0, 4, size=40)
            y[:4] = np.arange(4)
            assert davies_bouldin(x, y) == pytest.approx(davies_bouldin_score(x, y), rel=1e-10)

    def test_coincident_centroids(self):
        x = np.array([[-1.0], [1.0], [-2.0], [2.0]])
        with pytest.raises(DegenerateClusteringError):
            davies_bouldin(x, [0, 0, 1, 1])


class TestMarginStats:
    def test_all_identical(self):
        z = np.tile([1.0, 0.0], (4, 1))
        s = margin_stats(z, [0, 0, 1, 1])
        np.testing.assert_allclose(s.intra, [1, 1])
        assert s.inter[0, 1] == 1 and s.inter[1, 0] == 1
        np.testing.assert_allclose(s.margin, [0, 0])

    def test_orthogonal(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        s = margin_stats(z, [0, 0, 1, 1])
        np.testing.assert_allclose(s.intra, [1, 1])
        np.testing.assert_allclose([s.inter[0, 1], s.inter[1, 0]], [0, 0])
        np.testing.assert_allclose(s.margin, [1, 1])

    def test_brute_force(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(15, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = np.array([0, 1, 2] * 5)
        s = margin_stats(z, y)
        for a in range(3):
            pairs = [z[i] @ z[j] for i in range(15) for j in range(15)
                     if i != j and y[i] == a and y[j] == a]
            assert s.intra[a] == pytest.approx(np.mean(pairs), rel=1e-12)
            cross = {}
            for b in range(3):
                if b != a:
                    cross[b] = np.mean([z[i] @ z[j] for i in range(15) for j in range(15)
                                        if y[i] == a and y[j] == b])
                    assert s.inter[a, b] == pytest.approx(cross[b], rel=1e-12)
            assert s.margin[a] == pytest.approx(s.intra[a] - max(cross.values()), rel=1e-12)

    def test_singleton_class_is_nan(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        s = margin_stats(z, [0, 0, 1])
        assert math.isnan(s.intra[1]) and math.isnan(s.margin[1])
        assert s.margin[0] == 1

    def test_requires_unit_rows(self):
        with pytest.raises(ValueError):
            margin_stats(np.array([[2.0, 0.0]]), [0])


class TestReport:
    def make(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(20, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = np.arange(20) % 4
        preds = np.where(rng.uniform(size=20) < 0.7, y, (y + 1) % 4)
        return evaluate_embeddings(preds, y, z, 4), z, y

    def test_round_trip(self):
        report, _, _ = self.make()
        report.extra["seconds"] = 1.25
        text = report.to_text()
        back = MetricsReport.from_text(text)
        assert back.to_text() == text
        np.testing.assert_array_equal(back.per_class_accuracy, report.per_class_accuracy)

    def test_contents(self):
        report, z, y = self.make()
        assert report.chi == pytest.approx(calinski_harabasz_score(z, y), rel=1e-10)
        assert report.harmonic_mean <= report.arithmetic_mean
        assert report.harmonic_has_zero_class == bool(np.any(report.per_class_accuracy == 0))

    def test_degenerate_index_is_nan(self):
        z = np.tile([1.0, 0.0], (4, 1))
        report = evaluate_embeddings([0, 0, 1, 1], [0, 0, 1, 1], z, 2)
        assert math.isnan(report.chi) and math.isnan(report.dbi)
        assert "chi = nan" in report.to_text()

    def test_malformed_text(self):
        with pytest.raises(ValueError, match="line 1"):
            MetricsReport.from_text("garbage\n")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), s=st.floats(0.01, 100))
def test_chi_scale_invariance_property(seed, s):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(12, 2)), np.arange(12) % 3
    assert calinski_harabasz(s * x, y) == pytest.approx(calinski_harabasz(x, y), rel=1e-9)
