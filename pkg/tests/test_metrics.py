"""Cluster metrics against O(n^2) brute-force references, plus sentinels."""

import numpy as np
import pytest

from mixedae.errors import DataError
from mixedae.metrics import (
    MetricsReport,
    average_silhouette_width,
    calinski_harabasz,
    chance_accuracy,
    classification_scores,
    davies_bouldin_reciprocal,
    fold_ci,
    silhouette_values,
    subsample_indices,
)


# -- brute-force references: plain loops, no vectorization tricks ------------


def brute_silhouette(x, labels):
    n = len(x)
    cats = sorted(set(labels.tolist()))
    s = np.zeros(n)
    for i in range(n):
        own = labels[i]
        own_members = [j for j in range(n) if labels[j] == own and j != i]
        if not own_members:
            s[i] = 0.0
            continue
        a = np.mean([np.sqrt(((x[i] - x[j]) ** 2).sum()) for j in own_members])
        b = np.inf
        for c in cats:
            if c == own:
                continue
            members = [j for j in range(n) if labels[j] == c]
            b = min(b, np.mean([np.sqrt(((x[i] - x[j]) ** 2).sum()) for j in members]))
        top = max(a, b)
        s[i] = 0.0 if top == 0 else (b - a) / top
    return s


def brute_ch(x, labels):
    cats = sorted(set(labels.tolist()))
    n, k = len(x), len(cats)
    overall = x.mean(axis=0)
    b = w = 0.0
    for c in cats:
        pts = x[labels == c]
        cen = pts.mean(axis=0)
        b += len(pts) * ((cen - overall) ** 2).sum()
        for p in pts:
            w += ((p - cen) ** 2).sum()
    if w == 0:
        return np.inf
    return (b / (k - 1)) / (w / (n - k))


def brute_db_reciprocal(x, labels):
    cats = sorted(set(labels.tolist()))
    k = len(cats)
    cens = [x[labels == c].mean(axis=0) for c in cats]
    scat = [
        np.mean([np.sqrt(((p - cens[i]) ** 2).sum()) for p in x[labels == cats[i]]])
        for i in range(k)
    ]
    worst = []
    for i in range(k):
        best = -np.inf
        for j in range(k):
            if i == j:
                continue
            d = np.sqrt(((cens[i] - cens[j]) ** 2).sum())
            r = np.inf if d == 0 else (scat[i] + scat[j]) / d
            best = max(best, r)
        worst.append(best)
    db = float(np.mean(worst))
    if db == 0:
        return np.inf
    if np.isinf(db):
        return 0.0
    return 1.0 / db


def random_instance(rng):
    n = int(rng.integers(10, 120))
    d = int(rng.integers(2, 5))
    k = int(rng.integers(2, 6))
    x = rng.normal(size=(n, d)) + 3.0 * rng.normal(size=(k, d))[rng.integers(0, k, n)]
    labels = rng.integers(0, k, n)
    while len(np.unique(labels)) < 2:
        labels = rng.integers(0, k, n)
    return x, labels


class TestAgainstBruteForce:
    def test_silhouette_matches(self):
        rng = np.random.default_rng(0)
        for _ in range(12):
            x, labels = random_instance(rng)
            np.testing.assert_allclose(
                silhouette_values(x, labels, chunk=17), brute_silhouette(x, labels), atol=1e-10
            )

    def test_ch_matches(self):
        rng = np.random.default_rng(1)
        for _ in range(12):
            x, labels = random_instance(rng)
            np.testing.assert_allclose(
                calinski_harabasz(x, labels), brute_ch(x, labels), rtol=1e-10
            )

    def test_db_matches(self):
        rng = np.random.default_rng(2)
        for _ in range(12):
            x, labels = random_instance(rng)
            np.testing.assert_allclose(
                davies_bouldin_reciprocal(x, labels), brute_db_reciprocal(x, labels), rtol=1e-10
            )


class TestFixturesAndSentinels:
    def four_point_fixture(self):
        x = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        return x, labels

    def test_ch_fixture_value(self):
        x, labels = self.four_point_fixture()
        np.testing.assert_allclose(calinski_harabasz(x, labels), 200.0)

    def test_db_fixture_value(self):
        x, labels = self.four_point_fixture()
        np.testing.assert_allclose(davies_bouldin_reciprocal(x, labels), 10.0)

    def test_zero_within_spread_sentinels(self):
        x = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
        labels = np.array([0, 0, 1, 1])
        assert calinski_harabasz(x, labels) == np.inf
        assert davies_bouldin_reciprocal(x, labels) == np.inf
        np.testing.assert_allclose(average_silhouette_width(x, labels), 1.0)

    def test_coincident_centroid_sentinels(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
        labels = np.array([0, 0, 1, 1])  # both centroids at (1, 0)
        assert davies_bouldin_reciprocal(x, labels) == 0.0

    def test_all_points_coincident(self):
        x = np.zeros((4, 2))
        labels = np.array([0, 0, 1, 1])
        np.testing.assert_allclose(average_silhouette_width(x, labels), 0.0)
        assert davies_bouldin_reciprocal(x, labels) == 0.0

    def test_singleton_cluster_scores_zero(self):
        x = np.array([[0.0, 0.0], [0.0, 1.0], [9.0, 9.0]])
        labels = np.array([0, 0, 1])
        s = silhouette_values(x, labels)
        assert s[2] == 0.0
        assert s[0] > 0.9

    def test_single_label_rejected(self):
        x = np.zeros((3, 2))
        labels = np.array([0, 0, 0])
        for fn in (average_silhouette_width, calinski_harabasz, davies_bouldin_reciprocal):
            with pytest.raises(DataError):
                fn(x, labels)

    def test_string_labels_accepted(self):
        x, labels = self.four_point_fixture()
        named = np.array(["left", "left", "right", "right"], dtype=object)
        np.testing.assert_allclose(calinski_harabasz(x, named), 200.0)


class TestSubsample:
    def test_identity_when_under_cap(self):
        np.testing.assert_array_equal(subsample_indices(5, 10, seed=0), np.arange(5))

    def test_capped_sorted_deterministic(self):
        a = subsample_indices(1000, 64, seed=4)
        b = subsample_indices(1000, 64, seed=4)
        c = subsample_indices(1000, 64, seed=5)
        assert len(a) == 64 and len(np.unique(a)) == 64
        np.testing.assert_array_equal(a, np.sort(a))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestClassificationScores:
    def test_hand_values(self):
        y = np.array([0, 0, 0, 1])
        p = np.array([0, 0, 1, 1])
        got = classification_scores(y, p)
        np.testing.assert_allclose(got["accuracy"], 0.75)
        np.testing.assert_allclose(got["balanced_accuracy"], (2 / 3 + 1.0) / 2)

    def test_chance_accuracy_expectation(self):
        y = np.array([0] * 75 + [1] * 25)
        got = chance_accuracy(y, n_repeats=4000, seed=0)
        # expectation 0.75^2 + 0.25^2 = 0.625
        assert abs(got - 0.625) < 0.01


class TestReport:
    def test_ci_formula(self):
        mean, lo, hi = fold_ci(np.array([1.0, 2.0, 3.0]))
        assert mean == 2.0
        half = 1.96 * np.std([1.0, 2.0, 3.0], ddof=1) / np.sqrt(3)
        np.testing.assert_allclose([lo, hi], [2.0 - half, 2.0 + half])

    def test_csv_round_trip(self, tmp_path):
        rep = MetricsReport()
        for fold in range(3):
            rep.add("fe", "batch", "asw", fold, 0.1 * fold)
            rep.add("fe", "target", "asw", fold, 0.5)
        per_fold = tmp_path / "metrics.csv"
        agg = tmp_path / "metrics_aggregated.csv"
        rep.write_csv(str(per_fold))
        rep.write_aggregated_csv(str(agg))
        lines = per_fold.read_text().strip().split("\n")
        assert lines[0] == "model,label_kind,metric,fold,value"
        assert len(lines) == 7
        agg_lines = agg.read_text().strip().split("\n")
        assert agg_lines[0] == "model,label_kind,metric,mean,ci_lo,ci_hi"
        row = [l for l in agg_lines if l.startswith("fe,target")][0]
        # constant folds collapse to a zero-width interval
        assert row.split(",")[3:] == ["0.5", "0.5", "0.5"]
        np.testing.assert_allclose(rep.mean("fe", "batch", "asw"), 0.1)
