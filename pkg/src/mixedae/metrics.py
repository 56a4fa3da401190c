"""Latent-space quality metrics and fold-level aggregation.

Cluster separation is scored three ways: average silhouette width, the
Calinski-Harabasz variance ratio and the reciprocal of the Davies-Bouldin
index. All three take the same (points, labels) inputs; higher is better.

Degenerate geometry maps to sentinels instead of errors: zero within-cluster
spread with separated centroids gives +inf (perfect separation), coincident
centroids give a Davies-Bouldin reciprocal of 0, and a point alone in its
cluster contributes silhouette 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .rng import derive_rng

FLOAT_FMT = "%.10g"


def _encode(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2:
        raise DataError(f"points must be a 2-D matrix, got shape {x.shape}")
    if labels.shape[0] != x.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {x.shape[0]} points")
    cats, codes = np.unique(labels, return_inverse=True)
    if cats.size < 2:
        raise DataError("need at least 2 distinct labels to score separation")
    return x, codes, np.bincount(codes)


def _pair_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact differences, not the dot-product expansion; keeps error at the
    # level of individual float ops so brute-force comparisons hold tightly
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def silhouette_values(x: np.ndarray, labels: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Per-point silhouette s = (b - a) / max(a, b); singleton clusters get 0."""
    x, codes, counts = _encode(x, labels)
    n, k = x.shape[0], counts.size
    member = np.zeros((n, k))
    member[np.arange(n), codes] = 1.0
    s = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        dist_sums = _pair_dists(x[lo:hi], x) @ member  # (hi-lo, k)
        rows = np.arange(lo, hi)
        own = codes[rows]
        own_count = counts[own]
        with np.errstate(invalid="ignore", divide="ignore"):
            a = dist_sums[np.arange(hi - lo), own] / (own_count - 1)
        other = dist_sums / counts
        other[np.arange(hi - lo), own] = np.inf
        b = other.min(axis=1)
        top = np.maximum(a, b)
        block = np.where(top > 0, (b - a) / np.where(top > 0, top, 1.0), 0.0)
        s[rows] = np.where(own_count == 1, 0.0, block)
    return s


def average_silhouette_width(x: np.ndarray, labels: np.ndarray) -> float:
    return float(silhouette_values(x, labels).mean())


def calinski_harabasz(x: np.ndarray, labels: np.ndarray) -> float:
    """Between/within variance ratio ((B/(k-1)) / (W/(n-k)); +inf when W = 0."""
    x, codes, counts = _encode(x, labels)
    n, k = x.shape[0], counts.size
    if n <= k:
        raise DataError(f"need more points than clusters, got n={n}, k={k}")
    overall = x.mean(axis=0)
    b = 0.0
    w = 0.0
    for c in range(k):
        pts = x[codes == c]
        centroid = pts.mean(axis=0)
        b += counts[c] * float(((centroid - overall) ** 2).sum())
        w += float(((pts - centroid) ** 2).sum())
    if w == 0.0:
        return np.inf
    return (b / (k - 1)) / (w / (n - k))


def davies_bouldin_reciprocal(x: np.ndarray, labels: np.ndarray) -> float:
    """1 / DB. Coincident centroids give 0; zero scatter everywhere gives +inf."""
    x, codes, counts = _encode(x, labels)
    k = counts.size
    centroids = np.stack([x[codes == c].mean(axis=0) for c in range(k)])
    scatter = np.array(
        [float(np.linalg.norm(x[codes == c] - centroids[c], axis=1).mean()) for c in range(k)]
    )
    cdist = _pair_dists(centroids, centroids)
    ratio = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            ratio[i, j] = np.inf if cdist[i, j] == 0 else (scatter[i] + scatter[j]) / cdist[i, j]
    np.fill_diagonal(ratio, -np.inf)
    db = float(ratio.max(axis=1).mean())
    if db == 0.0:
        return np.inf
    if np.isinf(db):
        return 0.0
    return 1.0 / db


def subsample_indices(n: int, cap: int, seed: int) -> np.ndarray:
    """Sorted index sample without replacement; identity when n <= cap."""
    if cap < 1:
        raise ConfigError(f"cap must be >= 1, got {cap}")
    if n <= cap:
        return np.arange(n)
    rng = derive_rng(seed, "subsample")
    return np.sort(rng.choice(n, size=cap, replace=False))


def classification_scores(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    """Accuracy and balanced accuracy (mean per-class recall)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_true.shape} true labels vs {y_pred.shape} predictions")
    if y_true.size == 0:
        raise DataError("cannot score empty label vectors")
    acc = float((y_true == y_pred).mean())
    recalls = []
    for c in np.unique(y_true):
        mask = y_true == c
        recalls.append(float((y_pred[mask] == c).mean()))
    return {"accuracy": acc, "balanced_accuracy": float(np.mean(recalls))}


def chance_accuracy(y_true: np.ndarray, n_repeats: int = 10_000, seed: int = 0) -> float:
    """Accuracy of predictions drawn from the labels' own empirical distribution.

    For class frequencies p this estimates sum_c p_c^2.
    """
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise DataError("cannot score empty label vectors")
    cats, codes = np.unique(y_true, return_inverse=True)
    freqs = np.bincount(codes) / codes.size
    rng = derive_rng(seed, "chance")
    draws = rng.choice(cats.size, size=(n_repeats, codes.size), p=freqs)
    return float((draws == codes[None, :]).mean())


# ---------------------------------------------------------------------------
# Fold-level reporting


def fold_ci(values: np.ndarray) -> tuple[float, float, float]:
    """(mean, lo, hi) with half-width 1.96 * sd / sqrt(n); sd over folds, ddof 1."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return mean, mean, mean
    half = 1.96 * float(values.std(ddof=1)) / np.sqrt(values.size)
    return mean, mean - half, mean + half


@dataclass
class MetricRow:
    model: str
    label_kind: str
    metric: str
    fold: int
    value: float


class MetricsReport:
    """Per-fold metric rows plus CI aggregation and CSV output."""

    def __init__(self):
        self.rows: list[MetricRow] = []

    def add(self, model: str, label_kind: str, metric: str, fold: int, value: float) -> None:
        self.rows.append(MetricRow(model, label_kind, metric, int(fold), float(value)))

    def value(self, model: str, label_kind: str, metric: str, fold: int) -> float:
        for r in self.rows:
            if (r.model, r.label_kind, r.metric, r.fold) == (model, label_kind, metric, fold):
                return r.value
        raise KeyError((model, label_kind, metric, fold))

    def aggregate(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.model, r.label_kind, r.metric), []).append(r.value)
        out = []
        for (model, label_kind, metric) in sorted(groups):
            mean, lo, hi = fold_ci(np.array(groups[(model, label_kind, metric)]))
            out.append(
                {
                    "model": model,
                    "label_kind": label_kind,
                    "metric": metric,
                    "mean": mean,
                    "ci_lo": lo,
                    "ci_hi": hi,
                }
            )
        return out

    def mean(self, model: str, label_kind: str, metric: str) -> float:
        for row in self.aggregate():
            if (row["model"], row["label_kind"], row["metric"]) == (model, label_kind, metric):
                return row["mean"]
        raise KeyError((model, label_kind, metric))

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "label_kind", "metric", "fold", "value"])
            for r in sorted(self.rows, key=lambda r: (r.model, r.label_kind, r.metric, r.fold)):
                w.writerow([r.model, r.label_kind, r.metric, r.fold, FLOAT_FMT % r.value])

    def write_aggregated_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "label_kind", "metric", "mean", "ci_lo", "ci_hi"])
            for row in self.aggregate():
                w.writerow(
                    [row["model"], row["label_kind"], row["metric"]]
                    + [FLOAT_FMT % row[k] for k in ("mean", "ci_lo", "ci_hi")]
                )
