"""Downstream analyses on latent spaces: PCA baseline, latent-space
classification with a random forest, and cross-validated experiment runners.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExpressionDataset, FoldSplit
from .errors import ConfigError, DataError
from .fixed import FEModel, encode_fe
from .metrics import (
    MetricsReport,
    average_silhouette_width,
    calinski_harabasz,
    chance_accuracy,
    classification_scores,
    davies_bouldin_reciprocal,
    fold_ci,
    subsample_indices,
)
from .randomfx import REModel, encode_re
from .rng import derive_rng

# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (n_genes, n_components), columns orthonormal
    explained_variance: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.mean.shape[0]:
            raise DataError(f"PCA fitted on {self.mean.shape[0]} genes, got {x.shape[1]}")
        return (x - self.mean) @ self.components


def pca_fit(x: np.ndarray, n_components: int = 2) -> PCAModel:
    """Principal axes of the population covariance (1/n), eigendecomposed.

    Deterministic sign: each component's largest-magnitude loading is
    positive. Rank-deficient data is fine; trailing variances are 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"PCA needs at least 2 rows, got shape {x.shape}")
    if not 1 <= n_components <= x.shape[1]:
        raise ConfigError(
            f"n_components must be in 1..{x.shape[1]}, got {n_components}"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    comps = eigvecs[:, order]
    for j in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return PCAModel(mean, comps, np.maximum(eigvals[order], 0.0))


# ---------------------------------------------------------------------------
# Latent standardization


class LatentStandardizer:
    """Column z-scoring with population (1/n) standard deviation.

    Statistics come from the fitted rows only; zero-variance columns map to
    0. ``transform`` concatenates the blocks left to right in the order they
    were fitted, so callers put fixed-effects columns first.
    """

    def __init__(self):
        self._stats: list[tuple[np.ndarray, np.ndarray]] | None = None

    def fit(self, blocks: list[np.ndarray]) -> "LatentStandardizer":
        if not blocks:
            raise DataError("need at least one latent block")
        self._stats = []
        for b in blocks:
            b = np.asarray(b, dtype=np.float64)
            self._stats.append((b.mean(axis=0), b.std(axis=0)))
        return self

    def transform(self, blocks: list[np.ndarray]) -> np.ndarray:
        if self._stats is None:
            raise DataError("standardizer used before fit")
        if len(blocks) != len(self._stats):
            raise DataError(f"fitted on {len(self._stats)} blocks, got {len(blocks)}")
        out = []
        for b, (mean, sd) in zip(blocks, self._stats):
            b = np.asarray(b, dtype=np.float64)
            if b.shape[1] != mean.shape[0]:
                raise DataError(f"block has {b.shape[1]} columns, expected {mean.shape[0]}")
            out.append(np.where(sd > 0, (b - mean) / np.where(sd > 0, sd, 1.0), 0.0))
        return np.hstack(out)


def standardize_latents(
    train_blocks: list[np.ndarray], apply_blocks: list[np.ndarray] | None = None
) -> np.ndarray:
    """One-shot fit on ``train_blocks``, transform of ``apply_blocks`` (or the
    training blocks themselves)."""
    st = LatentStandardizer().fit(train_blocks)
    return st.transform(apply_blocks if apply_blocks is not None else train_blocks)


# ---------------------------------------------------------------------------
# Random forest


@dataclass
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray  # -1 for internal nodes

    def predict(self, x: np.ndarray) -> np.ndarray:
        pos = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            at_leaf = self.leaf_class[pos] >= 0
            if at_leaf.all():
                return self.leaf_class[pos]
            go = ~at_leaf
            p = pos[go]
            vals = x[np.nonzero(go)[0], self.feature[p]]
            pos[go] = np.where(vals <= self.threshold[p], self.left[p], self.right[p])


def _gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity for rows of class counts."""
    total = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        p = counts / total
    return 1.0 - np.nansum(p * p, axis=-1)


def _majority(counts: np.ndarray) -> int:
    # ties resolve to the lowest class index
    return int(np.argmax(counts))


class _TreeBuilder:
    def __init__(self, x, y, n_classes, max_features, rng):
        self.x = x
        self.y = y
        self.n_classes = n_classes
        self.max_features = max_features
        self.rng = rng
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_class: list[int] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_class.append(-1)
        return len(self.feature) - 1

    def build(self, idx: np.ndarray) -> int:
        # explicit stack; a bootstrap can produce paths deeper than the
        # interpreter's recursion limit
        root = self._new_node()
        stack = [(root, idx)]
        while stack:
            node, idx = stack.pop()
            counts = np.bincount(self.y[idx], minlength=self.n_classes)
            if (counts > 0).sum() <= 1 or idx.size < 2:
                self.leaf_class[node] = _majority(counts)
                continue
            feats = np.sort(
                self.rng.choice(self.x.shape[1], self.max_features, replace=False)
            )
            best = None  # (impurity, feature, threshold, split_pos, order)
            for f in feats:
                order = idx[np.argsort(self.x[idx, f], kind="stable")]
                vals = self.x[order, f]
                distinct = np.nonzero(np.diff(vals) > 0)[0]
                if distinct.size == 0:
                    continue
                onehot = np.zeros((idx.size, self.n_classes))
                onehot[np.arange(idx.size), self.y[order]] = 1.0
                prefix = onehot.cumsum(axis=0)
                left_counts = prefix[distinct]
                right_counts = counts[None, :] - left_counts
                n_left = distinct + 1.0
                n_right = idx.size - n_left
                weighted = (
                    n_left * _gini(left_counts) + n_right * _gini(right_counts)
                ) / idx.size
                k = int(np.argmin(weighted))
                if best is None or weighted[k] < best[0]:
                    thr = 0.5 * (vals[distinct[k]] + vals[distinct[k] + 1])
                    best = (float(weighted[k]), int(f), thr, int(distinct[k]) + 1, order)
            if best is None:
                self.leaf_class[node] = _majority(counts)
                continue
            _, f, thr, pos, order = best
            self.feature[node] = f
            self.threshold[node] = thr
            left = self._new_node()
            right = self._new_node()
            self.left[node] = left
            self.right[node] = right
            stack.append((right, order[pos:]))
            stack.append((left, order[:pos]))
        return root

    def tree(self) -> _Tree:
        return _Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.leaf_class, dtype=np.int64),
        )


class RandomForest:
    """Bagged Gini trees grown to purity.

    Each tree draws an n-sized bootstrap and considers floor(sqrt(d))
    features per split (at least one). Per-tree seeds are derived from the
    forest seed, so the forest is identical however tree construction is
    scheduled. Prediction is a majority vote; vote and split ties resolve to
    the lowest class index / first candidate encountered.
    """

    def __init__(self, n_trees: int = 100, seed: int = 0):
        if n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {n_trees}")
        self.n_trees = n_trees
        self.seed = seed
        self.n_classes: int | None = None
        self._trees: list[_Tree] = []

    def fit(self, x: np.ndarray, y: np.ndarray, n_classes: int | None = None) -> "RandomForest":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError(f"bad shapes: x {x.shape}, y {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            raise DataError("labels must be integer class codes")
        if x.shape[0] < 1:
            raise DataError("cannot fit on an empty matrix")
        self.n_classes = int(n_classes if n_classes is not None else y.max() + 1)
        max_features = max(1, int(np.sqrt(x.shape[1])))
        self._trees = []
        for t in range(self.n_trees):
            rng = derive_rng(self.seed, "tree", t)
            boot = rng.integers(0, x.shape[0], size=x.shape[0])
            builder = _TreeBuilder(x, y, self.n_classes, max_features, rng)
            builder.build(boot)
            self._trees.append(builder.tree())
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if not self._trees:
            raise DataError("forest used before fit")
        x = np.asarray(x, dtype=np.float64)
        votes = np.zeros((x.shape[0], self.n_classes), dtype=np.int64)
        for tree in self._trees:
            pred = tree.predict(x)
            votes[np.arange(x.shape[0]), pred] += 1
        return votes.argmax(axis=1)


# ---------------------------------------------------------------------------
# Experiment runners


@dataclass
class FoldModels:
    """Per-fold trained models plus the fold's fitted scaler."""

    fe: FEModel
    re: REModel
    scaler: object


def latent_spaces_for_fold(
    ds: ExpressionDataset, models: FoldModels, n_components: int, train_idx: np.ndarray
) -> dict[str, np.ndarray]:
    """Latent codes for every cell: PCA baseline (fitted on the training
    fold), fixed-effects codes and random-effects codes."""
    if models.re.batch_categories is None:
        raise DataError("random-effects model has no batch categories attached")
    xs = models.scaler.transform(ds.values)
    batch_idx = np.array(
        [models.re.batch_categories.index(b) for b in ds.batch_labels], dtype=np.intp
    )
    pca = pca_fit(xs[train_idx], n_components=n_components)
    return {
        "pca": pca.transform(xs),
        "fe": encode_fe(models.fe, xs),
        "re": encode_re(models.re, xs, batch_idx),
    }


def evaluate_spaces(
    ds: ExpressionDataset,
    split: FoldSplit,
    spaces_per_fold: dict[int, dict[str, np.ndarray]],
    label_kinds: tuple = ("batch", "target"),
    subsample_cap: int = 10_000,
    seed: int = 0,
) -> MetricsReport:
    """Separation metrics of named latent spaces on each test fold.

    ``spaces_per_fold[fold][name]`` holds codes for every cell; scoring uses
    the (capped) test-fold rows only: average silhouette width, the
    Calinski-Harabasz ratio and the Davies-Bouldin reciprocal per label kind.
    """
    report = MetricsReport()
    for fold in sorted(spaces_per_fold):
        _, _, test_idx = split.round(fold)
        keep = test_idx[subsample_indices(test_idx.size, subsample_cap, seed)]
        for name in sorted(spaces_per_fold[fold]):
            pts = spaces_per_fold[fold][name][keep]
            for kind in label_kinds:
                labels = ds.labels(kind)[keep]
                report.add(name, kind, "asw", fold, average_silhouette_width(pts, labels))
                report.add(name, kind, "ch", fold, calinski_harabasz(pts, labels))
                report.add(
                    name, kind, "inv_db", fold, davies_bouldin_reciprocal(pts, labels)
                )
    return report


def run_experiment1(
    ds: ExpressionDataset,
    split: FoldSplit,
    fold_models: dict[int, FoldModels],
    label_kinds: tuple = ("batch", "target"),
    subsample_cap: int = 10_000,
    seed: int = 0,
) -> MetricsReport:
    """PCA / fixed-effects / random-effects separation metrics per test fold."""
    spaces_per_fold = {
        fold: latent_spaces_for_fold(ds, models, models.fe.cfg.n_latent, split.round(fold)[0])
        for fold, models in fold_models.items()
    }
    return evaluate_spaces(ds, split, spaces_per_fold, label_kinds, subsample_cap, seed)


@dataclass
class Experiment2Result:
    fold_rows: list = field(default_factory=list)
    aggregated: list = field(default_factory=list)


def run_experiment2(
    ds: ExpressionDataset,
    split: FoldSplit,
    fold_models: dict[int, FoldModels],
    targets: tuple = ("target",),
    n_trees: int = 100,
    seed: int = 0,
    dataset_name: str = "dataset",
) -> Experiment2Result:
    """Random-forest label prediction from each latent space.

    Spaces: PCA baseline, fixed effects, random effects and their
    column-wise concatenation (fixed-effects columns first). Latents are
    z-scored with training-fold statistics; the forest trains on train+val
    rows and is scored on the test fold, alongside the chance accuracy of
    the test fold's label distribution.
    """
    result = Experiment2Result()
    for fold, models in sorted(fold_models.items()):
        train_idx, val_idx, test_idx = split.round(fold)
        spaces = latent_spaces_for_fold(ds, models, models.fe.cfg.n_latent, train_idx)
        concat_st = LatentStandardizer().fit([spaces["fe"][train_idx], spaces["re"][train_idx]])
        table = {
            "pca": standardize_latents([spaces["pca"][train_idx]], [spaces["pca"]]),
            "fe": standardize_latents([spaces["fe"][train_idx]], [spaces["fe"]]),
            "re": standardize_latents([spaces["re"][train_idx]], [spaces["re"]]),
            "fe+re": concat_st.transform([spaces["fe"], spaces["re"]]),
        }
        fit_idx = np.concatenate([train_idx, val_idx])
        for target in targets:
            labels = ds.labels(target)
            cats = sorted(set(labels.tolist()))
            codes = np.array([cats.index(l) for l in labels], dtype=np.int64)
            chance = chance_accuracy(labels[test_idx], seed=seed)
            for space, lat in table.items():
                forest = RandomForest(n_trees=n_trees, seed=seed).fit(
                    lat[fit_idx], codes[fit_idx], n_classes=len(cats)
                )
                scores = classification_scores(codes[test_idx], forest.predict(lat[test_idx]))
                result.fold_rows.append(
                    {
                        "dataset": dataset_name,
                        "target": target,
                        "latent_space": space,
                        "fold": fold,
                        "accuracy": scores["accuracy"],
                        "balanced_accuracy": scores["balanced_accuracy"],
                        "chance_accuracy": chance,
                    }
                )
    groups: dict[tuple, list[dict]] = {}
    for row in result.fold_rows:
        groups.setdefault((row["dataset"], row["target"], row["latent_space"]), []).append(row)
    for key in sorted(groups):
        rows = groups[key]
        agg = {"dataset": key[0], "target": key[1], "latent_space": key[2], "n_folds": len(rows)}
        for metric in ("accuracy", "balanced_accuracy", "chance_accuracy"):
            mean, lo, hi = fold_ci(np.array([r[metric] for r in rows]))
            agg[f"{metric}_mean"] = mean
            agg[f"{metric}_ci_lo"] = lo
            agg[f"{metric}_ci_hi"] = hi
        result.aggregated.append(agg)
    return result


EXPERIMENT2_FOLD_COLUMNS = [
    "dataset", "target", "latent_space", "fold",
    "accuracy", "balanced_accuracy", "chance_accuracy",
]
EXPERIMENT2_AGG_COLUMNS = [
    "dataset", "target", "latent_space", "n_folds",
    "accuracy_mean", "accuracy_ci_lo", "accuracy_ci_hi",
    "balanced_accuracy_mean", "balanced_accuracy_ci_lo", "balanced_accuracy_ci_hi",
    "chance_accuracy_mean", "chance_accuracy_ci_lo", "chance_accuracy_ci_hi",
]


def write_experiment2_csvs(result: Experiment2Result, fold_path: str, agg_path: str) -> None:
    import csv

    from .metrics import FLOAT_FMT

    with open(fold_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EXPERIMENT2_FOLD_COLUMNS)
        for row in result.fold_rows:
            w.writerow(
                [row[c] if isinstance(row[c], str) else FLOAT_FMT % row[c] if isinstance(row[c], float) else row[c]
                 for c in EXPERIMENT2_FOLD_COLUMNS]
            )
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EXPERIMENT2_AGG_COLUMNS)
        for row in result.aggregated:
            w.writerow(
                [row[c] if isinstance(row[c], str) else FLOAT_FMT % row[c] if isinstance(row[c], float) else row[c]
                 for c in EXPERIMENT2_AGG_COLUMNS]
            )
