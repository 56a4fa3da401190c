"""Expression datasets: loading, preprocessing, scaling and fold splitting.

File formats
------------
counts CSV   header ``cell_id,<gene>,<gene>,...``; one row per cell,
             non-negative numeric values.
labels CSV   header ``cell_id,batch,target[,...]``; extra columns are kept
             as additional label vectors.
folds CSV    header ``cell_id,fold``; fold ids 0..k-1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import derive_rng


@dataclass
class ExpressionDataset:
    """Cells x genes matrix plus per-cell batch and target labels.

    ``values`` holds raw counts after :func:`simulate` / :func:`load_expression_csv`
    and log-normalized expression after :func:`preprocess`.
    """

    values: np.ndarray
    cell_ids: list[str]
    gene_ids: list[str]
    batch_labels: np.ndarray
    target_labels: np.ndarray
    extra_labels: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.batch_labels = np.asarray(self.batch_labels, dtype=object)
        self.target_labels = np.asarray(self.target_labels, dtype=object)
        n, m = self.values.shape
        if len(self.cell_ids) != n:
            raise DataError(f"{len(self.cell_ids)} cell ids for {n} rows")
        if len(self.gene_ids) != m:
            raise DataError(f"{len(self.gene_ids)} gene ids for {m} columns")
        if len(self.batch_labels) != n or len(self.target_labels) != n:
            raise DataError("label vectors must have one entry per cell")
        if np.any(self.values < 0):
            i, j = np.argwhere(self.values < 0)[0]
            raise DataError(
                f"negative value at cell {self.cell_ids[i]!r}, gene {self.gene_ids[j]!r}"
            )

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    @property
    def batch_categories(self) -> list[str]:
        return sorted(set(self.batch_labels.tolist()))

    @property
    def target_categories(self) -> list[str]:
        return sorted(set(self.target_labels.tolist()))

    def labels(self, kind: str) -> np.ndarray:
        """Label vector by name: 'batch', 'target', or an extra column name."""
        if kind == "batch":
            return self.batch_labels
        if kind == "target":
            return self.target_labels
        if kind in self.extra_labels:
            return self.extra_labels[kind]
        known = ["batch", "target"] + sorted(self.extra_labels)
        raise DataError(f"unknown label kind {kind!r}, have {known}")

    def subset(self, idx: np.ndarray) -> "ExpressionDataset":
        idx = np.asarray(idx)
        return ExpressionDataset(
            values=self.values[idx],
            cell_ids=[self.cell_ids[i] for i in idx],
            gene_ids=list(self.gene_ids),
            batch_labels=self.batch_labels[idx],
            target_labels=self.target_labels[idx],
            extra_labels={k: v[idx] for k, v in self.extra_labels.items()},
            metadata=dict(self.metadata),
        )


def one_hot(labels: np.ndarray, categories: list[str], what: str = "labels") -> np.ndarray:
    """Encode labels against a fixed category order (columns follow it)."""
    index = {c: i for i, c in enumerate(categories)}
    out = np.zeros((len(labels), len(categories)))
    for row, lab in enumerate(labels):
        if lab not in index:
            raise DataError(f"{what}: row {row} has unknown category {lab!r}")
        out[row, index[lab]] = 1.0
    return out


# ---------------------------------------------------------------------------
# CSV IO


def _read_rows(path: str) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row]


def load_expression_csv(counts_path: str, labels_path: str) -> ExpressionDataset:
    """Load and cross-validate a counts/labels CSV pair.

    Errors carry file coordinates: data row number (1-based, header excluded)
    and gene column name.
    """
    rows = _read_rows(counts_path)
    if not rows:
        raise DataError(f"{counts_path}: empty file")
    header = rows[0]
    if not header or header[0] != "cell_id":
        raise DataError(f"{counts_path}: first header column must be 'cell_id'")
    gene_ids = header[1:]
    if not gene_ids:
        raise DataError(f"{counts_path}: no gene columns")
    dup = _first_duplicate(gene_ids)
    if dup is not None:
        raise DataError(f"{counts_path}: duplicate gene id {dup!r}")

    cell_ids: list[str] = []
    values = np.empty((len(rows) - 1, len(gene_ids)))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(
                f"{counts_path}: data row {r} has {len(row)} fields, expected {len(header)}"
            )
        cell_ids.append(row[0])
        for j, tok in enumerate(row[1:]):
            try:
                v = float(tok)
            except ValueError:
                raise DataError(
                    f"{counts_path}: non-numeric value {tok!r} at data row {r}, "
                    f"gene {gene_ids[j]!r}"
                ) from None
            if not np.isfinite(v):
                raise DataError(
                    f"{counts_path}: non-finite value at data row {r}, gene {gene_ids[j]!r}"
                )
            if v < 0:
                raise DataError(
                    f"{counts_path}: negative value {v} at data row {r}, gene {gene_ids[j]!r}"
                )
            values[r - 1, j] = v
    dup = _first_duplicate(cell_ids)
    if dup is not None:
        raise DataError(f"{counts_path}: duplicate cell id {dup!r}")

    lab_rows = _read_rows(labels_path)
    if not lab_rows:
        raise DataError(f"{labels_path}: empty file")
    lab_header = lab_rows[0]
    if lab_header[:3] != ["cell_id", "batch", "target"]:
        raise DataError(
            f"{labels_path}: header must start with cell_id,batch,target, got {lab_header[:3]}"
        )
    extra_names = lab_header[3:]
    by_id: dict[str, list[str]] = {}
    for r, row in enumerate(lab_rows[1:], start=1):
        if len(row) != len(lab_header):
            raise DataError(
                f"{labels_path}: data row {r} has {len(row)} fields, expected {len(lab_header)}"
            )
        if row[0] in by_id:
            raise DataError(f"{labels_path}: duplicate cell id {row[0]!r} at data row {r}")
        by_id[row[0]] = row[1:]

    missing = [c for c in cell_ids if c not in by_id]
    if missing:
        raise DataError(f"{labels_path}: no labels for cell id {missing[0]!r}")
    batch = np.array([by_id[c][0] for c in cell_ids], dtype=object)
    target = np.array([by_id[c][1] for c in cell_ids], dtype=object)
    extra = {
        name: np.array([by_id[c][2 + i] for c in cell_ids], dtype=object)
        for i, name in enumerate(extra_names)
    }
    return ExpressionDataset(values, cell_ids, gene_ids, batch, target, extra)


def _first_duplicate(items: list[str]):
    seen = set()
    for it in items:
        if it in seen:
            return it
        seen.add(it)
    return None


def write_counts_csv(path: str, ds: ExpressionDataset, fmt: str = "%.10g") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id"] + list(ds.gene_ids))
        for i, cid in enumerate(ds.cell_ids):
            w.writerow([cid] + [fmt % v for v in ds.values[i]])


def write_labels_csv(path: str, ds: ExpressionDataset) -> None:
    extra_names = sorted(ds.extra_labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "batch", "target"] + extra_names)
        for i, cid in enumerate(ds.cell_ids):
            w.writerow(
                [cid, ds.batch_labels[i], ds.target_labels[i]]
                + [ds.extra_labels[k][i] for k in extra_names]
            )


# ---------------------------------------------------------------------------
# Preprocessing


def preprocess(
    ds: ExpressionDataset,
    min_genes_per_cell: int = 10,
    min_cells_per_gene: int = 3,
    target_total: float = 10_000.0,
    n_hvg: int | None = None,
) -> ExpressionDataset:
    """Filter, depth-normalize, log-transform and optionally select HVGs.

    Steps, in order: drop cells expressing fewer than ``min_genes_per_cell``
    genes; drop genes expressed in fewer than ``min_cells_per_gene`` of the
    remaining cells; scale each cell to ``target_total`` total counts;
    log(1 + x); keep the ``n_hvg`` most variable genes by binned normalized
    dispersion. Cell filtering is not repeated after gene filtering.
    """
    expressed = ds.values > 0
    keep_cells = expressed.sum(axis=1) >= min_genes_per_cell
    if not keep_cells.any():
        raise DataError("preprocessing removed every cell")
    sub = ds.subset(np.nonzero(keep_cells)[0])

    keep_genes = (sub.values > 0).sum(axis=0) >= min_cells_per_gene
    if not keep_genes.any():
        raise DataError("preprocessing removed every gene")
    gidx = np.nonzero(keep_genes)[0]
    values = sub.values[:, gidx]
    gene_ids = [sub.gene_ids[j] for j in gidx]

    totals = values.sum(axis=1)
    zero = np.nonzero(totals == 0)[0]
    if zero.size:
        raise DataError(f"cell {sub.cell_ids[zero[0]]!r} has zero total after gene filtering")
    values = values * (target_total / totals)[:, None]
    values = np.log1p(values)

    if n_hvg is not None and n_hvg < len(gene_ids):
        hv = _hvg_indices(values, n_hvg)
        values = values[:, hv]
        gene_ids = [gene_ids[j] for j in hv]

    meta = dict(sub.metadata)
    meta["preprocessed"] = {
        "min_genes_per_cell": min_genes_per_cell,
        "min_cells_per_gene": min_cells_per_gene,
        "target_total": target_total,
        "n_hvg": n_hvg,
    }
    return ExpressionDataset(
        values, sub.cell_ids, gene_ids, sub.batch_labels, sub.target_labels,
        sub.extra_labels, meta,
    )


def _hvg_indices(log_values: np.ndarray, n_hvg: int, n_bins: int = 20) -> np.ndarray:
    """Top genes by dispersion z-scored within equal-width mean bins.

    Dispersion is var/mean of the log-transformed values. A gene alone in its
    bin scores 1 when its dispersion is positive (nothing to compare
    against); zero-spread bins score 0. Returned indices are sorted so the
    gene order of the matrix is preserved.
    """
    means = log_values.mean(axis=0)
    variances = log_values.var(axis=0)
    disp = np.where(means > 0, variances / np.where(means > 0, means, 1.0), 0.0)

    edges = np.linspace(means.min(), means.max(), n_bins + 1)
    which = np.clip(np.digitize(means, edges[1:-1]), 0, n_bins - 1)
    z = np.zeros_like(disp)
    for b in range(n_bins):
        mask = which == b
        if mask.sum() == 1:
            z[mask] = np.where(disp[mask] > 0, 1.0, 0.0)
            continue
        if mask.sum() == 0:
            continue
        mu = disp[mask].mean()
        sd = disp[mask].std()
        if sd == 0:
            continue
        z[mask] = (disp[mask] - mu) / sd
    order = np.argsort(-z, kind="stable")[:n_hvg]
    return np.sort(order)


class MinMaxScaler:
    """Per-gene min-max scaling fitted on training rows only.

    Constant genes map to 0. Transformed values are not clamped, so held-out
    rows may fall outside [0, 1].
    """

    def __init__(self):
        self.data_min: np.ndarray | None = None
        self.data_max: np.ndarray | None = None

    def fit(self, x: np.ndarray) -> "MinMaxScaler":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"scaler needs a non-empty 2-D matrix, got shape {x.shape}")
        self.data_min = x.min(axis=0)
        self.data_max = x.max(axis=0)
        return self

    def _check(self, x: np.ndarray) -> np.ndarray:
        if self.data_min is None:
            raise DataError("scaler used before fit")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.data_min.shape[0]:
            raise DataError(
                f"scaler fitted on {self.data_min.shape[0]} genes, got {x.shape[1]}"
            )
        return x

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        span = self.data_max - self.data_min
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - self.data_min) / safe, 0.0)

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        span = self.data_max - self.data_min
        return np.where(span > 0, x * span + self.data_min, self.data_min)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        if self.data_min is None:
            raise DataError("scaler used before fit")
        return [("scaler.data_min", self.data_min), ("scaler.data_max", self.data_max)]

    @classmethod
    def from_state(cls, arrays: dict) -> "MinMaxScaler":
        sc = cls()
        sc.data_min = np.asarray(arrays["scaler.data_min"], dtype=np.float64)
        sc.data_max = np.asarray(arrays["scaler.data_max"], dtype=np.float64)
        return sc


# ---------------------------------------------------------------------------
# Fold splitting


@dataclass
class FoldSplit:
    """Assignment of every cell to one of k folds.

    Round r uses fold r as test, fold (r+1) % k as validation and the rest
    as training data.
    """

    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        self.fold_of = np.asarray(self.fold_of, dtype=np.int64)
        if self.k < 3:
            raise ConfigError(f"need k >= 3 folds to have train/val/test, got k={self.k}")
        bad = (self.fold_of < 0) | (self.fold_of >= self.k)
        if bad.any():
            raise DataError(f"fold id {self.fold_of[np.nonzero(bad)[0][0]]} outside 0..{self.k - 1}")

    def round(self, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(train_idx, val_idx, test_idx) for round ``r``."""
        if not 0 <= r < self.k:
            raise ConfigError(f"round {r} outside 0..{self.k - 1}")
        test = np.nonzero(self.fold_of == r)[0]
        val = np.nonzero(self.fold_of == (r + 1) % self.k)[0]
        train = np.nonzero((self.fold_of != r) & (self.fold_of != (r + 1) % self.k))[0]
        return train, val, test


def stratified_kfold(ds: ExpressionDataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Split cells into k folds stratified by (batch, target).

    Strata smaller than k cannot spread over every fold, so they cascade into
    a per-batch pool, and per-batch pools smaller than k into one global
    pool. Within each pool, shuffled members are dealt round-robin along a
    shuffled fold order, keeping per-fold histograms within one cell.
    """
    if k < 3:
        raise ConfigError(f"need k >= 3 folds, got k={k}")
    if ds.n_cells < k:
        raise DataError(f"cannot split {ds.n_cells} cells into {k} folds")
    strata: dict[tuple, list[int]] = {}
    for i in range(ds.n_cells):
        strata.setdefault((str(ds.batch_labels[i]), str(ds.target_labels[i])), []).append(i)

    pools: dict[tuple, list[int]] = {}
    for key in sorted(strata):
        members = strata[key]
        if len(members) >= k:
            pools[key] = members
        else:
            pools.setdefault((key[0], None), []).extend(members)
    merged: dict[tuple, list[int]] = {}
    leftovers: list[int] = []
    for key in sorted(pools, key=str):
        members = pools[key]
        if len(members) >= k or key == (None, None):
            merged[key] = members
        else:
            leftovers.extend(members)
    if leftovers:
        merged[(None, None)] = merged.get((None, None), []) + leftovers

    rng = derive_rng(seed, "folds")
    fold_of = np.full(ds.n_cells, -1, dtype=np.int64)
    for key in sorted(merged, key=str):
        members = np.array(merged[key])
        rng.shuffle(members)
        order = rng.permutation(k)
        for pos, cell in enumerate(members):
            fold_of[cell] = order[pos % k]
    return FoldSplit(fold_of, k)


def write_folds_csv(path: str, ds: ExpressionDataset, split: FoldSplit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "fold"])
        for cid, f in zip(ds.cell_ids, split.fold_of):
            w.writerow([cid, int(f)])


def load_folds_csv(path: str, ds: ExpressionDataset) -> FoldSplit:
    rows = _read_rows(path)
    if not rows or rows[0] != ["cell_id", "fold"]:
        raise DataError(f"{path}: header must be cell_id,fold")
    by_id: dict[str, int] = {}
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != 2:
            raise DataError(f"{path}: data row {r} has {len(row)} fields, expected 2")
        try:
            by_id[row[0]] = int(row[1])
        except ValueError:
            raise DataError(f"{path}: non-integer fold {row[1]!r} at data row {r}") from None
    missing = [c for c in ds.cell_ids if c not in by_id]
    if missing:
        raise DataError(f"{path}: no fold for cell id {missing[0]!r}")
    fold_of = np.array([by_id[c] for c in ds.cell_ids], dtype=np.int64)
    return FoldSplit(fold_of, int(fold_of.max()) + 1)
