"""Synthetic expression data with known, recoverable batch effects.

The generator works in log space: each cell type has a mean log-expression
profile, each batch distorts it multiplicatively and additively, and cells
add Gaussian noise. Counts are expm1 of the log signal (floored at zero), so
log1p of the written counts recovers the injected structure exactly wherever
the signal is non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExpressionDataset
from .errors import ConfigError
from .rng import derive_rng


@dataclass
class SyntheticSpec:
    n_cells: int = 4000
    n_genes: int = 200
    n_batches: int = 4
    n_celltypes: int = 3
    batch_shift_scale: float = 1.0
    batch_scale_spread: float = 0.1
    noise_sd: float = 0.4
    marker_strength: float = 2.0
    base_mean_low: float = 1.5
    base_mean_high: float = 3.5
    seed: int = 0
    # celltype name -> batches it may appear in; None = all batches
    confound: dict[str, list[str]] | None = None
    # batch name -> value of an extra 'group' label column; None = omit it
    batch_groups: dict[str, str] | None = None

    def __post_init__(self):
        for name, v in [
            ("n_cells", self.n_cells),
            ("n_genes", self.n_genes),
            ("n_batches", self.n_batches),
            ("n_celltypes", self.n_celltypes),
        ]:
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        for name, v in [
            ("batch_shift_scale", self.batch_shift_scale),
            ("batch_scale_spread", self.batch_scale_spread),
            ("noise_sd", self.noise_sd),
        ]:
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")

    @property
    def batch_names(self) -> list[str]:
        return [f"b{i}" for i in range(self.n_batches)]

    @property
    def celltype_names(self) -> list[str]:
        return [f"t{i}" for i in range(self.n_celltypes)]


@dataclass
class SyntheticTruth:
    """Ground-truth effects behind a synthetic dataset."""

    celltype_means: np.ndarray  # (n_celltypes, n_genes) log space
    additive_shifts: np.ndarray  # (n_batches, n_genes)
    scale_factors: np.ndarray  # (n_batches, n_genes)
    batch_names: list[str] = field(default_factory=list)
    celltype_names: list[str] = field(default_factory=list)

    def delta_log(self, batch_a: str, batch_b: str, celltype: str) -> np.ndarray:
        """Injected per-gene log-space difference batch_a minus batch_b
        for cells of the given type."""
        a = self.batch_names.index(batch_a)
        b = self.batch_names.index(batch_b)
        mu = self.celltype_means[self.celltype_names.index(celltype)]
        return mu * (self.scale_factors[a] - self.scale_factors[b]) + (
            self.additive_shifts[a] - self.additive_shifts[b]
        )


def _allowed_celltypes(spec: SyntheticSpec) -> dict[str, list[str]]:
    """Batch -> cell types that may appear in it, after confound filtering."""
    if spec.confound is None:
        return {b: list(spec.celltype_names) for b in spec.batch_names}
    for ct, batches in spec.confound.items():
        if ct not in spec.celltype_names:
            raise ConfigError(f"confound names unknown cell type {ct!r}")
        if not batches:
            raise ConfigError(f"confound leaves cell type {ct!r} with no batch")
        for b in batches:
            if b not in spec.batch_names:
                raise ConfigError(f"confound names unknown batch {b!r}")
    table = {b: [] for b in spec.batch_names}
    for ct in spec.celltype_names:
        batches = spec.confound.get(ct, spec.batch_names)
        for b in batches:
            table[b].append(ct)
    empty = [b for b, cts in table.items() if not cts]
    if empty:
        raise ConfigError(f"confound leaves batch {empty[0]!r} with no cell type")
    return table


def synthesize(spec: SyntheticSpec) -> tuple[ExpressionDataset, SyntheticTruth]:
    """Generate a dataset and the ground truth that produced it."""
    rng = derive_rng(spec.seed, "synthetic")
    m, big_t, big_k = spec.n_genes, spec.n_celltypes, spec.n_batches

    base = rng.uniform(spec.base_mean_low, spec.base_mean_high, size=m)
    means = np.tile(base, (big_t, 1))
    # each type gets an elevated marker block; blocks partition the genes
    for t in range(big_t):
        lo = t * m // big_t
        hi = (t + 1) * m // big_t
        means[t, lo:hi] += spec.marker_strength

    # zero scales still consume the same draws, so effect-free datasets pair
    # up with effect-bearing ones draw for draw
    shifts = spec.batch_shift_scale * rng.standard_normal((big_k, m))
    scales = spec.batch_scale_spread * rng.standard_normal((big_k, m))

    allowed = _allowed_celltypes(spec)
    per_batch = np.full(big_k, spec.n_cells // big_k)
    per_batch[: spec.n_cells % big_k] += 1
    batch_idx = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(per_batch)])
    type_idx = np.empty(spec.n_cells, dtype=np.int64)
    pos = 0
    for k, count in enumerate(per_batch):
        cts = [spec.celltype_names.index(ct) for ct in allowed[spec.batch_names[k]]]
        type_idx[pos : pos + count] = np.array(cts)[np.arange(count) % len(cts)]
        pos += count
    perm = rng.permutation(spec.n_cells)
    batch_idx, type_idx = batch_idx[perm], type_idx[perm]

    log_signal = (
        means[type_idx] * (1.0 + scales[batch_idx])
        + shifts[batch_idx]
        + spec.noise_sd * rng.standard_normal((spec.n_cells, m))
    )
    counts = np.maximum(np.expm1(log_signal), 0.0)

    width = len(str(spec.n_cells - 1))
    cell_ids = [f"c{str(i).zfill(width)}" for i in range(spec.n_cells)]
    gene_ids = [f"g{str(j).zfill(len(str(m - 1)))}" for j in range(m)]
    batch_labels = np.array([spec.batch_names[k] for k in batch_idx], dtype=object)
    target_labels = np.array([spec.celltype_names[t] for t in type_idx], dtype=object)

    extra = {}
    if spec.batch_groups is not None:
        missing = [b for b in spec.batch_names if b not in spec.batch_groups]
        if missing:
            raise ConfigError(f"batch_groups missing batch {missing[0]!r}")
        extra["group"] = np.array(
            [spec.batch_groups[b] for b in batch_labels], dtype=object
        )

    ds = ExpressionDataset(
        counts, cell_ids, gene_ids, batch_labels, target_labels, extra,
        metadata={"synthetic_seed": spec.seed},
    )
    truth = SyntheticTruth(
        means, shifts, scales, list(spec.batch_names), list(spec.celltype_names)
    )
    return ds, truth
