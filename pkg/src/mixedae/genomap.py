"""Genomap rendering: one cell's expression as a small grayscale image.

Genes are arranged on a square grid by interaction structure so that images
of the original cell, its fixed-effects reconstruction and its counterfactual
batch projections can be compared side by side. The published genomap method
solves a transport optimization to place genes; this module deliberately
substitutes a deterministic layout (genes ranked by total absolute Pearson
correlation, placed along a center-out spiral) because the comparisons of
interest concern the reconstructions, not the layout optimizer. The
interaction measure is likewise a documented stand-in: plain Pearson
correlation between gene columns.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .fixed import FEModel, reconstruct_fe
from .randomfx import REModel, project_counterfactual

# pixel mapping: z clipped to +-3 sd, mapped affinely onto 0..255
Z_CLIP = 3.0


def z_to_pixels(z: np.ndarray) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), -Z_CLIP, Z_CLIP)
    return np.rint((z + Z_CLIP) / (2 * Z_CLIP) * 255).astype(np.uint8)


def pixels_to_z(p: np.ndarray) -> np.ndarray:
    """Approximate inverse of ``z_to_pixels``; exact up to quantization."""
    return np.asarray(p, dtype=np.float64) / 255 * (2 * Z_CLIP) - Z_CLIP


BACKGROUND_PIXEL = int(z_to_pixels(np.zeros(1))[0])


# ---------------------------------------------------------------------------
# interaction structure and grid layout


def interaction_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson correlation between gene columns.

    Constant genes correlate 0 with everything else and 1 with themselves,
    rather than producing NaNs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"need at least 2 cells to correlate genes, got shape {x.shape}")
    if x.shape[1] < 2:
        raise DataError(f"need at least 2 genes, got {x.shape[1]}")
    # fp residue makes the deviations of a constant column tiny but nonzero,
    # so constancy is detected exactly rather than through sd == 0
    constant = x.max(axis=0) == x.min(axis=0)
    xc = x - x.mean(axis=0)
    sd = x.std(axis=0)
    safe = np.where(constant | (sd == 0), 1.0, sd)
    z = np.where(constant, 0.0, xc / safe)
    corr = (z.T @ z) / x.shape[0]
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def spiral_positions(side: int) -> tuple[np.ndarray, np.ndarray]:
    """All side*side grid positions ordered center-out.

    Positions sort by squared distance from the grid center (measured on a
    doubled lattice so half-integer centers stay exact), ties by row then
    column. Equal-radius positions are therefore consecutive in the order.
    """
    rows, cols = np.divmod(np.arange(side * side), side)
    r2 = (2 * rows - (side - 1)) ** 2 + (2 * cols - (side - 1)) ** 2
    order = np.lexsort((cols, rows, r2))
    return rows[order], cols[order]


@dataclass
class GeneGrid:
    """Bijection from gene index to a pixel of a side x side image."""

    side: int
    rows: np.ndarray  # (m,) pixel row of each gene
    cols: np.ndarray
    scores: np.ndarray  # total absolute off-diagonal correlation per gene

    @property
    def n_genes(self) -> int:
        return self.rows.shape[0]


def build_grid(interactions: np.ndarray) -> GeneGrid:
    """Rank genes by summed absolute correlation with the other genes and
    place them along the center-out spiral, highest rank first. Ties keep
    gene-index order."""
    inter = np.asarray(interactions, dtype=np.float64)
    if inter.ndim != 2 or inter.shape[0] != inter.shape[1]:
        raise DataError(f"interaction matrix must be square, got shape {inter.shape}")
    if not np.allclose(inter, inter.T, atol=1e-8):
        raise DataError("interaction matrix must be symmetric")
    m = inter.shape[0]
    scores = np.abs(inter).sum(axis=1) - np.abs(np.diag(inter))
    rank = np.lexsort((np.arange(m), -scores))
    side = int(np.ceil(np.sqrt(m)))
    sp_rows, sp_cols = spiral_positions(side)
    rows = np.empty(m, dtype=np.int64)
    cols = np.empty(m, dtype=np.int64)
    rows[rank] = sp_rows[:m]
    cols[rank] = sp_cols[:m]
    return GeneGrid(side=side, rows=rows, cols=cols, scores=scores)


def grid_image(grid: GeneGrid, z: np.ndarray) -> np.ndarray:
    """One gene-standardized expression vector as a uint8 image. Pixels not
    backed by a gene hold the z=0 background value."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (grid.n_genes,):
        raise DataError(f"expected {grid.n_genes} gene values, got shape {z.shape}")
    img = np.full((grid.side, grid.side), BACKGROUND_PIXEL, dtype=np.uint8)
    img[grid.rows, grid.cols] = z_to_pixels(z)
    return img


# ---------------------------------------------------------------------------
# panel rendering


@dataclass
class GenomapPanel:
    figure: str
    grid: GeneGrid
    columns: list[str]
    cell_ids: list[str]
    celltypes: list[str]
    batches: list[str]
    mean: np.ndarray  # one mean/sd per gene, shared by every image
    sd: np.ndarray
    manifest_rows: list[dict] = field(default_factory=list)


MANIFEST_COLUMNS = ["figure", "celltype", "cell_id", "batch", "column", "highlighted", "path"]

_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _safe_name(name: str) -> str:
    return _SAFE.sub("-", str(name))


def _zscore(rows: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return np.where(sd > 0, (rows - mean) / np.where(sd > 0, sd, 1.0), 0.0)


def _composite(tiles: list[list[np.ndarray]], highlights: list[list[bool]], pad: int = 2) -> np.ndarray:
    side = tiles[0][0].shape[0]
    step = side + 2 * pad
    n_rows, n_cols = len(tiles), len(tiles[0])
    canvas = np.full((n_rows * step, n_cols * step, 3), 255, dtype=np.uint8)
    for i in range(n_rows):
        for j in range(n_cols):
            y, x = i * step, j * step
            if highlights[i][j]:
                canvas[y : y + step, x : x + step] = (255, 0, 0)
            gray = tiles[i][j]
            canvas[y + pad : y + pad + side, x + pad : x + pad + side] = gray[:, :, None]
    return canvas


def render_panel(
    figure: str,
    out_dir: str,
    grid: GeneGrid,
    x: np.ndarray,
    cell_ids,
    celltypes,
    batch_labels,
    fe_model: FEModel,
    re_model: REModel,
    target_batches: list[str] | None = None,
) -> GenomapPanel:
    """Render original / FE reconstruction / RE projection images per cell.

    The combined matrix of originals, reconstructions and every projection is
    z-scored per gene once, so all images of the panel share one scale. Each
    (cell, column) pair becomes ``{figure}/{celltype}/{cell_id}__{column}.png``
    under ``out_dir``; a composite per cell type marks the column matching
    each cell's own batch with a red frame. A manifest CSV lists every image.
    """
    x = np.asarray(x, dtype=np.float64)
    m = grid.n_genes
    if x.ndim != 2 or x.shape[1] != m:
        raise DataError(f"expected a matrix with {m} gene columns, got shape {x.shape}")
    for model, label in ((fe_model.cfg.n_genes, "fixed"), (re_model.cfg.n_genes, "random")):
        if model != m:
            raise DataError(f"{label}-effects model has {model} genes, grid has {m}")
    if re_model.batch_categories is None:
        raise DataError("random-effects model has no batch categories attached")
    cats = list(re_model.batch_categories)
    if target_batches is None:
        target_batches = cats
    for b in target_batches:
        if b not in cats:
            raise DataError(f"unknown target batch {b!r}, model has {cats}")
    cell_ids = [str(c) for c in cell_ids]
    celltypes = [str(c) for c in celltypes]
    batch_labels = [str(b) for b in batch_labels]
    n = x.shape[0]
    if not (len(cell_ids) == len(celltypes) == len(batch_labels) == n):
        raise DataError("cell_ids, celltypes and batch_labels must match the matrix rows")

    fe_recon = reconstruct_fe(fe_model, x)
    projections = {
        b: project_counterfactual(re_model, x, cats.index(b)) for b in target_batches
    }
    combined = np.vstack([x, fe_recon] + [projections[b] for b in target_batches])
    mean = combined.mean(axis=0)
    sd = combined.std(axis=0)

    columns = ["original", "fe_recon"] + [f"re_proj_{b}" for b in target_batches]
    matrices = [x, fe_recon] + [projections[b] for b in target_batches]

    panel = GenomapPanel(
        figure=figure,
        grid=grid,
        columns=columns,
        cell_ids=cell_ids,
        celltypes=celltypes,
        batches=batch_labels,
        mean=mean,
        sd=sd,
    )

    base = Path(out_dir) / _safe_name(figure)
    tiles: dict[str, list[list[np.ndarray]]] = {}
    marks: dict[str, list[list[bool]]] = {}
    for i in range(n):
        ct_dir = base / _safe_name(celltypes[i])
        ct_dir.mkdir(parents=True, exist_ok=True)
        row_tiles, row_marks = [], []
        for col_name, mat in zip(columns, matrices):
            img = grid_image(grid, _zscore(mat[i], mean, sd))
            path = ct_dir / f"{_safe_name(cell_ids[i])}__{_safe_name(col_name)}.png"
            Image.fromarray(img, mode="L").save(path)
            highlighted = col_name == f"re_proj_{batch_labels[i]}"
            panel.manifest_rows.append(
                {
                    "figure": figure,
                    "celltype": celltypes[i],
                    "cell_id": cell_ids[i],
                    "batch": batch_labels[i],
                    "column": col_name,
                    "highlighted": int(highlighted),
                    "path": str(path.relative_to(base)),
                }
            )
            row_tiles.append(img)
            row_marks.append(highlighted)
        tiles.setdefault(celltypes[i], []).append(row_tiles)
        marks.setdefault(celltypes[i], []).append(row_marks)

    for ct in tiles:
        comp = _composite(tiles[ct], marks[ct])
        path = base / _safe_name(ct) / "composite.png"
        Image.fromarray(comp, mode="RGB").save(path)
        panel.manifest_rows.append(
            {
                "figure": figure,
                "celltype": ct,
                "cell_id": "",
                "batch": "",
                "column": "composite",
                "highlighted": 0,
                "path": str(path.relative_to(base)),
            }
        )

    with open(base / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for row in panel.manifest_rows:
            w.writerow([row[c] for c in MANIFEST_COLUMNS])
    return panel
