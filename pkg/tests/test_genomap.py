import numpy as np
import pytest

from mixedae.errors import DataError
from mixedae.fixed import FEConfig, LabeledMatrix, train_fixed_effects
from mixedae.genomap import (
    BACKGROUND_PIXEL,
    MANIFEST_COLUMNS,
    GeneGrid,
    build_grid,
    grid_image,
    interaction_matrix,
    pixels_to_z,
    render_panel,
    spiral_positions,
    z_to_pixels,
)
from mixedae.randomfx import REConfig, REModel, train_random_effects
from mixedae.rng import derive_rng


# ---------------------------------------------------------------------------
# interaction matrix


def test_interaction_diagonal_is_one():
    x = derive_rng(1, "g").normal(size=(30, 5))
    corr = interaction_matrix(x)
    assert np.allclose(np.diag(corr), 1.0)


def test_interaction_duplicate_genes():
    rng = derive_rng(2, "g")
    a = rng.normal(size=30)
    x = np.stack([a, a.copy(), -2.0 * a + 3.0], axis=1)
    corr = interaction_matrix(x)
    assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert corr[0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_interaction_constant_gene():
    rng = derive_rng(3, "g")
    x = np.stack([rng.normal(size=20), np.full(20, 4.2), rng.normal(size=20)], axis=1)
    corr = interaction_matrix(x)
    assert corr[1, 1] == 1.0
    assert corr[1, 0] == 0.0 and corr[1, 2] == 0.0
    assert np.all(np.isfinite(corr))


def test_interaction_matches_corrcoef():
    x = derive_rng(4, "g").normal(size=(50, 8))
    ours = interaction_matrix(x)
    ref = np.corrcoef(x, rowvar=False)
    assert np.allclose(ours, ref, atol=1e-12)


def test_interaction_independent_genes_small():
    x = derive_rng(5, "g").normal(size=(1000, 20))
    corr = interaction_matrix(x)
    off = np.abs(corr[~np.eye(20, dtype=bool)])
    assert np.quantile(off, 0.95) < 0.1


def test_interaction_validation():
    with pytest.raises(DataError):
        interaction_matrix(np.zeros((1, 4)))
    with pytest.raises(DataError):
        interaction_matrix(np.zeros((10, 1)))


# ---------------------------------------------------------------------------
# grid layout


def test_spiral_center_out_and_complete():
    for side in (3, 4, 5):
        rows, cols = spiral_positions(side)
        assert len(set(zip(rows.tolist(), cols.tolist()))) == side * side
        r2 = (2 * rows - (side - 1)) ** 2 + (2 * cols - (side - 1)) ** 2
        assert np.all(np.diff(r2) >= 0)
    rows, cols = spiral_positions(5)
    assert (rows[0], cols[0]) == (2, 2)


def test_build_grid_m9_bijective():
    grid = build_grid(np.eye(9))
    assert grid.side == 3
    assert len(set(zip(grid.rows.tolist(), grid.cols.tolist()))) == 9
    assert grid.rows.min() >= 0 and grid.rows.max() < 3


def test_build_grid_identity_keeps_index_order():
    # all scores tie at zero, so gene k takes the k-th spiral position
    grid = build_grid(np.eye(9))
    sp_rows, sp_cols = spiral_positions(3)
    assert np.array_equal(grid.rows, sp_rows)
    assert np.array_equal(grid.cols, sp_cols)


def test_build_grid_hub_gene_at_center():
    m = 9
    inter = np.eye(m)
    hub = 6
    inter[hub, :] = 0.9
    inter[:, hub] = 0.9
    inter[hub, hub] = 1.0
    grid = build_grid(inter)
    assert (grid.rows[hub], grid.cols[hub]) == (1, 1)


def test_build_grid_non_square_gene_count():
    grid = build_grid(np.eye(7))
    assert grid.side == 3
    assert grid.n_genes == 7
    img = grid_image(grid, np.zeros(7))
    assert img.shape == (3, 3)
    # the two unplaced pixels hold the background value
    placed = np.zeros((3, 3), dtype=bool)
    placed[grid.rows, grid.cols] = True
    assert (~placed).sum() == 2
    assert np.all(img[~placed] == BACKGROUND_PIXEL)


def test_build_grid_validation():
    with pytest.raises(DataError):
        build_grid(np.zeros((3, 4)))
    bad = np.eye(3)
    bad[0, 1] = 0.5
    with pytest.raises(DataError):
        build_grid(bad)


# ---------------------------------------------------------------------------
# pixel mapping


def test_pixel_mapping_endpoints():
    assert z_to_pixels(np.array([-3.0]))[0] == 0
    assert z_to_pixels(np.array([3.0]))[0] == 255
    assert z_to_pixels(np.array([-9.0]))[0] == 0  # clipped
    assert z_to_pixels(np.array([9.0]))[0] == 255
    assert BACKGROUND_PIXEL == z_to_pixels(np.array([0.0]))[0]


def test_pixel_round_trip_within_quantization():
    z = np.linspace(-3.0, 3.0, 601)
    back = pixels_to_z(z_to_pixels(z))
    assert np.max(np.abs(back - z)) <= 6.0 / 255 / 2 + 1e-12


def test_grid_image_places_values():
    grid = build_grid(np.eye(4))
    img = grid_image(grid, np.array([3.0, -3.0, 0.0, 1.5]))
    assert img[grid.rows[0], grid.cols[0]] == 255
    assert img[grid.rows[1], grid.cols[1]] == 0
    assert img[grid.rows[2], grid.cols[2]] == BACKGROUND_PIXEL
    with pytest.raises(DataError):
        grid_image(grid, np.zeros(5))


# ---------------------------------------------------------------------------
# panel rendering


@pytest.fixture(scope="module")
def tiny_models():
    rng = derive_rng(55, "panel")
    n, m, k = 120, 25, 2
    x = rng.uniform(0.0, 1.0, size=(n, m))
    batches = np.array(["b0", "b1"])[rng.integers(0, k, size=n)]
    onehot = np.eye(k)[[0 if b == "b0" else 1 for b in batches]]

    fe_cfg = FEConfig(
        n_genes=m, layer_units=(12, 6), learning_rate=1e-3,
        batch_size=64, epochs=5, patience=5, seed=1,
    )
    fe, _ = train_fixed_effects(LabeledMatrix(x[:90]), LabeledMatrix(x[90:]), fe_cfg)
    re_cfg = REConfig(
        n_genes=m, n_batches=k, layer_units=(12, 6), learning_rate=1e-3,
        batch_size=64, epochs=5, patience=5, seed=2,
    )
    re_model, _ = train_random_effects(
        LabeledMatrix(x[:90], onehot[:90]), LabeledMatrix(x[90:], onehot[90:]), re_cfg
    )
    re_model.batch_categories = ["b0", "b1"]
    grid = build_grid(interaction_matrix(x))
    return x, batches, fe, re_model, grid


def test_render_panel_files_and_manifest(tiny_models, tmp_path):
    x, batches, fe, re_model, grid = tiny_models
    sel = np.arange(4)
    celltypes = ["t0", "t0", "t1", "t1"]
    ids = [f"cell{i}" for i in sel]
    panel = render_panel(
        "fig1", str(tmp_path), grid, x[sel], ids, celltypes, batches[sel], fe, re_model
    )
    assert panel.columns == ["original", "fe_recon", "re_proj_b0", "re_proj_b1"]
    assert panel.mean.shape == (grid.n_genes,)
    assert panel.sd.shape == (grid.n_genes,)

    base = tmp_path / "fig1"
    for i, cid in enumerate(ids):
        for col in panel.columns:
            assert (base / celltypes[i] / f"{cid}__{col}.png").is_file()
    assert (base / "t0" / "composite.png").is_file()
    assert (base / "t1" / "composite.png").is_file()

    manifest = (base / "manifest.csv").read_text().splitlines()
    assert manifest[0] == ",".join(MANIFEST_COLUMNS)
    # 4 cells x 4 columns + 2 composites
    assert len(manifest) == 1 + 16 + 2
    own = [r for r in panel.manifest_rows if r["highlighted"]]
    assert len(own) == 4
    for r in own:
        assert r["column"] == f"re_proj_{r['batch']}"


def test_render_panel_shared_standardization(tiny_models, tmp_path):
    from mixedae.fixed import reconstruct_fe
    from mixedae.randomfx import project_counterfactual

    x, batches, fe, re_model, grid = tiny_models
    sel = np.arange(6)
    panel = render_panel(
        "fig2", str(tmp_path), grid, x[sel], [f"c{i}" for i in sel],
        ["t"] * 6, batches[sel], fe, re_model,
    )
    combined = np.vstack(
        [x[sel], reconstruct_fe(fe, x[sel])]
        + [project_counterfactual(re_model, x[sel], b) for b in (0, 1)]
    )
    assert np.allclose(panel.mean, combined.mean(axis=0))
    assert np.allclose(panel.sd, combined.std(axis=0))


def test_render_own_batch_column_equals_reconstruction(tiny_models, tmp_path):
    from PIL import Image

    from mixedae.randomfx import project_counterfactual

    x, batches, fe, re_model, grid = tiny_models
    sel = np.array([0, 1, 2])
    panel = render_panel(
        "fig3", str(tmp_path), grid, x[sel], [f"c{i}" for i in sel],
        ["t"] * 3, batches[sel], fe, re_model,
    )
    for i in sel:
        own = batches[sel][i]
        path = tmp_path / "fig3" / "t" / f"c{i}__re_proj_{own}.png"
        saved = np.asarray(Image.open(path))
        recon = project_counterfactual(re_model, x[sel], ["b0", "b1"].index(own))[i]
        z = np.where(panel.sd > 0, (recon - panel.mean) / np.where(panel.sd > 0, panel.sd, 1), 0)
        assert np.array_equal(saved, grid_image(grid, z))


def test_render_twice_bit_identical(tiny_models, tmp_path):
    x, batches, fe, re_model, grid = tiny_models
    sel = np.arange(3)
    args = (grid, x[sel], [f"c{i}" for i in sel], ["t"] * 3, batches[sel], fe, re_model)
    render_panel("runa", str(tmp_path), *args)
    render_panel("runb", str(tmp_path), *args)
    files_a = sorted((tmp_path / "runa").rglob("*.png"))
    files_b = sorted((tmp_path / "runb").rglob("*.png"))
    assert len(files_a) == len(files_b) > 0
    for fa, fb in zip(files_a, files_b):
        assert fa.relative_to(tmp_path / "runa") == fb.relative_to(tmp_path / "runb")
        assert fa.read_bytes() == fb.read_bytes()


def test_render_zero_effect_projections_identical(tiny_models, tmp_path):
    x, batches, fe, re_model, grid = tiny_models
    zeroed = REModel(re_model.cfg)
    zeroed.load_state_arrays(dict(re_model.state_arrays()))
    zeroed.effects_mult.loc.data[...] = 0.0
    zeroed.effects_add.loc.data[...] = 0.0
    zeroed.batch_categories = ["b0", "b1"]
    sel = np.arange(3)
    render_panel(
        "zero", str(tmp_path), grid, x[sel], [f"c{i}" for i in sel],
        ["t"] * 3, batches[sel], fe, zeroed,
    )
    from PIL import Image

    for i in sel:
        a = np.asarray(Image.open(tmp_path / "zero" / "t" / f"c{i}__re_proj_b0.png"))
        b = np.asarray(Image.open(tmp_path / "zero" / "t" / f"c{i}__re_proj_b1.png"))
        assert np.array_equal(a, b)


def test_render_panel_errors(tiny_models, tmp_path):
    x, batches, fe, re_model, grid = tiny_models
    sel = np.arange(2)
    ids = ["a", "b"]
    with pytest.raises(DataError):
        render_panel(
            "err", str(tmp_path), grid, x[sel], ids, ["t", "t"], batches[sel],
            fe, re_model, target_batches=["nope"],
        )
    with pytest.raises(DataError):
        render_panel(
            "err", str(tmp_path), grid, x[sel, :10], ids, ["t", "t"], batches[sel],
            fe, re_model,
        )
    with pytest.raises(DataError):
        render_panel(
            "err", str(tmp_path), grid, x[sel], ids, ["t"], batches[sel], fe, re_model
        )
