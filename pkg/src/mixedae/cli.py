"""Command-line pipeline front end.

Stages write their artifacts under one output directory and are pure
functions of the files already in it, so deleting a downstream artifact and
rerunning the stage reproduces it byte for byte:

    simulate    counts.csv, labels.csv, truth.mxae
    preprocess  preprocessed_counts.csv, preprocessed_labels.csv
    split       folds.csv
    train       checkpoints/{model}_fold{r}.mxae, train_reports/...
    evaluate    metrics.csv, metrics_aggregated.csv
    classify    experiment2.csv, experiment2_folds.csv
    project     counterfactuals_fold{r}.csv
    genomap     genomaps/fold{r}/...

Every command echoes the resolved configuration and writes a sidecar
manifest recording the package version, config hash and master seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import (
    MODEL_VARIANTS,
    PRESET_NAMES,
    RunConfig,
    config_hash,
    fe_config,
    re_config,
    resolve_config,
)
from .data import (
    ExpressionDataset,
    FoldSplit,
    MinMaxScaler,
    load_expression_csv,
    load_folds_csv,
    one_hot,
    preprocess,
    stratified_kfold,
    write_counts_csv,
    write_folds_csv,
    write_labels_csv,
)
from .downstream import (
    FoldModels,
    evaluate_spaces,
    pca_fit,
    run_experiment2,
    write_experiment2_csvs,
)
from .errors import ConfigError, DataError, MixedAEError
from .fixed import LabeledMatrix, encode_fe, load_fe, save_fe, train_fixed_effects
from .genomap import build_grid, interaction_matrix, render_panel
from .metrics import FLOAT_FMT
from .randomfx import (
    encode_re,
    load_re,
    project_counterfactual,
    save_re,
    train_random_effects,
)
from .rng import derive_rng, fold_seed
from .synthetic import SyntheticSpec, synthesize

FE_VARIANTS = ("ae", "aec", "medl-fe", "medl-aec-fe")
GENOMAP_CELLS_PER_FIGURE = 300


# ---------------------------------------------------------------------------
# artifact paths and manifests


def _ckpt_path(out: Path, model: str, fold: int) -> Path:
    return out / "checkpoints" / f"{model}_fold{fold}.mxae"


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise DataError(f"missing artifact {path}; run `mixedae {producer}` first")
    return path


def _load_raw(out: Path) -> ExpressionDataset:
    return load_expression_csv(
        str(_require(out / "counts.csv", "simulate")),
        str(_require(out / "labels.csv", "simulate")),
    )


def _load_pre(out: Path) -> ExpressionDataset:
    return load_expression_csv(
        str(_require(out / "preprocessed_counts.csv", "preprocess")),
        str(_require(out / "preprocessed_labels.csv", "preprocess")),
    )


def _load_split(out: Path, ds: ExpressionDataset) -> FoldSplit:
    return load_folds_csv(str(_require(out / "folds.csv", "split")), ds)


def _write_manifest(out: Path, name: str, cfg: RunConfig, outputs: list) -> None:
    mdir = out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "artifact_version": __version__,
        "command": name,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    (mdir / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _echo(cfg: RunConfig) -> None:
    print(f"mixedae {__version__} | seed {cfg.seed} | config {config_hash(cfg)[:12]}")
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _folds_to_run(args, split: FoldSplit) -> list[int]:
    if args.fold is not None:
        if not 0 <= args.fold < split.k:
            raise ConfigError(f"--fold {args.fold} outside 0..{split.k - 1}")
        return [args.fold]
    return list(range(split.k))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, args, out: Path) -> int:
    spec_args = dict(cfg.synthetic)
    spec_args.setdefault("seed", cfg.seed)
    spec = SyntheticSpec(**spec_args)
    ds, truth = synthesize(spec)
    out.mkdir(parents=True, exist_ok=True)
    counts, labels = out / "counts.csv", out / "labels.csv"
    write_counts_csv(str(counts), ds)
    write_labels_csv(str(labels), ds)
    truth_path = out / "truth.mxae"
    checkpoint.save_state(
        str(truth_path),
        "truth",
        {"batch_names": truth.batch_names, "celltype_names": truth.celltype_names},
        [
            ("celltype_means", truth.celltype_means),
            ("additive_shifts", truth.additive_shifts),
            ("scale_factors", truth.scale_factors),
        ],
    )
    print(f"simulated {ds.values.shape[0]} cells x {ds.values.shape[1]} genes")
    _write_manifest(out, "simulate", cfg, [counts, labels, truth_path])
    return 0


def cmd_preprocess(cfg: RunConfig, args, out: Path) -> int:
    ds = _load_raw(out)
    pre = preprocess(
        ds,
        min_genes_per_cell=cfg.min_genes_per_cell,
        min_cells_per_gene=cfg.min_cells_per_gene,
        target_total=cfg.counts_per_cell,
        n_hvg=cfg.n_hvg,
    )
    counts, labels = out / "preprocessed_counts.csv", out / "preprocessed_labels.csv"
    write_counts_csv(str(counts), pre)
    write_labels_csv(str(labels), pre)
    print(
        f"preprocessed: {ds.values.shape[0]} -> {pre.values.shape[0]} cells, "
        f"{ds.values.shape[1]} -> {pre.values.shape[1]} genes"
    )
    _write_manifest(out, "preprocess", cfg, [counts, labels])
    return 0


def cmd_split(cfg: RunConfig, args, out: Path) -> int:
    ds = _load_pre(out)
    split = stratified_kfold(ds, k=cfg.n_folds, seed=cfg.seed)
    path = out / "folds.csv"
    write_folds_csv(str(path), ds, split)
    sizes = [int((split.fold_of == f).sum()) for f in range(split.k)]
    print(f"split {ds.values.shape[0]} cells into {split.k} folds: {sizes}")
    _write_manifest(out, "split", cfg, [path])
    return 0


def _write_report_csv(path: Path, report) -> None:
    keys = sorted(report.epochs[0].train) if report.epochs else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"train_{k}" for k in keys] + [f"val_{k}" for k in keys])
        for rec in report.epochs:
            w.writerow(
                [rec.epoch]
                + [FLOAT_FMT % rec.train[k] for k in keys]
                + [FLOAT_FMT % rec.val[k] for k in keys]
            )


def _check_cardinalities(cfg: RunConfig, model: str, ds: ExpressionDataset) -> None:
    uses_batches = model in ("medl-fe", "medl-aec-fe", "medl-re")
    if cfg.n_clusters is not None and uses_batches:
        if cfg.n_clusters != len(ds.batch_categories):
            raise ConfigError(
                f"config expects n_clusters={cfg.n_clusters} batches, "
                f"data has {len(ds.batch_categories)}"
            )
    uses_targets = model in ("aec", "medl-aec-fe")
    if cfg.n_pred is not None and uses_targets:
        if cfg.n_pred != len(ds.target_categories):
            raise ConfigError(
                f"config expects n_pred={cfg.n_pred} target classes, "
                f"data has {len(ds.target_categories)}"
            )


def _train_one(cfg: RunConfig, ds: ExpressionDataset, split: FoldSplit,
               model: str, fold: int, out: Path) -> list[Path]:
    train_idx, val_idx, _ = split.round(fold)
    scaler = MinMaxScaler().fit(ds.values[train_idx])
    xs = scaler.transform(ds.values)
    seed = fold_seed(cfg.seed, fold)

    if model == "medl-re":
        rc = dataclasses.replace(
            re_config(cfg, ds.values.shape[1], len(ds.batch_categories)), seed=seed
        )
        bo = one_hot(ds.batch_labels, ds.batch_categories, "batch labels")
        net, report = train_random_effects(
            LabeledMatrix(xs[train_idx], bo[train_idx]),
            LabeledMatrix(xs[val_idx], bo[val_idx]),
            rc,
        )
        net.batch_categories = list(ds.batch_categories)
        net.gene_ids = list(ds.gene_ids)
        ckpt = _ckpt_path(out, model, fold)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_re(str(ckpt), net, report, scaler)
    else:
        fc = dataclasses.replace(
            fe_config(
                cfg, model, ds.values.shape[1],
                len(ds.batch_categories), len(ds.target_categories),
            ),
            seed=seed,
        )
        bo = (
            one_hot(ds.batch_labels, ds.batch_categories, "batch labels")
            if fc.lambda_adv > 0
            else None
        )
        to = (
            one_hot(ds.target_labels, ds.target_categories, "target labels")
            if fc.lambda_target > 0
            else None
        )

        def part(idx):
            return LabeledMatrix(
                xs[idx],
                None if bo is None else bo[idx],
                None if to is None else to[idx],
            )

        net, report = train_fixed_effects(part(train_idx), part(val_idx), fc)
        net.batch_categories = list(ds.batch_categories)
        net.target_categories = list(ds.target_categories)
        net.gene_ids = list(ds.gene_ids)
        ckpt = _ckpt_path(out, model, fold)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_fe(str(ckpt), net, report, scaler)

    rdir = out / "train_reports"
    rdir.mkdir(parents=True, exist_ok=True)
    rpath = rdir / f"{model}_fold{fold}.csv"
    _write_report_csv(rpath, report)
    print(
        f"trained {model} fold {fold}: best epoch {report.best_epoch}, "
        f"val total {report.best_val_total:.6g}"
        + (" (stopped early)" if report.stopped_early else "")
    )
    return [ckpt, rpath]


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    if args.model is None:
        raise ConfigError("train needs --model, one of " + ", ".join(MODEL_VARIANTS))
    ds = _load_pre(out)
    split = _load_split(out, ds)
    _check_cardinalities(cfg, args.model, ds)
    outputs: list[Path] = []
    for fold in _folds_to_run(args, split):
        outputs += _train_one(cfg, ds, split, args.model, fold, out)
    suffix = f"_fold{args.fold}" if args.fold is not None else ""
    _write_manifest(out, f"train_{args.model}{suffix}", cfg, outputs)
    return 0


def _fold_latents(cfg: RunConfig, ds: ExpressionDataset, split: FoldSplit,
                  fold: int, out: Path) -> dict[str, np.ndarray]:
    """Latent codes of every trained variant for one fold, plus a PCA
    baseline fitted on the training rows with the fold's stored scaler."""
    spaces: dict[str, np.ndarray] = {}
    scaler = None
    for model in FE_VARIANTS:
        path = _ckpt_path(out, model, fold)
        if not path.is_file():
            continue
        net, _, sc = load_fe(str(path))
        spaces[model] = encode_fe(net, sc.transform(ds.values))
        scaler = scaler or sc
    re_path = _ckpt_path(out, "medl-re", fold)
    if re_path.is_file():
        net, _, sc = load_re(str(re_path))
        batch_idx = np.array(
            [net.batch_categories.index(b) for b in ds.batch_labels], dtype=np.intp
        )
        spaces["medl-re"] = encode_re(net, sc.transform(ds.values), batch_idx)
        scaler = scaler or sc
    if scaler is None:
        raise DataError(
            f"no checkpoints found for fold {fold} under {out / 'checkpoints'}; "
            "run `mixedae train` first"
        )
    train_idx, _, _ = split.round(fold)
    xs = scaler.transform(ds.values)
    spaces["pca"] = pca_fit(xs[train_idx], n_components=cfg.n_latent_dims).transform(xs)
    return spaces


def cmd_evaluate(cfg: RunConfig, args, out: Path) -> int:
    ds = _load_pre(out)
    split = _load_split(out, ds)
    spaces_per_fold = {
        fold: _fold_latents(cfg, ds, split, fold, out)
        for fold in _folds_to_run(args, split)
    }
    report = evaluate_spaces(ds, split, spaces_per_fold, seed=cfg.seed)
    per_fold, aggregated = out / "metrics.csv", out / "metrics_aggregated.csv"
    report.write_csv(str(per_fold))
    report.write_aggregated_csv(str(aggregated))
    n_spaces = len(next(iter(spaces_per_fold.values())))
    print(f"evaluated {n_spaces} latent spaces on {len(spaces_per_fold)} folds")
    _write_manifest(out, "evaluate", cfg, [per_fold, aggregated])
    return 0


def cmd_classify(cfg: RunConfig, args, out: Path) -> int:
    fe_name = args.model or "medl-fe"
    if fe_name not in FE_VARIANTS:
        raise ConfigError(
            f"classify combines a fixed-effects model with medl-re; "
            f"--model must be one of {FE_VARIANTS}, got {fe_name!r}"
        )
    ds = _load_pre(out)
    split = _load_split(out, ds)
    fold_models: dict[int, FoldModels] = {}
    for fold in _folds_to_run(args, split):
        fe_net, _, scaler = load_fe(
            str(_require(_ckpt_path(out, fe_name, fold), f"train --model {fe_name}"))
        )
        re_net, _, _ = load_re(
            str(_require(_ckpt_path(out, "medl-re", fold), "train --model medl-re"))
        )
        fold_models[fold] = FoldModels(fe=fe_net, re=re_net, scaler=scaler)
    targets = ("target",) + tuple(sorted(ds.extra_labels))
    result = run_experiment2(
        ds, split, fold_models, targets=targets, seed=cfg.seed, dataset_name=cfg.name
    )
    fold_path, agg_path = out / "experiment2_folds.csv", out / "experiment2.csv"
    write_experiment2_csvs(result, str(fold_path), str(agg_path))
    print(
        f"classified {len(targets)} target(s) from {fe_name}+medl-re latents "
        f"on {len(fold_models)} folds"
    )
    _write_manifest(out, "classify", cfg, [fold_path, agg_path])
    return 0


def cmd_project(cfg: RunConfig, args, out: Path) -> int:
    ds = _load_pre(out)
    split = _load_split(out, ds)
    outputs = []
    for fold in _folds_to_run(args, split):
        net, _, scaler = load_re(
            str(_require(_ckpt_path(out, "medl-re", fold), "train --model medl-re"))
        )
        _, _, test_idx = split.round(fold)
        xs = scaler.transform(ds.values[test_idx])
        path = out / f"counterfactuals_fold{fold}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "target_batch"] + list(ds.gene_ids))
            for b, batch_name in enumerate(net.batch_categories):
                projected = scaler.inverse_transform(project_counterfactual(net, xs, b))
                for row, cell in enumerate(test_idx):
                    w.writerow(
                        [ds.cell_ids[cell], batch_name]
                        + [FLOAT_FMT % v for v in projected[row]]
                    )
        print(
            f"projected {test_idx.size} fold-{fold} cells into "
            f"{len(net.batch_categories)} batches"
        )
        outputs.append(path)
    suffix = f"_fold{args.fold}" if args.fold is not None else ""
    _write_manifest(out, f"project{suffix}", cfg, outputs)
    return 0


def cmd_genomap(cfg: RunConfig, args, out: Path) -> int:
    fe_name = args.model or "medl-fe"
    if fe_name not in FE_VARIANTS:
        raise ConfigError(
            f"genomap renders a fixed-effects reconstruction; --model must be "
            f"one of {FE_VARIANTS}, got {fe_name!r}"
        )
    ds = _load_pre(out)
    split = _load_split(out, ds)
    outputs = []
    for fold in _folds_to_run(args, split):
        fe_net, _, scaler = load_fe(
            str(_require(_ckpt_path(out, fe_name, fold), f"train --model {fe_name}"))
        )
        re_net, _, _ = load_re(
            str(_require(_ckpt_path(out, "medl-re", fold), "train --model medl-re"))
        )
        train_idx, _, test_idx = split.round(fold)
        xs = scaler.transform(ds.values)
        grid = build_grid(interaction_matrix(xs[train_idx]))
        n_cells = min(GENOMAP_CELLS_PER_FIGURE, test_idx.size)
        pick = derive_rng(cfg.seed, "genomap", fold).choice(
            test_idx.size, size=n_cells, replace=False
        )
        sel = np.sort(test_idx[pick])
        panel = render_panel(
            f"fold{fold}",
            str(out / "genomaps"),
            grid,
            xs[sel],
            [ds.cell_ids[i] for i in sel],
            [ds.target_labels[i] for i in sel],
            [ds.batch_labels[i] for i in sel],
            fe_net,
            re_net,
        )
        print(
            f"rendered {len(panel.manifest_rows)} fold-{fold} images "
            f"({n_cells} cells x {len(panel.columns)} columns)"
        )
        outputs.append(out / "genomaps" / f"fold{fold}" / "manifest.csv")
    suffix = f"_fold{args.fold}" if args.fold is not None else ""
    _write_manifest(out, f"genomap{suffix}", cfg, outputs)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "classify": cmd_classify,
    "project": cmd_project,
    "genomap": cmd_genomap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixedae",
        description="Mixed-effects autoencoder pipeline for batch-confounded expression data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--preset", default=None, choices=PRESET_NAMES)
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=".", help="workspace directory")
        p.add_argument("--model", default=None, choices=MODEL_VARIANTS)
        p.add_argument("--fold", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(
            preset=args.preset,
            config_path=args.config,
            seed=args.seed,
            environ=dict(os.environ),
        )
        _echo(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except MixedAEError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
