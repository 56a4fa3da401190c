"""Fixed-effects subnetwork: tied-weight autoencoder with optional heads.

One architecture covers four variants, selected purely by loss weights:

================  ============  ==============
variant           adversary     target head
================  ============  ==============
ae                off           off
aec               off           on
medl-fe           on            off
medl-aec-fe       on            on
================  ============  ==============

The adversary is a single dense softmax reading the final latent code and
trying to recover the batch. Training alternates per minibatch: the
adversary updates first (encoder frozen, batch-norm statistics untouched),
then the autoencoder and target head update against the combined objective

    lambda_mse * MSE - lambda_adv * CCE(batch) + lambda_target * CCE(target)

where gradient flows through the frozen adversary, pushing the encoder
toward batch-uninformative codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .nn import Adam, BatchNorm, Dense, EarlyStopping, Tensor, frozen, minibatch_slices
from .nn import autodiff as ad
from .nn import functional as F
from .rng import derive_rng


@dataclass
class FEConfig:
    n_genes: int
    n_batches: int = 0
    n_targets: int = 0
    layer_units: tuple = (512, 132)
    n_latent: int = 2
    lambda_mse: float = 1.0
    lambda_adv: float = 0.0
    lambda_target: float = 0.0
    target_head_units: tuple = (2,)
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 500
    patience: int = 30
    adv_steps: int = 1
    use_batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.layer_units = tuple(int(u) for u in self.layer_units)
        self.target_head_units = tuple(int(u) for u in self.target_head_units)
        if self.n_genes < 1:
            raise ConfigError(f"n_genes must be >= 1, got {self.n_genes}")
        if not self.layer_units or any(u < 1 for u in self.layer_units):
            raise ConfigError(f"layer_units must be positive, got {self.layer_units}")
        if self.n_latent < 1:
            raise ConfigError(f"n_latent must be >= 1, got {self.n_latent}")
        for name in ("lambda_mse", "lambda_adv", "lambda_target", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lambda_adv > 0 and self.n_batches < 2:
            raise ConfigError("adversarial training needs n_batches >= 2")
        if self.lambda_target > 0 and self.n_targets < 2:
            raise ConfigError("a target head needs n_targets >= 2")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1 or self.patience < 1 or self.adv_steps < 1:
            raise ConfigError("epochs, patience and adv_steps must be >= 1")

    @property
    def variant(self) -> str:
        if self.lambda_adv > 0:
            return "medl-aec-fe" if self.lambda_target > 0 else "medl-fe"
        return "aec" if self.lambda_target > 0 else "ae"


@dataclass
class LabeledMatrix:
    """Scaled expression rows plus optional one-hot labels, kept aligned."""

    x: np.ndarray
    batch_onehot: np.ndarray | None = None
    target_onehot: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"expected a 2-D matrix, got shape {self.x.shape}")
        for name in ("batch_onehot", "target_onehot"):
            enc = getattr(self, name)
            if enc is None:
                continue
            enc = np.asarray(enc, dtype=np.float64)
            if enc.shape[0] != self.x.shape[0]:
                raise DataError(f"{name} has {enc.shape[0]} rows for {self.x.shape[0]} cells")
            F.check_one_hot(enc, name)
            setattr(self, name, enc)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class EpochRecord:
    epoch: int
    train: dict
    val: dict


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_total: float = np.inf
    stopped_early: bool = False

    def series(self, split: str, key: str) -> list:
        return [getattr(rec, split)[key] for rec in self.epochs]


class FEModel:
    """The network; construction order of layers fixes the init draw order."""

    def __init__(self, cfg: FEConfig):
        self.cfg = cfg
        self.batch_categories: list | None = None
        self.target_categories: list | None = None
        self.gene_ids: list | None = None
        rng = derive_rng(cfg.seed, "init")

        self.encoder: list[tuple[Dense, BatchNorm | None]] = []
        dims = [cfg.n_genes] + list(cfg.layer_units)
        for i in range(len(cfg.layer_units)):
            dense = Dense(dims[i], dims[i + 1], "selu", rng, name=f"enc{i}")
            bn = (
                BatchNorm(dims[i + 1], cfg.bn_momentum, cfg.bn_eps, name=f"enc{i}.bn")
                if cfg.use_batch_norm
                else None
            )
            self.encoder.append((dense, bn))
        self.latent_layer = Dense(dims[-1], cfg.n_latent, "linear", rng, name="latent")

        # decoder mirrors the encoder through transposed weights; only the
        # biases and batch-norm parameters are its own
        self.decoder: list[tuple[Dense, BatchNorm | None]] = []
        mirror = [self.latent_layer] + [d for d, _ in reversed(self.encoder)]
        widths = list(reversed(cfg.layer_units)) + [cfg.n_genes]
        ins = [cfg.n_latent] + widths[:-1]
        for i, src in enumerate(mirror):
            last = i == len(mirror) - 1
            act = "linear" if last else "selu"
            dense = Dense(ins[i], widths[i], act, tied_source=src, name=f"dec{i}")
            bn = (
                BatchNorm(widths[i], cfg.bn_momentum, cfg.bn_eps, name=f"dec{i}.bn")
                if cfg.use_batch_norm and not last
                else None
            )
            self.decoder.append((dense, bn))

        self.adversary = (
            Dense(cfg.n_latent, cfg.n_batches, "softmax", rng, name="adv")
            if cfg.lambda_adv > 0
            else None
        )
        self.target_head: list[Dense] = []
        if cfg.lambda_target > 0:
            tdims = [cfg.n_latent] + list(cfg.target_head_units)
            for i in range(len(cfg.target_head_units)):
                self.target_head.append(
                    Dense(tdims[i], tdims[i + 1], "selu", rng, name=f"target{i}")
                )
            self.target_head.append(
                Dense(tdims[-1], cfg.n_targets, "softmax", rng, name="target_out")
            )

    # -- forward pieces ----------------------------------------------------

    def encode(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        h = x
        for dense, bn in self.encoder:
            h = dense.forward(h)
            if bn is not None:
                h = bn.forward(h, train=train, update_stats=update_stats)
        return self.latent_layer.forward(h)

    def decode(self, latent: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        h = latent
        for dense, bn in self.decoder:
            h = dense.forward(h)
            if bn is not None:
                h = bn.forward(h, train=train, update_stats=update_stats)
        return h

    def adversary_probs(self, latent: Tensor) -> Tensor:
        if self.adversary is None:
            raise ConfigError("this variant has no adversary head")
        return self.adversary.forward(latent)

    def target_probs(self, latent: Tensor) -> Tensor:
        if not self.target_head:
            raise ConfigError("this variant has no target head")
        h = latent
        for layer in self.target_head:
            h = layer.forward(h)
        return h

    # -- parameter groups --------------------------------------------------

    def main_parameters(self):
        ps = []
        for dense, bn in self.encoder + self.decoder:
            ps += dense.parameters()
            if bn is not None:
                ps += bn.parameters()
        ps += self.latent_layer.parameters()
        for layer in self.target_head:
            ps += layer.parameters()
        return ps

    def adversary_parameters(self):
        return [] if self.adversary is None else self.adversary.parameters()

    def parameters(self):
        return self.main_parameters() + self.adversary_parameters()

    # -- state -------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(p.name, p.data.copy()) for p in self.parameters()]
        for _, bn in self.encoder + self.decoder:
            if bn is not None:
                out.append((f"{bn.name}.running_mean", bn.running_mean.copy()))
                out.append((f"{bn.name}.running_var", bn.running_var.copy()))
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise DataError(f"checkpoint is missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ShapeError(f"parameter {p.name}", p.data.shape, arrays[p.name].shape)
            p.data = arrays[p.name].copy()
        for _, bn in self.encoder + self.decoder:
            if bn is not None:
                bn.running_mean = arrays[f"{bn.name}.running_mean"].copy()
                bn.running_var = arrays[f"{bn.name}.running_var"].copy()


def fe_loss_components(
    x: np.ndarray,
    xhat: np.ndarray,
    cfg: FEConfig,
    batch_onehot: np.ndarray | None = None,
    batch_probs: np.ndarray | None = None,
    target_onehot: np.ndarray | None = None,
    target_probs: np.ndarray | None = None,
) -> dict:
    """Weighted total plus raw component losses, on plain arrays.

    The adversarial cross-entropy enters the total negated: a sharper
    adversary raises the autoencoder's objective, so increasing lambda_adv
    strictly lowers the total while CCE is positive.
    """
    comps = {"mse": F.mse_loss(x, xhat), "cce_batch": 0.0, "cce_target": 0.0}
    total = cfg.lambda_mse * comps["mse"]
    if cfg.lambda_adv > 0:
        if batch_onehot is None or batch_probs is None:
            raise DataError("lambda_adv > 0 needs batch labels and adversary probabilities")
        comps["cce_batch"] = F.cce_loss(batch_onehot, batch_probs)
        total -= cfg.lambda_adv * comps["cce_batch"]
    if cfg.lambda_target > 0:
        if target_onehot is None or target_probs is None:
            raise DataError("lambda_target > 0 needs target labels and probabilities")
        comps["cce_target"] = F.cce_loss(target_onehot, target_probs)
        total += cfg.lambda_target * comps["cce_target"]
    comps["total"] = total
    return comps


def _graph_mse(x: Tensor, xhat: Tensor) -> Tensor:
    r = ad.sub(x, xhat)
    return ad.mul(ad.sum_all(ad.square(r)), ad.constant(1.0 / x.data.shape[0]))


def _graph_cce(onehot: np.ndarray, probs: Tensor) -> Tensor:
    p = ad.clip(probs, F.PROB_FLOOR, 1.0)
    picked = ad.mul(ad.constant(onehot), ad.log(p))
    return ad.mul(ad.sum_all(picked), ad.constant(-1.0 / onehot.shape[0]))


def _check_finite(name: str, value: float, epoch: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(name, epoch, value)
    return value


def _fe_eval_components(model: FEModel, data: LabeledMatrix) -> dict:
    cfg = model.cfg
    lat = model.encode(Tensor(data.x), train=False)
    xhat = model.decode(lat, train=False)
    kw = {}
    if cfg.lambda_adv > 0:
        kw["batch_onehot"] = data.batch_onehot
        kw["batch_probs"] = model.adversary_probs(lat).data
    if cfg.lambda_target > 0:
        kw["target_onehot"] = data.target_onehot
        kw["target_probs"] = model.target_probs(lat).data
    return fe_loss_components(data.x, xhat.data, cfg, **kw)


def train_fixed_effects(
    train: LabeledMatrix, val: LabeledMatrix, cfg: FEConfig
) -> tuple[FEModel, TrainReport]:
    """Train a fixed-effects model with early stopping on the validation total.

    The returned model carries the weights of the best validation epoch, not
    the last one.
    """
    for name, part in (("train", train), ("val", val)):
        if part.x.shape[1] != cfg.n_genes:
            raise ShapeError(f"{name} genes", cfg.n_genes, part.x.shape[1])
        if cfg.lambda_adv > 0 and part.batch_onehot is None:
            raise DataError(f"lambda_adv > 0 but {name} data has no batch labels")
        if cfg.lambda_adv > 0 and part.batch_onehot.shape[1] != cfg.n_batches:
            raise ShapeError(f"{name} batch columns", cfg.n_batches, part.batch_onehot.shape[1])
        if cfg.lambda_target > 0 and part.target_onehot is None:
            raise DataError(f"lambda_target > 0 but {name} data has no target labels")
        if cfg.lambda_target > 0 and part.target_onehot.shape[1] != cfg.n_targets:
            raise ShapeError(f"{name} target columns", cfg.n_targets, part.target_onehot.shape[1])
    if train.n < 2:
        raise DataError(f"need at least 2 training rows, got {train.n}")

    model = FEModel(cfg)
    main_params = model.main_parameters()
    adv_params = model.adversary_parameters()
    opt_main = Adam(main_params, lr=cfg.learning_rate)
    opt_adv = Adam(adv_params, lr=cfg.learning_rate) if adv_params else None

    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    best_state: dict | None = None

    for epoch in range(cfg.epochs):
        shuffle_rng = derive_rng(cfg.seed, "shuffle", epoch)
        sums = {"mse": 0.0, "cce_batch": 0.0, "cce_target": 0.0, "total": 0.0}
        seen = 0
        for block in minibatch_slices(train.n, cfg.batch_size, shuffle_rng):
            xb = Tensor(train.x[block])
            zb = train.batch_onehot[block] if train.batch_onehot is not None else None
            yb = train.target_onehot[block] if train.target_onehot is not None else None

            if opt_adv is not None:
                for _ in range(cfg.adv_steps):
                    with frozen(main_params):
                        lat = model.encode(xb, train=True, update_stats=False)
                        adv_loss = _graph_cce(zb, model.adversary_probs(lat))
                        adv_loss.backward()
                        opt_adv.step()

            with frozen(adv_params):
                lat = model.encode(xb, train=True, update_stats=True)
                xhat = model.decode(lat, train=True, update_stats=True)
                mse_t = _graph_mse(xb, xhat)
                comps = {"mse": _check_finite("mse", mse_t.item(), epoch)}
                total_t = ad.mul(mse_t, ad.constant(cfg.lambda_mse))
                if cfg.lambda_adv > 0:
                    cce_b = _graph_cce(zb, model.adversary_probs(lat))
                    comps["cce_batch"] = _check_finite("cce_batch", cce_b.item(), epoch)
                    total_t = ad.sub(total_t, ad.mul(cce_b, ad.constant(cfg.lambda_adv)))
                else:
                    comps["cce_batch"] = 0.0
                if cfg.lambda_target > 0:
                    cce_y = _graph_cce(yb, model.target_probs(lat))
                    comps["cce_target"] = _check_finite("cce_target", cce_y.item(), epoch)
                    total_t = ad.add(total_t, ad.mul(cce_y, ad.constant(cfg.lambda_target)))
                else:
                    comps["cce_target"] = 0.0
                comps["total"] = _check_finite("total", total_t.item(), epoch)
                total_t.backward()
                opt_main.step()

            w = len(block)
            seen += w
            for key in sums:
                sums[key] += comps[key] * w

        train_comps = {k: v / seen for k, v in sums.items()}
        val_comps = _fe_eval_components(model, val)
        _check_finite("val_total", val_comps["total"], epoch)
        report.epochs.append(EpochRecord(epoch, train_comps, val_comps))

        if stopper.update(epoch, val_comps["total"]):
            best_state = dict(model.state_arrays())
        if stopper.should_stop:
            report.stopped_early = True
            break

    model.load_state_arrays(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_val_total = stopper.best
    return model, report


def encode_fe(model: FEModel, x: np.ndarray) -> np.ndarray:
    """Latent codes in eval mode. No input-range check is applied: callers
    are responsible for feeding data scaled the way the model was trained."""
    x = np.asarray(x, dtype=np.float64)
    return model.encode(Tensor(x), train=False).data


def reconstruct_fe(model: FEModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return model.decode(model.encode(Tensor(x), train=False), train=False).data


# -- persistence -----------------------------------------------------------


def _report_to_meta(report: TrainReport) -> dict:
    return {
        "best_epoch": report.best_epoch,
        "best_val_total": report.best_val_total,
        "stopped_early": report.stopped_early,
        "epochs": [{"epoch": r.epoch, "train": r.train, "val": r.val} for r in report.epochs],
    }


def _report_from_meta(meta: dict) -> TrainReport:
    report = TrainReport(
        best_epoch=meta["best_epoch"],
        best_val_total=meta["best_val_total"],
        stopped_early=meta["stopped_early"],
    )
    report.epochs = [EpochRecord(r["epoch"], r["train"], r["val"]) for r in meta["epochs"]]
    return report


def save_fe(path: str, model: FEModel, report: TrainReport | None = None, scaler=None) -> None:
    from dataclasses import asdict

    meta = {
        "config": asdict(model.cfg),
        "batch_categories": model.batch_categories,
        "target_categories": model.target_categories,
        "gene_ids": model.gene_ids,
        "report": None if report is None else _report_to_meta(report),
    }
    arrays = model.state_arrays()
    if scaler is not None:
        arrays += scaler.state_arrays()
    checkpoint.save_state(path, "fe", meta, arrays)


def load_fe(path: str):
    """Returns (model, report or None, scaler or None)."""
    from .data import MinMaxScaler

    kind, meta, arrays = checkpoint.load_state(path)
    if kind != "fe":
        raise DataError(f"{path}: checkpoint holds a {kind!r} model, not 'fe'")
    cfg_dict = dict(meta["config"])
    cfg_dict["layer_units"] = tuple(cfg_dict["layer_units"])
    cfg_dict["target_head_units"] = tuple(cfg_dict["target_head_units"])
    model = FEModel(FEConfig(**cfg_dict))
    model.load_state_arrays(arrays)
    model.batch_categories = meta.get("batch_categories")
    model.target_categories = meta.get("target_categories")
    model.gene_ids = meta.get("gene_ids")
    report = None if meta.get("report") is None else _report_from_meta(meta["report"])
    scaler = MinMaxScaler.from_state(arrays) if "scaler.data_min" in arrays else None
    return model, report, scaler
