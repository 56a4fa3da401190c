"""Random-effects subnetwork: autoencoder with per-batch variational modulation.

Each batch owns two Gaussian posteriors over modulation vectors the width of
the first encoder layer: a multiplicative one and an additive one. After the
first layer's activation the network applies

    h <- h * (1 + u_mult[batch]) + u_add[batch]

with u drawn by reparameterized sampling in training (one draw per posterior
per forward pass) and replaced by the posterior means in eval mode. A small
classifier head on the latent code predicts the batch, pulling the latent
space toward batch separation; the objective is

    lambda_mse * MSE + lambda_cluster * CCE(batch) + lambda_kl * KL

where KL sums the divergence of every posterior entry from the shared
zero-mean prior on every forward pass, whether or not the batch appears in
the minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, DataError, ShapeError, TrainingDiverged
from .fixed import (
    EpochRecord,
    LabeledMatrix,
    TrainReport,
    _check_finite,
    _graph_cce,
    _graph_mse,
    _report_from_meta,
    _report_to_meta,
)
from .nn import Adam, Dense, EarlyStopping, Parameter, Tensor, minibatch_slices
from .nn import autodiff as ad
from .nn import functional as F
from .rng import derive_rng


def kl_gaussian(
    loc_q, scale_q, loc_p, scale_p, reversed_form: bool = False
) -> np.ndarray:
    """Elementwise KL between diagonal Gaussians q and p.

    Default is D(q || p) = log(s_p/s_q) + (s_q^2 + (m_q - m_p)^2) / (2 s_p^2) - 1/2.
    ``reversed_form`` swaps the roles, evaluating
    (1/2) [log(s_q^2/s_p^2) - 1 + (s_p^2 + (m_q - m_p)^2) / s_q^2],
    which is D(p || q) written in terms of the same four inputs. Both are 0
    when q equals p.
    """
    loc_q, scale_q, loc_p, scale_p = (
        np.asarray(v, dtype=np.float64) for v in (loc_q, scale_q, loc_p, scale_p)
    )
    if np.any(scale_q <= 0) or np.any(scale_p <= 0):
        raise DataError("kl_gaussian needs strictly positive scales")
    d2 = (loc_q - loc_p) ** 2
    if reversed_form:
        return 0.5 * (
            np.log(scale_q**2 / scale_p**2) - 1.0 + (scale_p**2 + d2) / scale_q**2
        )
    return np.log(scale_p / scale_q) + (scale_q**2 + d2) / (2.0 * scale_p**2) - 0.5


def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ConfigError(f"softplus inverse needs y > 0, got {y}")
    return float(np.log(np.expm1(y)))


@dataclass
class REConfig:
    n_genes: int
    n_batches: int
    layer_units: tuple = (512, 132)
    n_latent: int = 2
    lambda_mse: float = 110.0
    lambda_cluster: float = 0.1
    lambda_kl: float = 1e-5
    prior_scale: float = 0.25
    posterior_loc_init_scale: float = 0.1
    cluster_head_units: tuple = (5,)
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 500
    patience: int = 30
    kl_reversed: bool = False
    seed: int = 0

    def __post_init__(self):
        self.layer_units = tuple(int(u) for u in self.layer_units)
        self.cluster_head_units = tuple(int(u) for u in self.cluster_head_units)
        if self.n_genes < 1:
            raise ConfigError(f"n_genes must be >= 1, got {self.n_genes}")
        if self.n_batches < 1:
            raise ConfigError(f"n_batches must be >= 1, got {self.n_batches}")
        if not self.layer_units or any(u < 1 for u in self.layer_units):
            raise ConfigError(f"layer_units must be positive, got {self.layer_units}")
        if self.prior_scale <= 0:
            raise ConfigError(f"prior_scale must be > 0, got {self.prior_scale}")
        for name in ("lambda_mse", "lambda_cluster", "lambda_kl", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1")


class GaussianEffectTable:
    """Per-batch posteriors over one modulation vector (rows = batches).

    Scales are stored pre-softplus so positivity is structural. They start at
    half the prior scale; locations start as small Gaussian draws.
    """

    def __init__(self, cfg: REConfig, rng: np.random.Generator, name: str):
        shape = (cfg.n_batches, cfg.layer_units[0])
        self.loc = Parameter(
            rng.normal(0.0, cfg.posterior_loc_init_scale, size=shape), f"{name}.loc"
        )
        self.raw_scale = Parameter(
            np.full(shape, softplus_inverse(cfg.prior_scale / 2.0)), f"{name}.raw_scale"
        )
        self.name = name

    def scale_tensor(self) -> Tensor:
        return ad.softplus(self.raw_scale)

    def scales(self) -> np.ndarray:
        return np.logaddexp(0.0, self.raw_scale.data)

    def draw(self, rng: np.random.Generator) -> Tensor:
        """One reparameterized sample per posterior: (n_batches, width)."""
        eps = rng.standard_normal(self.loc.data.shape)
        return self.draw_with(eps)

    def draw_with(self, eps: np.ndarray) -> Tensor:
        return ad.add(self.loc, ad.mul(self.scale_tensor(), ad.constant(eps)))

    def graph_kl(self, prior_scale: float, reversed_form: bool) -> Tensor:
        """Summed KL of every posterior entry from N(0, prior_scale^2)."""
        s = self.scale_tensor()
        p = ad.constant(prior_scale)
        d2 = ad.square(self.loc)
        if reversed_form:
            inner = ad.sub(ad.log(ad.div(ad.square(s), ad.square(p))), ad.constant(1.0))
            inner = ad.add(inner, ad.div(ad.add(ad.square(p), d2), ad.square(s)))
            return ad.mul(ad.sum_all(inner), ad.constant(0.5))
        term = ad.add(
            ad.log(ad.div(p, s)),
            ad.div(ad.add(ad.square(s), d2), ad.constant(2.0 * prior_scale**2)),
        )
        return ad.sum_all(ad.sub(term, ad.constant(0.5)))

    def parameters(self) -> list[Parameter]:
        return [self.loc, self.raw_scale]


class REModel:
    def __init__(self, cfg: REConfig):
        self.cfg = cfg
        self.batch_categories: list | None = None
        self.gene_ids: list | None = None
        rng = derive_rng(cfg.seed, "init")

        dims = [cfg.n_genes] + list(cfg.layer_units)
        self.encoder = [
            Dense(dims[i], dims[i + 1], "selu", rng, name=f"enc{i}")
            for i in range(len(cfg.layer_units))
        ]
        self.latent_layer = Dense(dims[-1], cfg.n_latent, "linear", rng, name="latent")
        rev = [cfg.n_latent] + list(reversed(cfg.layer_units)) + [cfg.n_genes]
        self.decoder = [
            Dense(rev[i], rev[i + 1], "selu" if i < len(rev) - 2 else "linear", rng,
                  name=f"dec{i}")
            for i in range(len(rev) - 1)
        ]
        self.cluster_head: list[Dense] = []
        cdims = [cfg.n_latent] + list(cfg.cluster_head_units)
        for i in range(len(cfg.cluster_head_units)):
            self.cluster_head.append(Dense(cdims[i], cdims[i + 1], "selu", rng, name=f"clu{i}"))
        self.cluster_head.append(
            Dense(cdims[-1], cfg.n_batches, "softmax", rng, name="clu_out")
        )
        self.effects_mult = GaussianEffectTable(cfg, rng, "mult")
        self.effects_add = GaussianEffectTable(cfg, rng, "add")

    def _check_batch_idx(self, batch_idx: np.ndarray, n: int) -> np.ndarray:
        batch_idx = np.asarray(batch_idx)
        if batch_idx.shape != (n,):
            raise ShapeError("batch index vector", (n,), batch_idx.shape)
        if batch_idx.min() < 0 or batch_idx.max() >= self.cfg.n_batches:
            raise DataError(
                f"batch index outside 0..{self.cfg.n_batches - 1}: "
                f"{int(batch_idx.min())}..{int(batch_idx.max())}"
            )
        return batch_idx.astype(np.intp)

    def forward(
        self,
        x: Tensor,
        batch_idx: np.ndarray,
        train: bool,
        noise_rng: np.random.Generator | None = None,
        noise: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> dict:
        """Full pass. Train mode needs a noise source (rng or fixed draws)."""
        batch_idx = self._check_batch_idx(batch_idx, x.data.shape[0])
        h = self.encoder[0].forward(x)
        if train:
            if noise is not None:
                u_mult = self.effects_mult.draw_with(noise[0])
                u_add = self.effects_add.draw_with(noise[1])
            elif noise_rng is not None:
                u_mult = self.effects_mult.draw(noise_rng)
                u_add = self.effects_add.draw(noise_rng)
            else:
                raise ConfigError("train-mode forward needs noise_rng or fixed noise")
        else:
            u_mult = self.effects_mult.loc
            u_add = self.effects_add.loc
        gain = ad.add(ad.constant(1.0), ad.gather_rows(u_mult, batch_idx))
        h = ad.add(ad.mul(h, gain), ad.gather_rows(u_add, batch_idx))
        for layer in self.encoder[1:]:
            h = layer.forward(h)
        latent = self.latent_layer.forward(h)
        probs = latent
        for layer in self.cluster_head:
            probs = layer.forward(probs)
        recon = latent
        for layer in self.decoder:
            recon = layer.forward(recon)
        return {"latent": latent, "recon": recon, "cluster_probs": probs}

    def graph_kl(self) -> Tensor:
        return ad.add(
            self.effects_mult.graph_kl(self.cfg.prior_scale, self.cfg.kl_reversed),
            self.effects_add.graph_kl(self.cfg.prior_scale, self.cfg.kl_reversed),
        )

    def kl_value(self) -> float:
        total = 0.0
        for table in (self.effects_mult, self.effects_add):
            total += float(
                kl_gaussian(
                    table.loc.data,
                    table.scales(),
                    0.0,
                    self.cfg.prior_scale,
                    reversed_form=self.cfg.kl_reversed,
                ).sum()
            )
        return total

    def parameters(self) -> list[Parameter]:
        ps = []
        for layer in self.encoder + [self.latent_layer] + self.decoder + self.cluster_head:
            ps += layer.parameters()
        ps += self.effects_mult.parameters() + self.effects_add.parameters()
        return ps

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data.copy()) for p in self.parameters()]

    def load_state_arrays(self, arrays: dict) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise DataError(f"checkpoint is missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ShapeError(f"parameter {p.name}", p.data.shape, arrays[p.name].shape)
            p.data = arrays[p.name].copy()


def re_loss_components(
    x: np.ndarray,
    xhat: np.ndarray,
    batch_onehot: np.ndarray,
    cluster_probs: np.ndarray,
    kl_value: float,
    cfg: REConfig,
) -> dict:
    comps = {
        "mse": F.mse_loss(x, xhat),
        "cce_batch": F.cce_loss(batch_onehot, cluster_probs),
        "kl": float(kl_value),
    }
    comps["total"] = (
        cfg.lambda_mse * comps["mse"]
        + cfg.lambda_cluster * comps["cce_batch"]
        + cfg.lambda_kl * comps["kl"]
    )
    return comps


def _re_eval_components(model: REModel, data: LabeledMatrix) -> dict:
    batch_idx = np.argmax(data.batch_onehot, axis=1)
    out = model.forward(Tensor(data.x), batch_idx, train=False)
    return re_loss_components(
        data.x,
        out["recon"].data,
        data.batch_onehot,
        out["cluster_probs"].data,
        model.kl_value(),
        model.cfg,
    )


def train_random_effects(
    train: LabeledMatrix, val: LabeledMatrix, cfg: REConfig
) -> tuple[REModel, TrainReport]:
    """Train the random-effects model; returns best-validation-epoch weights."""
    for name, part in (("train", train), ("val", val)):
        if part.x.shape[1] != cfg.n_genes:
            raise ShapeError(f"{name} genes", cfg.n_genes, part.x.shape[1])
        if part.batch_onehot is None:
            raise DataError(f"random-effects training needs batch labels in {name} data")
        if part.batch_onehot.shape[1] != cfg.n_batches:
            raise ShapeError(f"{name} batch columns", cfg.n_batches, part.batch_onehot.shape[1])
    if train.n < 2:
        raise DataError(f"need at least 2 training rows, got {train.n}")

    model = REModel(cfg)
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    best_state: dict | None = None
    train_idx_all = np.argmax(train.batch_onehot, axis=1)

    for epoch in range(cfg.epochs):
        shuffle_rng = derive_rng(cfg.seed, "shuffle", epoch)
        sums = {"mse": 0.0, "cce_batch": 0.0, "kl": 0.0, "total": 0.0}
        seen = 0
        for step, block in enumerate(minibatch_slices(train.n, cfg.batch_size, shuffle_rng)):
            xb = Tensor(train.x[block])
            zb = train.batch_onehot[block]
            noise_rng = derive_rng(cfg.seed, "noise", epoch, step)
            out = model.forward(xb, train_idx_all[block], train=True, noise_rng=noise_rng)

            mse_t = _graph_mse(xb, out["recon"])
            cce_t = _graph_cce(zb, out["cluster_probs"])
            kl_t = model.graph_kl()
            comps = {
                "mse": _check_finite("mse", mse_t.item(), epoch),
                "cce_batch": _check_finite("cce_batch", cce_t.item(), epoch),
                "kl": _check_finite("kl", kl_t.item(), epoch),
            }
            total_t = ad.add(
                ad.add(
                    ad.mul(mse_t, ad.constant(cfg.lambda_mse)),
                    ad.mul(cce_t, ad.constant(cfg.lambda_cluster)),
                ),
                ad.mul(kl_t, ad.constant(cfg.lambda_kl)),
            )
            comps["total"] = _check_finite("total", total_t.item(), epoch)
            total_t.backward()
            opt.step()

            w = len(block)
            seen += w
            for key in sums:
                sums[key] += comps[key] * w

        train_comps = {k: v / seen for k, v in sums.items()}
        val_comps = _re_eval_components(model, val)
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


def encode_re(model: REModel, x: np.ndarray, batch_idx: np.ndarray) -> np.ndarray:
    """Eval-mode latent codes; modulation uses posterior means."""
    return model.forward(Tensor(np.asarray(x, dtype=np.float64)), batch_idx, train=False)[
        "latent"
    ].data


def project_counterfactual(model: REModel, x: np.ndarray, target_batch: int) -> np.ndarray:
    """Reconstruct every row as if it had been observed in ``target_batch``.

    Projecting a cell into its own batch is exactly the eval-mode
    reconstruction: the same forward pass with the same batch index.
    """
    if not 0 <= target_batch < model.cfg.n_batches:
        raise DataError(
            f"target batch {target_batch} outside 0..{model.cfg.n_batches - 1}"
        )
    x = np.asarray(x, dtype=np.float64)
    idx = np.full(x.shape[0], target_batch, dtype=np.intp)
    return model.forward(Tensor(x), idx, train=False)["recon"].data


def save_re(path: str, model: REModel, report: TrainReport | None = None, scaler=None) -> None:
    from dataclasses import asdict

    meta = {
        "config": asdict(model.cfg),
        "batch_categories": model.batch_categories,
        "gene_ids": model.gene_ids,
        "report": None if report is None else _report_to_meta(report),
    }
    arrays = model.state_arrays()
    if scaler is not None:
        arrays += scaler.state_arrays()
    checkpoint.save_state(path, "re", meta, arrays)


def load_re(path: str):
    """Returns (model, report or None, scaler or None)."""
    from .data import MinMaxScaler

    kind, meta, arrays = checkpoint.load_state(path)
    if kind != "re":
        raise DataError(f"{path}: checkpoint holds a {kind!r} model, not 're'")
    cfg_dict = dict(meta["config"])
    cfg_dict["layer_units"] = tuple(cfg_dict["layer_units"])
    cfg_dict["cluster_head_units"] = tuple(cfg_dict["cluster_head_units"])
    model = REModel(REConfig(**cfg_dict))
    model.load_state_arrays(arrays)
    model.batch_categories = meta.get("batch_categories")
    model.gene_ids = meta.get("gene_ids")
    report = None if meta.get("report") is None else _report_from_meta(meta["report"])
    scaler = MinMaxScaler.from_state(arrays) if "scaler.data_min" in arrays else None
    return model, report, scaler
