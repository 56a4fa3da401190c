"""Run configuration: presets, file loading, environment overrides, hashing.

A configuration is a flat set of typed keys plus three nested groups
(`loss_weights` per model variant, `monitor_metric` per variant, `synthetic`
generation settings). Unknown keys are rejected everywhere, including in
environment overrides, so typos fail loudly instead of silently training
with defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

from .errors import ConfigError
from .fixed import FEConfig
from .randomfx import REConfig

MODEL_VARIANTS = ("ae", "aec", "medl-fe", "medl-aec-fe", "medl-re")
PRESET_NAMES = ("heart", "asd", "aml", "synthetic")
ENV_PREFIX = "MIXEDAE_"

_WEIGHT_KEYS = {"reconstruction", "adversarial", "target", "cluster"}
_MONITOR_VALUES = {"val_loss", "val_total_loss"}


def _default_loss_weights() -> dict:
    return {
        "ae": {"reconstruction": 1.0},
        "aec": {"reconstruction": 1.0, "target": 0.1},
        "medl-fe": {"reconstruction": 200.0, "adversarial": 1.0},
        "medl-aec-fe": {"reconstruction": 200.0, "adversarial": 1.0, "target": 1.0},
        "medl-re": {"reconstruction": 110.0, "cluster": 0.1},
    }


def _default_monitor() -> dict:
    # both labels name the same quantity here (the weighted validation
    # total); they are kept apart because the published settings list them
    return {
        "ae": "val_loss",
        "aec": "val_loss",
        "medl-fe": "val_total_loss",
        "medl-aec-fe": "val_total_loss",
        "medl-re": "val_total_loss",
    }


def _default_classifier_units() -> dict:
    return {"aec": [2], "medl-aec-fe": [2], "medl-re": [5]}


@dataclass
class RunConfig:
    name: str = "synthetic"
    seed: int = 0

    # data handling
    n_hvg: int | None = None
    min_genes_per_cell: int = 10
    min_cells_per_gene: int = 3
    counts_per_cell: float = 10_000.0
    scaling: str = "min_max"
    n_folds: int = 5

    # architecture
    layer_units: tuple = (512, 132)
    n_latent_dims: int = 2
    use_batch_norm: bool = True
    hidden_activation: str = "selu"
    last_activation: str = "linear"
    classifier_activation: str = "softmax"
    layer_units_latent_classifier: dict = field(default_factory=_default_classifier_units)
    kl_weight: float = 1e-5
    post_loc_init_scale: float = 0.1
    prior_scale: float = 0.25

    # training
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 500
    patience: int = 30
    adv_steps: int = 1
    monitor_metric: dict = field(default_factory=_default_monitor)

    # expected label cardinalities; None skips the consistency check
    n_clusters: int | None = None
    n_pred: int | None = None

    loss_weights: dict = field(default_factory=_default_loss_weights)
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_units = tuple(int(u) for u in self.layer_units)
        if self.scaling != "min_max":
            raise ConfigError(f"unsupported scaling {self.scaling!r}, only 'min_max'")
        if self.hidden_activation != "selu":
            raise ConfigError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.last_activation != "linear":
            raise ConfigError(f"unsupported last activation {self.last_activation!r}")
        if self.classifier_activation != "softmax":
            raise ConfigError(
                f"unsupported classifier activation {self.classifier_activation!r}"
            )
        if self.n_folds < 3:
            raise ConfigError(f"n_folds must be >= 3, got {self.n_folds}")
        if self.n_hvg is not None and self.n_hvg < 1:
            raise ConfigError(f"n_hvg must be >= 1 or null, got {self.n_hvg}")
        for variant in self.loss_weights:
            if variant not in MODEL_VARIANTS:
                raise ConfigError(
                    f"loss_weights names unknown model {variant!r}, "
                    f"known: {list(MODEL_VARIANTS)}"
                )
            for key, value in self.loss_weights[variant].items():
                if key not in _WEIGHT_KEYS:
                    raise ConfigError(
                        f"loss_weights[{variant!r}] has unknown term {key!r}, "
                        f"known: {sorted(_WEIGHT_KEYS)}"
                    )
                if value < 0:
                    raise ConfigError(f"loss_weights[{variant!r}][{key!r}] must be >= 0")
        for variant, label in self.monitor_metric.items():
            if variant not in MODEL_VARIANTS:
                raise ConfigError(f"monitor_metric names unknown model {variant!r}")
            if label not in _MONITOR_VALUES:
                raise ConfigError(
                    f"monitor_metric[{variant!r}] must be one of "
                    f"{sorted(_MONITOR_VALUES)}, got {label!r}"
                )
        for variant in self.layer_units_latent_classifier:
            if variant not in MODEL_VARIANTS:
                raise ConfigError(
                    f"layer_units_latent_classifier names unknown model {variant!r}"
                )
        from .synthetic import SyntheticSpec

        known = {f.name for f in fields(SyntheticSpec)}
        for key in self.synthetic:
            if key not in known:
                raise ConfigError(
                    f"synthetic has unknown key {key!r}, known: {sorted(known)}"
                )

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_units"] = list(self.layer_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**d)


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form; stable across dict ordering."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_preset(name: str) -> RunConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}, known: {list(PRESET_NAMES)}")
    text = resources.files("mixedae").joinpath(f"presets/{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def load_config_file(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return RunConfig.from_dict(data)


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings need no quoting


def apply_env_overrides(cfg: RunConfig, environ: dict) -> RunConfig:
    """Override config keys from ``MIXEDAE_*`` variables.

    ``MIXEDAE_EPOCHS=200`` sets a top-level key; double underscores descend
    into nested groups, e.g. ``MIXEDAE_LOSS_WEIGHTS__MEDL-FE__RECONSTRUCTION``
    (variant names keep their hyphens). Values parse as JSON with a plain-
    string fallback. Any ``MIXEDAE_`` variable that does not name a config
    key is an error.
    """
    d = cfg.to_dict()
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        path = [seg.lower() for seg in var[len(ENV_PREFIX):].split("__")]
        value = _parse_env_value(environ[var])
        node = d
        for seg in path[:-1]:
            if not isinstance(node, dict) or seg not in node:
                raise ConfigError(f"environment override {var} names no config key")
            node = node[seg]
        if not isinstance(node, dict):
            raise ConfigError(f"environment override {var} descends into a plain value")
        if len(path) == 1 and path[-1] not in node:
            raise ConfigError(f"environment override {var} names no config key")
        # nested leaves may be new (e.g. adding a loss term a preset omits);
        # the rebuilt config still validates them
        node[path[-1]] = value
    return RunConfig.from_dict(d)


def resolve_config(
    preset: str | None = None,
    config_path: str | None = None,
    seed: int | None = None,
    environ: dict | None = None,
) -> RunConfig:
    """Preset or file, then environment overrides, then an explicit seed."""
    if preset is not None and config_path is not None:
        raise ConfigError("give either a preset or a config file, not both")
    if config_path is not None:
        cfg = load_config_file(config_path)
    else:
        cfg = load_preset(preset if preset is not None else "synthetic")
    if environ is not None:
        cfg = apply_env_overrides(cfg, environ)
    if seed is not None:
        d = cfg.to_dict()
        d["seed"] = int(seed)
        cfg = RunConfig.from_dict(d)
    return cfg


# -- model configs derived from a run config --------------------------------


def variant_weights(cfg: RunConfig, variant: str) -> dict:
    if variant not in MODEL_VARIANTS:
        raise ConfigError(f"unknown model {variant!r}, known: {list(MODEL_VARIANTS)}")
    return dict(cfg.loss_weights.get(variant, {}))


def fe_config(
    cfg: RunConfig, variant: str, n_genes: int, n_batches: int, n_targets: int
) -> FEConfig:
    if variant == "medl-re":
        raise ConfigError("medl-re is the random-effects model, not a fixed-effects one")
    w = variant_weights(cfg, variant)
    target_units = cfg.layer_units_latent_classifier.get(variant, [2])
    return FEConfig(
        n_genes=n_genes,
        n_batches=n_batches,
        n_targets=n_targets,
        layer_units=cfg.layer_units,
        n_latent=cfg.n_latent_dims,
        lambda_mse=float(w.get("reconstruction", 1.0)),
        lambda_adv=float(w.get("adversarial", 0.0)),
        lambda_target=float(w.get("target", 0.0)),
        target_head_units=tuple(target_units),
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        patience=cfg.patience,
        adv_steps=cfg.adv_steps,
        use_batch_norm=cfg.use_batch_norm,
        seed=cfg.seed,
    )


def re_config(cfg: RunConfig, n_genes: int, n_batches: int) -> REConfig:
    w = variant_weights(cfg, "medl-re")
    cluster_units = cfg.layer_units_latent_classifier.get("medl-re", [5])
    return REConfig(
        n_genes=n_genes,
        n_batches=n_batches,
        layer_units=cfg.layer_units,
        n_latent=cfg.n_latent_dims,
        lambda_mse=float(w.get("reconstruction", 1.0)),
        lambda_cluster=float(w.get("cluster", 0.0)),
        lambda_kl=cfg.kl_weight,
        prior_scale=cfg.prior_scale,
        posterior_loc_init_scale=cfg.post_loc_init_scale,
        cluster_head_units=tuple(cluster_units),
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        patience=cfg.patience,
        seed=cfg.seed,
    )
