"""Experiment configuration: a flat key=value document with dotted sections.

Parsing is strict: an unknown key, a bad value, or a missing required key is
a ConfigError, so typos in experiment definitions cannot pass silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .hypersphere import HypersphereConfig
from .netblocks import ArchConfig

TASKS = ("completion", "classification", "both")
STRATEGIES = ("equal", "pcgrad", "uncertainty", "fixed")
OPTIMIZERS = ("sgd", "adam", "rmsprop")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_train: str = ""
    dataset_test: str = ""
    hyper_enabled: bool = True
    embedding_dim: int = 128
    grid_side: int = 16
    num_classes: int = 4
    hyper_mlp_layers: int = 1
    hyper_use_relu_bn: bool = False
    hyper_norm_p: int = 2
    hyper_output_dim: int = 0  # 0 = same as embedding_dim
    hyper_eps_guard: float = 1e-12
    tasks: str = "completion"
    strategy: str = "equal"
    strategy_weights: tuple = (1.0, 1.0)
    optim_kind: str = "adam"
    lr: float = 0.005
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    out_dir: str = "runs/out"

    def validate(self) -> "ExperimentConfig":
        if not self.dataset_train or not self.dataset_test:
            raise ConfigError("dataset.train and dataset.test are required")
        if self.tasks not in TASKS:
            raise ConfigError(f"tasks must be one of {TASKS}, got {self.tasks!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.optim_kind not in OPTIMIZERS:
            raise ConfigError(f"optim.kind must be one of {OPTIMIZERS}, got {self.optim_kind!r}")
        if self.lr < 0.0:
            raise ConfigError("optim.lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.embedding_dim < 1 or self.grid_side < 1 or self.num_classes < 1:
            raise ConfigError("model dims must be >= 1")
        if self.strategy == "fixed" and self.tasks != "both":
            raise ConfigError("strategy=fixed only applies to tasks=both")
        try:
            self.arch()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def hyper_config(self) -> HypersphereConfig | None:
        if not self.hyper_enabled:
            return None
        out = self.hyper_output_dim or self.embedding_dim
        return HypersphereConfig(
            input_dim=self.embedding_dim,
            output_dim=out,
            mlp_layers=self.hyper_mlp_layers,
            use_relu_bn=self.hyper_use_relu_bn,
            norm_p=self.hyper_norm_p,
            eps_guard=self.hyper_eps_guard,
        )

    def arch(self) -> ArchConfig:
        return ArchConfig(
            embedding_dim=self.embedding_dim,
            num_classes=self.num_classes,
            grid_side=self.grid_side,
            hyper=self.hyper_config(),
            completion=self.tasks in ("completion", "both"),
            classification=self.tasks in ("classification", "both"),
        )

    @property
    def task_names(self) -> tuple:
        if self.tasks == "both":
            return ("completion", "classification")
        return (self.tasks,)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "on", "yes", "1"):
        return True
    if low in ("false", "off", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_weights(raw: str, key: str) -> tuple:
    try:
        return tuple(float(p) for p in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated reals, got {raw!r}") from None


_FIELDS = {
    "dataset.train": ("dataset_train", str),
    "dataset.test": ("dataset_test", str),
    "model.hyper": ("hyper_enabled", _parse_bool),
    "model.embedding_dim": ("embedding_dim", int),
    "model.grid_side": ("grid_side", int),
    "model.num_classes": ("num_classes", int),
    "hyper.mlp_layers": ("hyper_mlp_layers", int),
    "hyper.use_relu_bn": ("hyper_use_relu_bn", _parse_bool),
    "hyper.norm_p": ("hyper_norm_p", int),
    "hyper.output_dim": ("hyper_output_dim", int),
    "hyper.eps_guard": ("hyper_eps_guard", float),
    "tasks": ("tasks", str),
    "strategy": ("strategy", str),
    "strategy.weights": ("strategy_weights", _parse_weights),
    "optim.kind": ("optim_kind", str),
    "optim.lr": ("lr", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "seed": ("seed", int),
    "out": ("out_dir", str),
}


def _apply(cfg_kwargs: dict, key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    attr, conv = _FIELDS[key]
    if conv in (_parse_bool, _parse_weights):
        cfg_kwargs[attr] = conv(raw, key)
    else:
        try:
            cfg_kwargs[attr] = conv(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {conv.__name__}") from None


def parse_config_text(text: str, overrides=()) -> ExperimentConfig:
    kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        _apply(kwargs, key.strip(), raw.strip())
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        _apply(kwargs, key.strip(), raw.strip())
    return ExperimentConfig(**kwargs).validate()


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, overrides)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Render a config back to the document format (round-trips via parse)."""
    values = {
        "dataset.train": cfg.dataset_train,
        "dataset.test": cfg.dataset_test,
        "model.hyper": "on" if cfg.hyper_enabled else "off",
        "model.embedding_dim": cfg.embedding_dim,
        "model.grid_side": cfg.grid_side,
        "model.num_classes": cfg.num_classes,
        "hyper.mlp_layers": cfg.hyper_mlp_layers,
        "hyper.use_relu_bn": "on" if cfg.hyper_use_relu_bn else "off",
        "hyper.norm_p": cfg.hyper_norm_p,
        "hyper.output_dim": cfg.hyper_output_dim,
        "hyper.eps_guard": cfg.hyper_eps_guard,
        "tasks": cfg.tasks,
        "strategy": cfg.strategy,
        "strategy.weights": ",".join(repr(w) for w in cfg.strategy_weights),
        "optim.kind": cfg.optim_kind,
        "optim.lr": cfg.lr,
        "train.epochs": cfg.epochs,
        "train.batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "out": cfg.out_dir,
    }
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def with_updates(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return replace(cfg, **kwargs).validate()
