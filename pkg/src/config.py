"""
Run configuration: a flat YAML mapping of dotted keys, e.g.::

    encoder.preset: vit_toy
    lora.enabled: true
    lora.rank: 4
    lora.targets: query,value
    train.epochs: 20

Nested mappings are accepted too and flattened on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .model import CrackSAM, build_model
from .peft import AdapterConfig, DeltaSpec, FreezeMask, LoRAConfig, attach_deltas
from .train import TrainConfig
from .utils import is_valid_granularity, parse_targets

RESOLVED_CONFIG_FILE = "resolved_config.yaml"

DEFAULTS = {
    "run.seed": 0,
    "run.output_dir": "./runs",
    "run.log_level": "WARNING",
    "encoder.preset": "vit_toy",
    "encoder.image_size": None,
    "encoder.window_size": None,
    "decoder.num_class": 2,
    "adapter.enabled": False,
    "adapter.middle_dim": 32,
    "adapter.scaling": 0.2,
    "adapter.placement": "sequential,parallel",
    "lora.enabled": True,
    "lora.rank": 4,
    "lora.targets": "query,value",
    "train.lr0": 4e-4,
    "train.warmup_iters": 300,
    "train.power": 6.0,
    "train.epochs": 140,
    "train.batch_size": 8,
    "train.lambda_ce": 0.2,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.weight_decay": 0.01,
    "train.binarize_threshold": 0.5,
    "train.num_workers": 0,
    "data.root": "./data",
    "data.target_size": None,
    "eval.granularity": "micro",
}

_NULLABLE_INT = {"encoder.image_size", "encoder.window_size", "data.target_size"}


def _flatten(mapping: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _whole(value) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"{value} is not a whole number")
    return int(value)


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        if key in _NULLABLE_INT:
            return None
        raise ConfigError(f"{key} must not be empty")
    try:
        if key in _NULLABLE_INT:
            return _whole(value)
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "yes", "no", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "yes", "1")
            return bool(value)
        if isinstance(default, (list, tuple)) or key in ("adapter.placement", "lora.targets"):
            if isinstance(value, (list, tuple)):
                return ",".join(str(v) for v in value)
            return str(value)
        if isinstance(default, int):
            return _whole(value)
        return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot use {value!r} ({exc})") from exc


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self) -> None:
        if not is_valid_granularity(self.values["eval.granularity"]):
            raise ConfigError(f"eval.granularity must be micro or macro, got {self.values['eval.granularity']!r}")

    @classmethod
    def from_mapping(cls, mapping: dict | None) -> "RunConfig":
        flat = _flatten(mapping or {})
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = dict(DEFAULTS)
        values.update({k: _coerce(k, v) for k, v in flat.items()})
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, **updates) -> "RunConfig":
        """Replace keys given with underscores for dots, e.g. ``train_epochs=2``."""
        mapping = dict(self.values)
        for key, value in updates.items():
            mapping[key.replace("_", ".", 1)] = value
        return RunConfig.from_mapping(mapping)

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def output_dir(self) -> str:
        return self.values["run.output_dir"]

    @property
    def log_level(self) -> str:
        return self.values["run.log_level"]

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig.preset(
            self.values["encoder.preset"],
            image_size=self.values["encoder.image_size"],
            window_size=self.values["encoder.window_size"],
        )

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(token_dim=self.encoder.neck_dim, num_class=self.values["decoder.num_class"])

    @property
    def adapter(self) -> AdapterConfig | None:
        if not self.values["adapter.enabled"]:
            return None
        placement = tuple(p.strip() for p in self.values["adapter.placement"].split(",") if p.strip())
        return AdapterConfig(self.values["adapter.middle_dim"], self.values["adapter.scaling"], placement)

    @property
    def lora(self) -> LoRAConfig | None:
        if not self.values["lora.enabled"]:
            return None
        raw = [t.strip() for t in self.values["lora.targets"].split(",") if t.strip()]
        targets = parse_targets(raw)
        if len(targets) != len(raw):
            raise ConfigError(f"lora.targets contains unknown entries: {self.values['lora.targets']!r}")
        return LoRAConfig(self.values["lora.rank"], targets)

    @property
    def delta(self) -> DeltaSpec:
        return DeltaSpec(self.adapter, self.lora)

    @property
    def train(self) -> TrainConfig:
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        return TrainConfig(seed=self.seed, **kwargs)

    @property
    def data_root(self) -> str:
        return self.values["data.root"]

    @property
    def target_size(self) -> int:
        return self.values["data.target_size"] or self.encoder.image_size

    @property
    def granularity(self) -> str:
        return self.values["eval.granularity"]

    def to_dict(self) -> dict:
        return dict(self.values)


def load_run_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            mapping = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if mapping is not None and not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return RunConfig.from_mapping(mapping)


def dump_run_config(config: RunConfig, output_dir: str | None = None) -> str:
    """Write the resolved configuration as ``resolved_config.yaml`` and return its path."""
    output_dir = output_dir or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RESOLVED_CONFIG_FILE)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
    return path


def build_from_config(
    config: RunConfig, materialize: bool = True, dtype=None
) -> tuple[CrackSAM, FreezeMask]:
    """Base model from ``run.seed`` with the configured deltas attached (seeded from ``run.seed + 1``)."""
    kwargs = {} if dtype is None else {"dtype": dtype}
    model = build_model(config.encoder, config.decoder, seed=config.seed, materialize=materialize, **kwargs)
    return attach_deltas(model, seed=config.seed + 1, delta=config.delta)
