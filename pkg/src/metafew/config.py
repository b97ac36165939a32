"""Run configuration: INI-style key=value files with a fixed schema.

Every key has a documented default; a config file only overrides what it
names. Unknown sections or keys are hard errors that name the offender.
`Config.config_hash` is a stable digest of the fully resolved
configuration and is embedded in every report so results stay traceable
to their settings.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .adapt import AugmentationPolicy
from .backbone import BackboneConfig
from .episodes import (
    DOMAINS,
    Dataset,
    EpisodeSpec,
    load_image_folder,
    synthetic_domain,
    two_class_task,
)
from .errors import ConfigError
from .gnn import GnnConfig
from .meta import InnerLoopConfig

BENCHMARK_SHOTS = (5, 20, 50)


@dataclass(frozen=True)
class _Key:
    kind: str
    default: object
    help: str
    choices: tuple = ()


_SCHEMA: dict = {
    "run": {
        "seed": _Key("int", 0, "master seed for init and training streams"),
    },
    "data": {
        "mode": _Key("str", "synthetic", "dataset source", ("synthetic", "folder")),
        "synthetic_seed": _Key("int", 7, "seed of the generated benchmark"),
        "root": _Key("str", "", "folder mode: directory holding <domain>/<class>/*.ppm"),
        "train_domain": _Key("str", "source", "domain used by pretrain/metatrain"),
    },
    "backbone": {
        "in_channels": _Key("int", 3, "input image channels"),
        "in_size": _Key("int", 32, "input image side length"),
        "widths": _Key("int_list", (8, 16, 32, 64), "conv block output channels, one per block"),
    },
    "gnn": {
        "d_k": _Key("int", 64, "projected feature width"),
        "depth": _Key("int", 2, "number of edge/convolution rounds"),
        "average_from": _Key("int", 50, "merge same-class support pairs at this support count"),
    },
    "episode": {
        "n_way": _Key("int", 5, "classes per episode"),
        "n_shot": _Key("int", 5, "support images per class (training episodes)"),
        "n_query": _Key("int", 15, "query images per class"),
    },
    "inner": {
        "k": _Key("int", 1, "adaptable trailing blocks"),
        "optimizer": _Key("str", "adam", "inner-loop optimizer", ("adam", "sgd")),
        "learning_rate": _Key("float", 0.003, "inner-loop learning rate"),
        "epochs": _Key("int", 15, "inner-loop epochs over the support pool"),
        "batch_size": _Key("opt_int", None, "inner batch size; empty = full pool"),
        "weight_decay": _Key("float", 0.0, "inner-loop weight decay"),
    },
    "outer": {
        "learning_rate": _Key("float", 0.001, "outer Adam learning rate"),
    },
    "baseline": {
        "k": _Key("int", 1, "adaptable trailing blocks for the baseline"),
        "learning_rate": _Key("float", 0.01, "baseline Adam learning rate"),
        "epochs": _Key("int", 20, "baseline fine-tuning epochs"),
        "batch_size": _Key("opt_int", None, "baseline batch size; empty = full pool"),
        "weight_decay": _Key("float", 0.001, "baseline Adam weight decay"),
    },
    "augment": {
        "extra_per_image": _Key("int", 17, "augmented variants per support image"),
        "original_weight": _Key("int", 3, "sampling-pool weight of each original image"),
        "allow_flips": _Key("bool", True, "allow horizontal flips (disable for orientation-bound data)"),
    },
    "train": {
        "episodes": _Key("int", 400, "episodic pretraining episodes"),
        "meta_episodes": _Key("int", 200, "meta fine-tuning episodes"),
    },
    "eval": {
        "methods": _Key("str_list", ("gnn_noft",), "methods to evaluate"),
        "shots": _Key("int_list", (5,), "n_shot values to evaluate"),
        "episodes": _Key("int", 600, "evaluation episodes per (domain, shots)"),
        "seed": _Key("int", 1000, "seed of the evaluation episode stream"),
        "domains": _Key("str_list", ("near",), "domains to evaluate"),
    },
    "paths": {
        "pretrain_checkpoint": _Key("str", "", "episodically pretrained model file"),
        "meta_checkpoint": _Key("str", "", "meta fine-tuned model file"),
    },
}


def _parse_value(section: str, key: str, spec: _Key, raw: str):
    raw = raw.strip()
    where = f"{section}.{key}"
    try:
        if spec.kind == "int":
            value = int(raw)
        elif spec.kind == "float":
            value = float(raw)
        elif spec.kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                value = True
            elif low in ("false", "no", "0", "off"):
                value = False
            else:
                raise ValueError(raw)
        elif spec.kind == "opt_int":
            value = None if raw == "" else int(raw)
        elif spec.kind == "int_list":
            value = tuple(int(t.strip()) for t in raw.split(",") if t.strip())
        elif spec.kind == "str_list":
            value = tuple(t.strip() for t in raw.split(",") if t.strip())
        else:  # str
            value = raw
    except ValueError:
        raise ConfigError(f"config key {where}: cannot parse {raw!r} as {spec.kind}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"config key {where}: {value!r} not one of {spec.choices}")
    return value


class Config:
    def __init__(self, values: dict):
        self._values = values

    def get(self, section: str, key: str):
        return self._values[(section, key)]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "Config":
        """Resolve defaults <- file <- overrides; reject unknown keys."""
        values = {(s, k): spec.default for s, keys in _SCHEMA.items() for k, spec in keys.items()}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as f:
                    parser.read_file(f)
            except configparser.Error as e:
                raise ConfigError(f"cannot parse config {path}: {e}") from None
            for section in parser.sections():
                if section not in _SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    if key not in _SCHEMA[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    values[(section, key)] = _parse_value(section, key, _SCHEMA[section][key], raw)
        for (section, key), raw in (overrides or {}).items():
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[(section, key)] = _parse_value(section, key, _SCHEMA[section][key], str(raw))
        cfg = cls(values)
        cfg._validate()
        return cfg

    def _validate(self):
        v = self._values
        for section, key in (("inner", "learning_rate"), ("outer", "learning_rate"),
                             ("baseline", "learning_rate")):
            if v[(section, key)] <= 0:
                raise ConfigError(f"config key {section}.{key} must be positive")
        for section, key in (("episode", "n_way"), ("episode", "n_shot"), ("episode", "n_query"),
                             ("eval", "episodes"), ("train", "episodes"), ("gnn", "d_k"),
                             ("gnn", "depth")):
            if v[(section, key)] < 1:
                raise ConfigError(f"config key {section}.{key} must be >= 1")
        if v[("inner", "epochs")] < 0 or v[("train", "meta_episodes")] < 0:
            raise ConfigError("inner.epochs and train.meta_episodes must be >= 0")
        for m in v[("eval", "methods")]:
            from .evaluate import METHODS

            if m not in METHODS:
                raise ConfigError(f"config key eval.methods: unknown method {m!r}")
        if v[("data", "mode")] == "synthetic":
            known = DOMAINS + ("twoclass",)
            for d in (*v[("eval", "domains")], v[("data", "train_domain")]):
                if d not in known:
                    raise ConfigError(f"config key eval.domains/data.train_domain: unknown domain {d!r}")
        if v[("data", "mode")] == "folder" and not v[("data", "root")]:
            raise ConfigError("config key data.root is required when data.mode=folder")
        for s in v[("eval", "shots")]:
            if s < 1:
                raise ConfigError("config key eval.shots: entries must be >= 1")

    def canonical(self) -> str:
        lines = []
        for (section, key) in sorted(self._values):
            value = self._values[(section, key)]
            if isinstance(value, tuple):
                text = ",".join(str(x) for x in value)
            else:
                text = "" if value is None else str(value)
            lines.append(f"{section}.{key}={text}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def describe_defaults() -> str:
    """One line per key: section.key = default  (help). Shown by --help."""
    lines = []
    for section, keys in _SCHEMA.items():
        for key, spec in keys.items():
            default = spec.default
            if isinstance(default, tuple):
                default = ",".join(str(x) for x in default)
            elif default is None:
                default = ""
            lines.append(f"  {section}.{key} = {default}  ({spec.help})")
    return "\n".join(lines)


# -- typed views -------------------------------------------------------------


def backbone_config(cfg: Config) -> BackboneConfig:
    return BackboneConfig(
        in_channels=cfg.get("backbone", "in_channels"),
        in_size=cfg.get("backbone", "in_size"),
        widths=cfg.get("backbone", "widths"),
    )


def gnn_config(cfg: Config) -> GnnConfig:
    return GnnConfig(
        feature_dim=backbone_config(cfg).feature_dim,
        n_way=cfg.get("episode", "n_way"),
        d_k=cfg.get("gnn", "d_k"),
        depth=cfg.get("gnn", "depth"),
        average_from=cfg.get("gnn", "average_from"),
    )


def inner_config(cfg: Config) -> InnerLoopConfig:
    return InnerLoopConfig(
        k=cfg.get("inner", "k"),
        optimizer=cfg.get("inner", "optimizer"),
        learning_rate=cfg.get("inner", "learning_rate"),
        epochs=cfg.get("inner", "epochs"),
        batch_size=cfg.get("inner", "batch_size"),
        weight_decay=cfg.get("inner", "weight_decay"),
    )


def baseline_config(cfg: Config) -> InnerLoopConfig:
    return InnerLoopConfig(
        k=cfg.get("baseline", "k"),
        optimizer="adam",
        learning_rate=cfg.get("baseline", "learning_rate"),
        epochs=cfg.get("baseline", "epochs"),
        batch_size=cfg.get("baseline", "batch_size"),
        weight_decay=cfg.get("baseline", "weight_decay"),
    )


def augmentation_policy(cfg: Config) -> AugmentationPolicy:
    return AugmentationPolicy(
        extra_per_image=cfg.get("augment", "extra_per_image"),
        original_weight=cfg.get("augment", "original_weight"),
        allow_flips=cfg.get("augment", "allow_flips"),
    )


def episode_spec(cfg: Config, n_shot: int | None = None, seed: int | None = None) -> EpisodeSpec:
    return EpisodeSpec(
        n_way=cfg.get("episode", "n_way"),
        n_shot=cfg.get("episode", "n_shot") if n_shot is None else n_shot,
        n_query=cfg.get("episode", "n_query"),
        seed=cfg.get("run", "seed") if seed is None else seed,
    )


def load_dataset(cfg: Config, domain: str) -> Dataset:
    if cfg.get("data", "mode") == "synthetic":
        if domain == "twoclass":
            return two_class_task(cfg.get("data", "synthetic_seed"))
        return synthetic_domain(domain, cfg.get("data", "synthetic_seed"))
    root = Path(cfg.get("data", "root"))
    return load_image_folder(root / domain, size=cfg.get("backbone", "in_size"))
