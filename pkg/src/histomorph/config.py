"""Run configuration: YAML file + ``HISTOMORPH_*`` environment overrides.

Unknown keys are rejected and every validation message carries the line
of the offending key when it came from a file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentationPolicy, PolicyError
from .backbone import PRESETS

ENV_PREFIX = "HISTOMORPH_"
PLANS = ("segmentation", "classification", "full")
MANIFEST_NAMES = (
    "pannuke", "pannuke_val", "segmentation", "segmentation_val", "tcga", "tcga_val",
    "classification", "classification_val",
)


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    seg_batch_size: int = 36
    cls_batch_size: int = 64
    crop_size: int = 224
    lr: float = 1e-4
    finetune_lr: float = 2e-5
    finetune_epochs: int = 2
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100
    steps_per_epoch: int | None = None
    num_workers: int = 0


@dataclass
class RunConfig:
    plan: str = "full"
    preset: str = "reference"
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"
    augmentation: dict = field(default_factory=lambda: {"mode": "extreme"})
    manifests: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    segnet_checkpoint: str | None = None
    category_count: int | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    def policy(self) -> AugmentationPolicy:
        aug = dict(self.augmentation)
        mode = aug.pop("mode", "extreme")
        return AugmentationPolicy.from_mode(mode, **aug)

    def manifest_paths(self) -> dict:
        return {k: (self.base_dir / v if not Path(v).is_absolute() else Path(v))
                for k, v in self.manifests.items() if v is not None}

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _key_lines(node, prefix=()) -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[".".join(path)] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def _coerce(value, typ, where):
    if value is None:
        return None
    try:
        if typ in ("int", int, "int | None"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ in ("float", float):
            return float(value)
        if typ in ("str", str, "str | None"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {typ}, got {value!r}") from None
    return value


def _parse_env(value: str):
    return yaml.safe_load(value)


def build_config(data: dict, lines: dict | None = None, base_dir=".", env=None) -> RunConfig:
    lines = lines or {}
    data = dict(data or {})
    env = os.environ if env is None else env

    # env overrides: HISTOMORPH_SEED=3, HISTOMORPH_TRAINING__LR=1e-3
    for k, v in env.items():
        if not k.startswith(ENV_PREFIX):
            continue
        path = k[len(ENV_PREFIX):].lower().split("__")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env(v)

    def where(key):
        line = lines.get(key)
        return f"line {line}: {key}" if line else key

    top = {f.name: f for f in fields(RunConfig) if f.name != "base_dir"}
    for k in data:
        if k not in top:
            raise ConfigError(f"{where(k)}: unknown key")
    cfg = RunConfig(base_dir=Path(base_dir))
    for k, v in data.items():
        if k == "training":
            if not isinstance(v, dict):
                raise ConfigError(f"{where(k)}: expected a mapping")
            tfields = {f.name: f for f in fields(TrainingConfig)}
            t = TrainingConfig()
            for tk, tv in v.items():
                if tk not in tfields:
                    raise ConfigError(f"{where('training.' + tk)}: unknown key")
                setattr(t, tk, _coerce(tv, tfields[tk].type, where("training." + tk)))
            cfg.training = t
        elif k in ("augmentation", "manifests"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where(k)}: expected a mapping")
            setattr(cfg, k, dict(v))
        else:
            setattr(cfg, k, _coerce(v, top[k].type, where(k)))

    if cfg.plan not in PLANS:
        raise ConfigError(f"{where('plan')}: must be one of {PLANS}, got {cfg.plan!r}")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"{where('preset')}: must be one of {sorted(PRESETS)}, got {cfg.preset!r}")
    for name in cfg.manifests:
        if name not in MANIFEST_NAMES:
            raise ConfigError(f"{where('manifests.' + name)}: unknown manifest name")
    try:
        cfg.policy()
    except (PolicyError, TypeError) as exc:
        msg = str(exc)
        field_name = msg.split(":", 1)[0]
        raise ConfigError(f"{where('augmentation.' + field_name)}: {msg}") from None
    t = cfg.training
    if t.crop_size % 32 or t.crop_size < 32:
        raise ConfigError(f"{where('training.crop_size')}: must be a positive multiple of 32")
    for name in ("seg_batch_size", "cls_batch_size", "patience", "max_epochs"):
        if getattr(t, name) < 1:
            raise ConfigError(f"{where('training.' + name)}: must be >= 1")
    if t.lr <= 0 or t.finetune_lr <= 0:
        raise ConfigError(f"{where('training.lr')}: learning rates must be positive")
    if cfg.plan == "classification" and not cfg.segnet_checkpoint:
        raise ConfigError(f"{where('segnet_checkpoint')}: required for the classification plan")
    return cfg


def load_config(path, env=None, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(data, _key_lines(node), path.parent, env)
