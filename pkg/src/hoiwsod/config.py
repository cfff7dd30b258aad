"""Pipeline configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .features import parse_kinds
from .pseudolabel import POLICIES

# per-phase seed offsets from the master seed
SEED_OFFSETS = {"synth_train": 0, "synth_test": 1, "source": 100, "target": 200, "supervised": 300}


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_source_train: int = 1500
    n_target_train: int = 150
    n_source_test: int = 200
    n_target_test: int = 90
    n_target_classes: int = 3
    max_distractors: int = 2


@dataclass
class DataConfig:
    synth: Optional[SynthConfig] = field(default_factory=SynthConfig)
    train: Optional[str] = None
    test: Optional[str] = None
    embeddings: Optional[str] = None
    dir: Optional[str] = None  # where synthetic data is written / reused


@dataclass
class SplitConfig:
    n_target: int = 3
    target_classes: Optional[list[str]] = None


@dataclass
class OptimConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4


@dataclass
class EpochConfig:
    source: int = 15
    target: int = 30


@dataclass
class PipelineConfig:
    seed: Optional[int] = None
    out: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    image_size: int = 320
    grid_size: int = 40
    image_channels: int = 64
    rrpn_widths: list[int] = field(default_factory=lambda: [64, 64, 96, 32])
    pose_sigma_cells: float = 2.0
    features: str = "I+P+V"
    lam: float = 10.0
    delta: float = 0.1
    box_policy: str = "hull"
    split: SplitConfig = field(default_factory=SplitConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    freeze_backbone: bool = False
    supervised_control: bool = True
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    cache_dir: Optional[str] = None

    def validate(self, require: tuple[str, ...] = ()) -> "PipelineConfig":
        for name in require:
            if getattr(self, name) is None:
                raise ConfigError(f"missing required config field {name!r}")
        if self.lam < 0:
            raise ConfigError(f"field 'lambda' must be >= 0, got {self.lam}")
        if not 0 <= self.delta < 1:
            raise ConfigError(f"field 'delta' must lie in [0, 1), got {self.delta}")
        if self.epochs.source < 1 or self.epochs.target < 1:
            raise ConfigError("fields 'epochs.source' and 'epochs.target' must be >= 1")
        if self.box_policy not in POLICIES:
            raise ConfigError(f"field 'box_policy' must be one of {POLICIES}")
        try:
            kinds = parse_kinds(self.features)
        except ValueError as exc:
            raise ConfigError(f"field 'features': {exc}") from None
        if not kinds:
            raise ConfigError("field 'features' must name at least one feature kind")
        if self.image_size % 8 or self.image_size // 8 != self.grid_size:
            raise ConfigError(
                f"fields 'image_size'/'grid_size': stride-8 backbone maps {self.image_size} px "
                f"to {self.image_size // 8}, not {self.grid_size}"
            )
        if self.grid_size % 2:
            raise ConfigError("field 'grid_size' must be even")
        if self.data.synth is None and (self.data.train is None or self.data.test is None
                                        or self.data.embeddings is None):
            raise ConfigError("field 'data': give either 'synth' or 'train', 'test' and 'embeddings'")
        if len(self.rrpn_widths) != 4:
            raise ConfigError("field 'rrpn_widths' needs 4 entries")
        return self

    @property
    def active(self) -> frozenset[str]:
        return parse_kinds(self.features)

    def phase_seed(self, phase: str) -> int:
        return int(self.seed or 0) + SEED_OFFSETS[phase]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


# YAML key -> dataclass attribute, where they differ
_ALIASES = {"lambda": "lam"}


def _build(cls, raw: Any, where: str):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"field {where or 'config'!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        attr = _ALIASES.get(key, key)
        path = f"{where}.{key}" if where else key
        if attr not in hints:
            raise ConfigError(f"unknown config field {path!r}")
        sub = _SECTIONS.get((cls.__name__, attr))
        if sub is not None:
            kwargs[attr] = _build(sub, value, path)
        else:
            kwargs[attr] = _coerce(value, hints[attr], path)
    return cls(**kwargs)


def _coerce(value, ftype, path: str):
    if value is None:
        return None
    args = typing.get_args(ftype)
    if typing.get_origin(ftype) is typing.Union:
        ftype = next(a for a in args if a is not type(None))
        args = typing.get_args(ftype)
    try:
        if typing.get_origin(ftype) is list:
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return [_coerce(v, args[0] if args else str, path) for v in value]
        if ftype is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if ftype is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if ftype is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "1"):
                    return True
                if value.lower() in ("false", "no", "0"):
                    return False
                raise ValueError
            return bool(value)
        if ftype is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {path!r}: cannot interpret {value!r} as {ftype}") from None
    return value


_SECTIONS = {
    ("PipelineConfig", "data"): DataConfig,
    ("PipelineConfig", "split"): SplitConfig,
    ("PipelineConfig", "optim"): OptimConfig,
    ("PipelineConfig", "epochs"): EpochConfig,
    ("DataConfig", "synth"): SynthConfig,
}


def _set_dotted(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def config_from_dict(raw: Optional[dict], overrides: Optional[dict] = None) -> PipelineConfig:
    doc = copy.deepcopy(raw) if raw else {}
    for key, value in (overrides or {}).items():
        _set_dotted(doc, key, value)
    # real annotation files switch the synthetic world off unless asked for
    data = doc.get("data") or {}
    if "synth" not in data:
        data["synth"] = None if data.get("train") else {}
        doc["data"] = data
    return _build(PipelineConfig, doc, "")


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw, overrides)


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
