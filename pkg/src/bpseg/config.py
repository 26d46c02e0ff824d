"""Layered run configuration and the reproducibility manifest.

Precedence, lowest to highest: built-in defaults, the YAML config
file, ``BPSEG_*`` environment variables, CLI flags/overrides. Unknown
keys are rejected at every layer — a typo never silently no-ops.

Seeds: ``seed`` is the run's master seed (it drives the fold plan).
A section seed left at 0 means "derive from the master seed"; set a
section seed explicitly to pin it independently.

Every CLI run writes ``manifest.json``: code version, subcommand,
resolved config, its SHA-256 digest, and the resolved seeds. The
manifest is deterministic — no timestamps — so identical runs produce
identical manifests.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from . import __version__
from .data_model import Arm, ConfigError, derive_seed
from .enhance import EnhanceConfig
from .network import NetworkConfig
from .preprocess import AugmentConfig
from .synthetic import PhantomConfig, RaterSimConfig
from .training import TrainConfig

_SECTIONS = {
    "network": NetworkConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "enhance": EnhanceConfig,
    "phantom": PhantomConfig,
}

ENV_PREFIX = "BPSEG_"
_ENV_FLAGS = {
    "DATASET_ROOT": "dataset_root",
    "OUT": "out_dir",
    "ARM": "arm",
    "K": "k",
    "SEED": "seed",
    "WORKERS": "workers",
    "DEVICE_PROFILE": "device_profile",
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset_root: str = "data"
    out_dir: str = "runs"
    arm: Arm = Arm.MIXED_OPTIMIZATION
    k: int = 10
    seed: int = 0
    workers: int = 1
    device_profile: str | None = None
    trim_to_divisible: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    rater_sims: tuple[RaterSimConfig, ...] = ()

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _coerce(name: str, value, typ):
    """Convert a raw YAML/CLI/env value to the annotated field type."""
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        typ = args[0]
    if isinstance(typ, type) and issubclass(typ, enum.Enum):
        try:
            return typ(value)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {value!r} as bool")
    if typ is int:
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected int, got bool")
        return int(value)
    if typ is float:
        return float(value)
    if typ is str:
        return str(value)
    raise ConfigError(f"{name}: unsupported field type {typ}")


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _build_section(cls, data, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping")
    hints = _field_types(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {context}.{key}")
        kwargs[key] = _coerce(f"{context}.{key}", value, hints[key])
    return replace(cls(), **kwargs)


def _apply_mapping(cfg: PipelineConfig, data: dict) -> PipelineConfig:
    hints = _field_types(PipelineConfig)
    top_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    updates = {}
    for key, value in data.items():
        if key in _SECTIONS:
            updates[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "rater_sims":
            if not isinstance(value, list):
                raise ConfigError("rater_sims: expected a list of mappings")
            updates[key] = tuple(
                _build_section(RaterSimConfig, item, f"rater_sims[{i}]")
                for i, item in enumerate(value)
            )
        elif key in top_fields:
            updates[key] = _coerce(key, value, hints[key])
        else:
            raise ConfigError(f"unknown key {key}")
    return replace(cfg, **updates)


def load_config(path=None) -> PipelineConfig:
    """Defaults, optionally updated from a YAML file."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if data is None:
        return cfg
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _apply_mapping(cfg, data)


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply "key=value" / "section.key=value" overrides, strictly."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, _, raw = item.partition("=")
        parts = path.strip().split(".")
        if len(parts) == 1:
            if parts[0] == "rater_sims":
                raise ConfigError("rater_sims can only be set in the config file")
            cfg = _apply_mapping(cfg, {parts[0]: raw})
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            cfg = _apply_mapping(cfg, {parts[0]: {parts[1]: raw}})
        else:
            raise ConfigError(f"unknown key {path.strip()}")
    return cfg


def env_overrides(environ) -> list[str]:
    """Translate BPSEG_* variables into override strings.

    Flag mirrors (BPSEG_K, BPSEG_ARM, ...) map to their config keys;
    BPSEG_SECTION__FIELD (double underscore) reaches nested sections.
    Unknown names are rejected, matching the override law.
    """
    out = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX + "CONFIG":
            continue
        tail = name[len(ENV_PREFIX) :]
        if tail in _ENV_FLAGS:
            out.append(f"{_ENV_FLAGS[tail]}={value}")
        elif "__" in tail:
            section, _, fieldname = tail.partition("__")
            out.append(f"{section.lower()}.{fieldname.lower()}={value}")
        else:
            raise ConfigError(f"unknown environment override {name}")
    return out


def resolve_seeds(cfg: PipelineConfig) -> PipelineConfig:
    """Derive section seeds from the master seed where left at 0."""
    def resolved(section, token: str):
        if section.seed != 0:
            return section
        return replace(section, seed=derive_seed(cfg.seed, token))

    return replace(
        cfg,
        network=resolved(cfg.network, "network"),
        train=resolved(cfg.train, "train"),
        augment=resolved(cfg.augment, "augment"),
        phantom=resolved(cfg.phantom, "phantom"),
        rater_sims=tuple(
            resolved(r, f"rater_sim_{i}") for i, r in enumerate(cfg.rater_sims)
        ),
    )


def config_to_dict(cfg: PipelineConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, enum.Enum):
            return value.value
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(cfg)


def config_digest(cfg: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(out_dir, command: str, cfg: PipelineConfig, extra: dict | None = None) -> Path:
    resolved = resolve_seeds(cfg)
    manifest = {
        "version": __version__,
        "command": command,
        "config": config_to_dict(cfg),
        "config_sha256": config_digest(cfg),
        "seeds": {
            "master": cfg.seed,
            "network": resolved.network.seed,
            "train": resolved.train.seed,
            "augment": resolved.augment.seed,
            "phantom": resolved.phantom.seed,
        },
    }
    if extra:
        manifest.update(extra)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path
