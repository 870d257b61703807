"""Run configuration: profile defaults, JSON config files, and flag overrides.

Precedence, lowest first: profile defaults, config file, ``MVREG_OUT_DIR``,
command-line flags.  Per-module seeds are not configurable on their own; they
are derived from the global ``seed`` (see :mod:`mvreg.seeding`).
"""

import json
import os
from dataclasses import dataclass, field, fields, replace

from .cnn import TrainConfig
from .dataset import PROFILES, DatasetSpec, VolumeConfig
from .errors import ConfigError, UnknownKeyError
from .mv_sim import MvSimConfig
from .optimizers import OptimizerConfig
from .projection import ProjectionGeometry
from .similarity import SimilarityConfig

OUT_DIR_ENV = "MVREG_OUT_DIR"

# section name -> (dataclass, fields that come from the global seed instead)
SECTIONS = {
    "geometry": (ProjectionGeometry, ()),
    "volume": (VolumeConfig, ()),
    "dataset": (DatasetSpec, ("seed",)),
    "mv_sim": (MvSimConfig, ("seed",)),
    "similarity": (SimilarityConfig, ()),
    "optimizer": (OptimizerConfig, ()),
    "train": (TrainConfig, ("seed",)),
}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "mvreg-out"
    roi_mm: float = 100.0
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    similarity_kind: str = "cc"
    cnn_max_iters: int = 3
    cnn_stop_eps_mm: float = 0.1
    geometry: ProjectionGeometry = field(default_factory=ProjectionGeometry)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mv_sim: MvSimConfig = field(default_factory=MvSimConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.cnn_max_iters < 1:
            raise ConfigError(f"cnn_max_iters must be >= 1, got {self.cnn_max_iters}")
        if self.similarity_kind not in ("cc", "mi", "pi"):
            raise ConfigError(f"unknown similarity {self.similarity_kind!r}")
        for name in SECTIONS:
            sub = getattr(self, name)
            if hasattr(sub, "validate"):
                try:
                    sub.validate()
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        return self


TOP_LEVEL = tuple(f.name for f in fields(RunConfig) if f.name not in SECTIONS)


def config_keys():
    """Dotted names of every configurable leaf field."""
    keys = list(TOP_LEVEL)
    for name, (cls, derived) in SECTIONS.items():
        keys += [f"{name}.{f.name}" for f in fields(cls) if f.name not in derived]
    return keys


def profile_defaults(profile="desk"):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    p = PROFILES[profile]
    return RunConfig(profile=profile, geometry=p["geometry"], volume=p["volume"], dataset=p["spec"])


def get_value(cfg, key):
    obj = cfg
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"value {value!r} does not match the type of default {default!r}")


def apply_overrides(cfg, flat):
    """Return a copy of ``cfg`` with dotted-key overrides applied."""
    known = set(config_keys())
    top, sections = {}, {}
    for key, value in flat.items():
        if key not in known:
            raise UnknownKeyError(key)
        try:
            coerced = _coerce(value, get_value(cfg, key))
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        if "." in key:
            sec, leaf = key.split(".", 1)
            sections.setdefault(sec, {})[leaf] = coerced
        else:
            top[key] = coerced
    cfg = replace(cfg, **top)
    for sec, values in sections.items():
        cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **values)})
    return cfg


def flatten(obj, prefix=""):
    """Nested config dict -> dotted keys.  Section values must be objects."""
    out = {}
    for key, value in obj.items():
        dotted = f"{prefix}{key}"
        if not prefix and key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a JSON object")
            out.update(flatten(value, f"{key}."))
        else:
            out[dotted] = value
    return out


def parse_config_text(text, source="<config>"):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return flatten(obj)


def load_config(path, overrides=None, env=None):
    """Build a RunConfig from a JSON file (``None`` for none) plus overrides.

    ``overrides`` are dotted keys from command-line flags and win over the
    file; ``env`` defaults to ``os.environ``.
    """
    file_values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        file_values = parse_config_text(text, str(path))
    overrides = dict(overrides or {})
    env = os.environ if env is None else env
    profile = overrides.get("profile", file_values.get("profile", "desk"))
    cfg = apply_overrides(profile_defaults(profile), file_values)
    if env.get(OUT_DIR_ENV):
        cfg = replace(cfg, out_dir=env[OUT_DIR_ENV])
    cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def to_json(cfg):
    """Nested dict mirroring the config file layout (derived seeds omitted)."""
    out = {k: getattr(cfg, k) for k in TOP_LEVEL}
    for name, (cls, derived) in SECTIONS.items():
        sub = getattr(cfg, name)
        out[name] = {
            f.name: list(v) if isinstance(v := getattr(sub, f.name), tuple) else v
            for f in fields(cls)
            if f.name not in derived
        }
    return out
