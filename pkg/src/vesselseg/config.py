"""Run configuration: TOML loading, validation and per-field provenance.

A config file has top-level trainer keys plus ``[loss]``, ``[network]``,
``[aha]`` and ``[paths]`` tables. Every resolved field carries one of three
provenance tags:

* ``published`` -- the value used in the reference training setup,
* ``user`` -- set in the config file or on the command line to a
  non-default value,
* ``artifact`` -- a default chosen by this package.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import NetworkConfig
from .losses import LossConfig
from .preprocess import AhaParams
from .trainer import TrainerConfig

PUBLISHED = "published"
USER = "user"
ARTIFACT = "artifact"

# dotted key -> where the published value comes from
PUBLISHED_SOURCES = {
    "epochs": "trained for 100 epochs",
    "batch_size": "batch size 1",
    "learning_rate": "Adam, initial learning rate 0.001",
    "lr_step_epochs": "learning rate decayed every 10 epochs",
    "lr_factor": "learning rate decay factor 0.1",
    "ema_base_decay": "EMA initial decay 0.999",
    "spacing": "volumes resampled to 0.35 mm isotropic",
    "loss.sup_weight": "supervised : semi-supervised weighting 4:1",
    "loss.semi_weight": "supervised : semi-supervised weighting 4:1",
}

ARTIFACT_NOTES = {
    "patch_size": "desk-scale default; the reference setup uses 128",
    "network.variant": "compact conv U-Net for CPU runs; windowed_attention_unet is the reference backbone",
    "loss.cosine_form": "exp(-cos) so that minimizing raises similarity",
    "loss.mask_convention": "high-pass box on the unshifted spectrum",
    "aha.bins": "AHA histogram resolution (not published)",
    "teacher_input": "teacher sees raw patches, student sees vessel-like twins",
}

SECTIONS = {"loss": LossConfig, "network": NetworkConfig, "aha": AhaParams}
TRAINER_SCALARS = tuple(f.name for f in dataclasses.fields(TrainerConfig) if f.name not in SECTIONS)
PATH_KEYS = ("manifest", "out")


@dataclass
class RunConfig:
    trainer: TrainerConfig
    paths: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def value(self, key: str):
        section, _, name = key.rpartition(".")
        obj = getattr(self.trainer, section) if section else self.trainer
        return getattr(obj, name)

    def provenance_rows(self) -> list[tuple[str, object, str, str]]:
        """(key, value, tag, note) for every resolved field."""
        rows = []
        for key, tag in sorted(self.provenance.items()):
            value = self.value(key)
            value = getattr(value, "value", value)
            note = PUBLISHED_SOURCES.get(key, "") if tag == PUBLISHED else ARTIFACT_NOTES.get(key, "")
            rows.append((key, value, tag, note))
        return rows

    def to_json(self) -> dict:
        return {"trainer": self.trainer.to_json(), "paths": dict(self.paths), "provenance": dict(self.provenance)}

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return cls(TrainerConfig.from_json(d["trainer"]), dict(d.get("paths", {})), dict(d.get("provenance", {})))


def _reject_unknown(given: dict, allowed, where: str) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {where} key(s): {', '.join(unknown)}")


def _field_names(cls) -> tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(cls))


def _tag(key: str, changed: bool) -> str:
    if changed:
        return USER
    return PUBLISHED if key in PUBLISHED_SOURCES else ARTIFACT


def resolve(user: dict | None = None) -> RunConfig:
    """Merge a nested config mapping over the defaults, rejecting unknown keys."""
    user = dict(user or {})
    _reject_unknown(user, TRAINER_SCALARS + tuple(SECTIONS) + ("paths",), "config")
    paths = dict(user.pop("paths", {}))
    _reject_unknown(paths, PATH_KEYS, "[paths]")

    provenance: dict[str, str] = {}
    sections = {}
    for name, cls in SECTIONS.items():
        given = user.pop(name, {})
        if not isinstance(given, dict):
            raise ValueError(f"[{name}] must be a table")
        _reject_unknown(given, _field_names(cls), f"[{name}]")
        if name == "network" and "patch_size" in given:
            raise ValueError("set patch_size at the top level, not in [network]")
        sections[name] = cls(**given)
        default = cls()
        for f in _field_names(cls):
            provenance[f"{name}.{f}"] = _tag(f"{name}.{f}", getattr(sections[name], f) != getattr(default, f))
    provenance.pop("network.patch_size")  # mirrors the top-level patch_size

    trainer = TrainerConfig(**user, **sections)
    default = TrainerConfig()
    for f in TRAINER_SCALARS:
        provenance[f] = _tag(f, getattr(trainer, f) != getattr(default, f))
    return RunConfig(trainer, paths, provenance)


def load_config(path) -> RunConfig:
    """Read a TOML config, or the ``config`` block of a previous ``run.json``."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as f:
            record = json.load(f)
        return RunConfig.from_json(record["config"] if "config" in record else record)
    with open(path, "rb") as f:
        return resolve(tomllib.load(f))


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace top-level trainer fields; ``None`` values are ignored."""
    given = {k: v for k, v in overrides.items() if v is not None}
    if not given:
        return cfg
    _reject_unknown(given, TRAINER_SCALARS, "override")
    trainer = dataclasses.replace(cfg.trainer, **given)
    default = TrainerConfig()
    provenance = dict(cfg.provenance)
    provenance.update({k: _tag(k, getattr(trainer, k) != getattr(default, k)) for k in given})
    return RunConfig(trainer, dict(cfg.paths), provenance)
