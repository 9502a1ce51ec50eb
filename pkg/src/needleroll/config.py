"""Run configuration: one flat, fully-resolved bundle of every knob.

Values merge in fixed precedence: built-in defaults, then a JSON config
file, then explicit command-line flags. The resolved result is serialized
next to a command's outputs so any run can be reproduced from its artifact
directory alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

from needleroll.controller import ControllerParams
from needleroll.lstm import TrainConfig
from needleroll.plant import (
    MEDIUM_PRESETS,
    MediumParams,
    WorkspaceCone,
    rigid_variant,
)

CONFIG_SCHEMA_VERSION = 1
CONFIG_FILENAME = "config.json"

ESTIMATOR_NAMES = ("truth", "ekf", "lstm")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    jobs: int = 1

    # plant / medium
    medium: str = "gelatin"
    rigid: bool = False
    depth_cap: float = 80.0

    # workspace sampling
    depth_min: float = 40.0
    depth_max: float = 75.0
    radial_margin: float = 0.9

    # controller
    insertion_speed: float = 5.0
    rotation_speed: float = 2.0 * math.pi
    rate: float = 40.0
    deadband: float = 0.05
    arrival_tolerance: float = 0.25

    # dataset generation; n doubles as the trial count for evaluation
    n: int | None = None
    jitter: float = 0.0
    train_fraction: float = 6.0 / 7.0
    z_max: float = 75.0

    # training
    dataset: str | None = None
    epochs: int = 800
    batch_size: int = 8
    learning_rate: float = 3e-3
    dropout: float = 0.2
    hidden_size: int = 30

    # steering / evaluation
    model: str | None = None
    estimator: str = "lstm"
    estimators: tuple[str, ...] = ("lstm", "ekf")
    target: tuple[float, float, float] | None = None
    bin_width: float = 0.05

    def validate(self):
        if self.medium not in MEDIUM_PRESETS:
            raise ValueError(
                f"unknown medium {self.medium!r}; "
                f"choose from {sorted(MEDIUM_PRESETS)}")
        if self.estimator not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ValueError(f"unknown estimator {name!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must be in (0, 1)")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must be in [0, 1)")
        if self.target is not None and len(self.target) != 3:
            raise ValueError("target must have three coordinates")
        # these fire their own range checks
        self.make_controller()
        self.make_workspace()
        return self

    def make_medium(self) -> MediumParams:
        medium = MEDIUM_PRESETS[self.medium]
        return rigid_variant(medium) if self.rigid else medium

    def make_workspace(self) -> WorkspaceCone:
        return WorkspaceCone(
            depth_min=self.depth_min, depth_max=self.depth_max,
            bounding_curvature=MEDIUM_PRESETS[self.medium].curvature,
            radial_margin=self.radial_margin,
        )

    def make_controller(self) -> ControllerParams:
        return ControllerParams(
            insertion_speed=self.insertion_speed,
            rotation_speed=self.rotation_speed, rate=self.rate,
            deadband=self.deadband, arrival_tolerance=self.arrival_tolerance,
        )

    def make_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, dropout_rate=self.dropout,
            hidden_size=self.hidden_size, z_max=self.z_max, seed=self.seed,
        )


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}
_TUPLE_FIELDS = {"estimators", "target"}


def _coerce(values: dict) -> dict:
    out = dict(values)
    for name in _TUPLE_FIELDS & out.keys():
        if out[name] is not None:
            out[name] = tuple(out[name])
    return out


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path}: expected a JSON object")
    doc.pop("schema_version", None)
    unknown = set(doc) - _FIELD_NAMES
    if unknown:
        raise ValueError(
            f"config file {path}: unknown keys {sorted(unknown)}")
    return doc


def resolve_config(file_values: dict | None = None,
                   flag_values: dict | None = None) -> RunConfig:
    """Defaults, overlaid by config-file values, overlaid by flags.

    Flag values equal to None mean "not given on the command line" and do
    not override.
    """
    merged = {}
    merged.update(_coerce(file_values or {}))
    for name, value in _coerce(flag_values or {}).items():
        if value is not None:
            if name not in _FIELD_NAMES:
                raise ValueError(f"unknown config field {name!r}")
            merged[name] = value
    bad = set(merged) - _FIELD_NAMES
    if bad:
        raise ValueError(f"unknown config fields {sorted(bad)}")
    config = RunConfig(**merged)
    config.validate()
    return config


def write_resolved_config(config: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dataclasses.asdict(config)
    doc["schema_version"] = CONFIG_SCHEMA_VERSION
    for name in _TUPLE_FIELDS:
        if doc[name] is not None:
            doc[name] = list(doc[name])
    text = json.dumps(doc, sort_keys=True, indent=2)
    (out_dir / CONFIG_FILENAME).write_text(text + "\n")
