"""Flat JSON run configuration with ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthdata import DatasetConfig, DatasetError
from .trainer import ConfigError, TrainConfig

RUN_DIR_ENV = "FSR_RUN_DIR"

# keys consumed by the dataset generator; image/patch size are shared with training
_DATA_KEYS = {
    "num_train": "num_train",
    "num_val": "num_val",
    "max_objects": "max_objects",
    "min_radius": "min_radius",
    "max_radius": "max_radius",
    "color_mix": "color_mix",
    "color_spread": "color_spread",
    "data_seed": "seed",
    "class_names": "class_names",
}


@dataclass
class EvalOptions:
    eval_split: str = "val"
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    run_name: str = "run"
    data_dir: str | None = None

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        self.data.image_size = self.train.image_size
        self.data.patch_size = self.train.patch_size
        self.train.num_classes = len(self.data.class_names)

    def validate(self) -> None:
        self.sync()
        self.train.validate()
        try:
            self.data.validate()
        except DatasetError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.eval_split not in ("train", "val"):
            raise ConfigError(f"eval_split must be train or val, not {self.eval.eval_split!r}")

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        flat.pop("num_classes")
        for key, attr in _DATA_KEYS.items():
            value = getattr(self.data, attr)
            flat[key] = list(value) if isinstance(value, tuple) else value
        flat["eval_split"] = self.eval.eval_split
        flat["seeds"] = list(self.eval.seeds)
        flat["run_name"] = self.run_name
        flat["data_dir"] = self.data_dir
        return flat


def known_keys() -> set[str]:
    return set(RunConfig().to_flat())


def _coerce(key: str, value, current):
    """Convert ``value`` to the type of the current setting for ``key``."""
    if isinstance(value, str) and not isinstance(current, str):
        text = value.strip()
        if current is None:
            return None if text.lower() in ("null", "none") else text
        if isinstance(current, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if current is None or isinstance(current, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def from_flat(values: dict) -> RunConfig:
    """Build a RunConfig from flat keys; unknown keys are rejected."""
    base = RunConfig().to_flat()
    unknown = sorted(set(values) - set(base))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(base)
    for key, value in values.items():
        merged[key] = _coerce(key, value, base[key])
    train_kwargs = {f.name: merged[f.name] for f in fields(TrainConfig) if f.name != "num_classes"}
    data_kwargs = {attr: merged[key] for key, attr in _DATA_KEYS.items()}
    data_kwargs["class_names"] = tuple(data_kwargs["class_names"])
    cfg = RunConfig(
        train=TrainConfig(**train_kwargs),
        data=DatasetConfig(**data_kwargs),
        eval=EvalOptions(eval_split=merged["eval_split"], seeds=list(merged["seeds"])),
        run_name=merged["run_name"],
        data_dir=merged["data_dir"],
    )
    cfg.validate()
    return cfg


def parse_overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def load_run_config(path: str | os.PathLike | None, overrides: list[str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    values.update(parse_overrides(overrides))
    return from_flat(values)


def run_root(explicit: str | os.PathLike | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def save_snapshot(cfg: RunConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True))
    return path


def replace_train(cfg: RunConfig, **changes) -> RunConfig:
    new = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))
    new.validate()
    return new
