"""Run configuration files.

INI-style ``key=value`` lines grouped under ``[data]``, ``[model]``, ``[train]``
and ``[output]``::

    [data]
    path = synth.neeg
    split_seed = 0

    [model]
    D = 9
    use_batchnorm = true

    [train]
    epochs = 100

    [output]
    dir = runs/seed0

Unknown sections or keys are errors. ``model.N_t`` may be omitted, in which
case it is taken from the training-set size.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DATA_KEYS = {"path": str, "split_seed": int, "k": int}
OUTPUT_KEYS = {"dir": str, "checkpoint": str, "metrics": str}


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def model_config(self, **derived) -> ModelConfig:
        kw = {**derived, **self.model}
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    @property
    def data_path(self) -> Path | None:
        return Path(self.data["path"]) if "path" in self.data else None

    @property
    def out_dir(self) -> Path:
        return Path(self.output.get("dir", "."))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _schema(section: str) -> dict:
    if section == "data":
        return DATA_KEYS
    if section == "output":
        return OUTPUT_KEYS
    cls = {"model": ModelConfig, "train": TrainConfig}.get(section)
    if cls is None:
        raise ConfigError(f"unknown section [{section}]")
    return {f.name: {"int": int, "float": float, "bool": _parse_bool}[f.type] for f in fields(cls)}


def set_value(run: RunConfig, section: str, key: str, raw: str) -> None:
    schema = _schema(section)
    if key not in schema:
        raise ConfigError(f"unknown key {section}.{key}")
    try:
        getattr(run, section)[key] = schema[key](raw.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    run = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(run, section, key, raw)
    if "path" in run.data and not Path(run.data["path"]).is_absolute():
        run.data["path"] = str(path.parent / run.data["path"])
    return run


def apply_overrides(run: RunConfig, assignments) -> None:
    """Apply ``section.key=value`` strings on top of the file."""
    for item in assignments or ():
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        set_value(run, section.strip(), key.strip(), raw)


def effective_lines(run: RunConfig, model: ModelConfig | None = None,
                    train: TrainConfig | None = None) -> list[str]:
    lines = [f"data.{k}={v}" for k, v in sorted(run.data.items())]
    if model is not None:
        lines += [f"model.{f.name}={getattr(model, f.name)}" for f in fields(model)]
    if train is not None:
        lines += [f"train.{f.name}={getattr(train, f.name)}" for f in fields(train)]
    lines += [f"output.{k}={v}" for k, v in sorted(run.output.items())]
    return lines
