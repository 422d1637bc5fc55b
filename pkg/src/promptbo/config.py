"""Strict TOML run configuration.

Unknown keys are rejected with their dotted path so that a typo in a
hyperparameter name fails loudly instead of silently using a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ._toml import loads
from .acquisition import AcquisitionConfig
from .annotator import BackendConfig, SimulatedOracle
from .exceptions import ConfigError, ContractError
from .expansion import ExpansionConfig
from .optimizer import RunConfig
from .surrogate import KernelParams

FORMATS = ("liar", "ethos", "clarification")


@dataclass(frozen=True)
class DatasetSection:
    format: str = "liar"
    path: str | None = None
    control_size: int = 75
    eval_size: int = 50
    seed: int = 0


@dataclass(frozen=True)
class OutputSection:
    run_dir: str = "run"
    cache_path: str | None = None


@dataclass(frozen=True)
class CliConfig:
    dataset: DatasetSection
    backend: BackendConfig
    oracle: SimulatedOracle | None
    run: RunConfig
    output: OutputSection
    templates: str | None = None
    base_dir: Path = field(default=Path("."))

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("expected a boolean", key)
    elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif isinstance(default, (int, float)) and (not isinstance(value, type(default)) or isinstance(value, bool)):
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}", key)
    return value


def _build(cls, data, prefix, nested=None, skip=()):
    nested = nested or {}
    if not isinstance(data, dict):
        raise ConfigError("expected a table", prefix)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{prefix}.{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data or f.name in skip:
            continue
        key = f"{prefix}.{f.name}"
        if f.name in nested:
            kwargs[f.name] = _build(nested[f.name], data[f.name], key)
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[f.name] = _coerce(data[f.name], default, key)
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc), prefix) from None


def parse_override(text):
    """``"run.rounds=3"`` -> (["run", "rounds"], 3); values use TOML syntax, bare words are strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = loads(f"v = {raw}")["v"]
    except Exception:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data, overrides):
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-table", ".".join(path))
        node[path[-1]] = value
    return data


def load_config(path, overrides=()) -> CliConfig:
    path = Path(path)
    try:
        data = loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(apply_overrides(data, overrides), base_dir=path.parent)


def config_from_dict(data, base_dir=Path(".")) -> CliConfig:
    allowed = {"dataset", "backend", "run", "output"}
    for key in data:
        if key not in allowed:
            raise ConfigError("unknown section", key)
    dataset = _build(DatasetSection, data.get("dataset", {}), "dataset")
    if dataset.format not in FORMATS:
        raise ConfigError(f"must be one of {FORMATS}", "dataset.format")
    if not dataset.path:
        raise ConfigError("missing dataset file path", "dataset.path")

    backend_data = dict(data.get("backend", {}))
    oracle_data = backend_data.pop("oracle", None)
    backend = _build(BackendConfig, backend_data, "backend")
    oracle = None
    if oracle_data is not None:
        oracle = _build(SimulatedOracle, oracle_data, "backend.oracle", skip=("rng_seed",))
        oracle = dataclasses.replace(oracle, rng_seed=backend.rng_seed)
    elif backend.kind == "simulated":
        raise ConfigError("simulated backend needs a [backend.oracle] table", "backend.oracle")

    run_data = dict(data.get("run", {}))
    templates = run_data.pop("templates", None)
    if "seeds" in run_data:
        if not isinstance(run_data["seeds"], list) or not all(isinstance(s, str) for s in run_data["seeds"]):
            raise ConfigError("expected a list of prompt strings", "run.seeds")
        run_data["seeds"] = tuple(run_data["seeds"])
    run = _build(RunConfig, run_data, "run", nested={"acquisition": AcquisitionConfig,
                                                     "expansion": ExpansionConfig,
                                                     "kernel_init": KernelParams})
    output = _build(OutputSection, data.get("output", {}), "output")
    return CliConfig(dataset, backend, oracle, run, output, templates, Path(base_dir))
