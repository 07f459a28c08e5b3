"""Declarative run configuration: one JSON document, four sections.

Every field has a default; a config file may set any subset; CLI flags win
over file values.  Unknown keys anywhere are rejected so typos cannot
silently fall back to defaults.  The fully resolved document is echoed into
every output directory for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
import os

from .datagen import GeneratorConfig
from .model import ModelConfig
from .solver import SolverConfig
from .training import TrainConfig


class UsageError(ValueError):
    """Bad configuration or command usage; maps to exit code 2."""


@dataclasses.dataclass
class EvalOptions:
    estimator: str = "model"
    score_against: str = "clean"  # or "observed"
    context_series: int = 0  # 0 = use every context series

    def __post_init__(self):
        if self.score_against not in ("clean", "observed"):
            raise ValueError("score_against must be 'clean' or 'observed'")
        if self.context_series < 0:
            raise ValueError("context_series must be >= 0")


@dataclasses.dataclass
class RunConfig:
    generator: GeneratorConfig
    model: ModelConfig
    training: TrainConfig
    eval: EvalOptions

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["generator"]["dim_weights"] = list(d["generator"]["dim_weights"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


_SECTIONS = {
    "generator": GeneratorConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "eval": EvalOptions,
}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown key {sorted(unknown)[0]!r} in config section {name!r}")
    if name == "generator" and "solver" in data and isinstance(data["solver"], dict):
        solver_allowed = {f.name for f in dataclasses.fields(SolverConfig)}
        solver_unknown = set(data["solver"]) - solver_allowed
        if solver_unknown:
            raise UsageError(
                f"unknown key {sorted(solver_unknown)[0]!r} in config section 'generator.solver'"
            )
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {name!r}: {exc}") from exc


def resolve_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults <- config file <- overrides into a RunConfig.

    `overrides` is a nested dict keyed by section name, typically built
    from CLI flags.
    """
    merged: dict[str, dict] = {name: {} for name in _SECTIONS}
    if file_path is not None:
        try:
            with open(file_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise UsageError(f"unknown config section {sorted(unknown)[0]!r}")
        for name, section in doc.items():
            if not isinstance(section, dict):
                raise UsageError(f"config section {name!r} must be an object")
            merged[name].update(section)
    for name, section in (overrides or {}).items():
        if name not in _SECTIONS:
            raise UsageError(f"unknown config section {name!r}")
        merged[name].update({k: v for k, v in section.items() if v is not None})
    return RunConfig(**{name: _build_section(name, cls, merged[name]) for name, cls in _SECTIONS.items()})


def echo_config(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
