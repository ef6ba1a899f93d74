"""Experiment configuration files.

A config is a JSON object::

    {"name": "desk",
     "coords": [... parameter-space coordinates ...],
     "objective": {"kind": "highway", "sim": {...}}}

``coords`` follows :meth:`ParamSpace.to_json`; ``objective`` follows
:func:`objective_from_json`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from avrisk.highway import SimConfig
from avrisk.objectives import GaussianLinear, HighwayObjective, Objective, objective_from_json
from avrisk.params import ParamSpace, desk_space, gaussian_space, full_space


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    space: ParamSpace
    objective: Objective

    def to_json(self) -> dict:
        return {"name": self.name, "coords": self.space.to_json(), "objective": self.objective.to_json()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def config_from_json(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in ("coords", "objective") if k not in doc]
    if missing:
        raise ConfigError(f"config lacks {', '.join(missing)}")
    try:
        space = ParamSpace.from_json(doc["coords"])
        objective = objective_from_json(doc["objective"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if isinstance(objective, GaussianLinear) and len(objective.direction) != space.latent_dim:
        raise ConfigError("gaussian_linear direction must match the latent dimension")
    if isinstance(objective, HighwayObjective) and objective.cfg.scenario_dim != space.param_dim:
        raise ConfigError(f"highway sim expects {objective.cfg.scenario_dim} parameters, "
                          f"space provides {space.param_dim}")
    return ExperimentConfig(str(doc.get("name", "unnamed")), space, objective)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_json(doc)


def stock_configs() -> dict[str, ExperimentConfig]:
    """The configs shipped under ``configs/``."""
    return {
        "desk": ExperimentConfig("desk", desk_space(), HighwayObjective(SimConfig())),
        "highway_full": ExperimentConfig(
            "highway_full", full_space(), HighwayObjective(SimConfig(behavior_dim=404))),
        "gaussian_d20": ExperimentConfig("gaussian_d20", gaussian_space(20), GaussianLinear.axis(20, 0)),
    }
