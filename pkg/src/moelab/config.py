"""Experiment configuration: one JSON file with nested sections.

Sections: "model", "task", "method", "training", "experiment", plus an
optional top-level "out_dir". Unknown keys anywhere raise a UsageError
naming the offending field, so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import UsageError
from .experiments import LayerStrategy, Susceptible, strategy_from_config
from .model import ModelConfig
from .routers import RouterMethod, method_from_dict
from .task import TaskSpec
from .training import TrainSettings

SECTIONS = ("model", "task", "method", "training", "experiment")


@dataclass(frozen=True)
class ExperimentSettings:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    noise_grid: tuple[float, ...] = (0.001, 0.002, 0.005, 0.007, 0.01, 0.02, 0.05)
    s_inference: int = 35
    stability_tokens: int = 96
    layer_strategy: str | list = "susceptible"
    bins: int = 10
    eval_limit: int | None = None

    def __post_init__(self):
        if not self.seeds:
            raise UsageError("experiment.seeds must be nonempty")
        if any(g < 0 for g in self.noise_grid):
            raise UsageError("experiment.noise_grid values must be nonnegative")
        if self.s_inference < 1:
            raise UsageError("experiment.s_inference must be >= 1")

    def strategy(self) -> LayerStrategy:
        return strategy_from_config(self.layer_strategy)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    task: TaskSpec
    method: RouterMethod
    training: TrainSettings
    experiment: ExperimentSettings
    out_dir: str | None = None


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise UsageError(f"unknown config field {section}.{key}")
    try:
        return cls(**data)
    except TypeError as e:
        raise UsageError(f"bad {section} section: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS) - {"out_dir"}
    if unknown:
        raise UsageError(f"unknown config field {sorted(unknown)[0]}")
    model_raw = dict(raw.get("model", {}))
    if "expert_hidden" not in model_raw:
        model_raw["expert_hidden"] = 2 * model_raw.get("hidden_dim", 32)
    model = _build_section(ModelConfig, model_raw, "model")
    task = _build_section(TaskSpec, dict(raw.get("task", {})), "task")
    if task.vocab != model.vocab:
        raise UsageError(f"model.vocab ({model.vocab}) must match task.vocab ({task.vocab})")
    if task.classes != model.classes:
        raise UsageError(f"model.classes ({model.classes}) must match task.classes ({task.classes})")
    method_raw = dict(raw.get("method", {"name": "deterministic"}))
    method = method_from_dict(method_raw)
    training = _build_section(TrainSettings, dict(raw.get("training", {})), "training")
    experiment_raw = dict(raw.get("experiment", {}))
    if "seeds" in experiment_raw:
        experiment_raw["seeds"] = tuple(int(s) for s in experiment_raw["seeds"])
    if "noise_grid" in experiment_raw:
        experiment_raw["noise_grid"] = tuple(float(g) for g in experiment_raw["noise_grid"])
    experiment = _build_section(ExperimentSettings, experiment_raw, "experiment")
    experiment.strategy()  # validate eagerly
    return ExperimentConfig(model=model, task=task, method=method, training=training,
                            experiment=experiment, out_dir=raw.get("out_dir"))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config JSON in {p}: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    return config_from_dict(raw)


def config_digest(cfg: ExperimentConfig) -> str:
    """Stable hash of everything that affects training, for checkpoint reuse."""
    import hashlib

    payload = json.dumps({
        "model": dataclasses.asdict(cfg.model),
        "task": dataclasses.asdict(cfg.task),
        "method": {**dataclasses.asdict(cfg.method), "name": cfg.method.name},
        "training": dataclasses.asdict(cfg.training),
        "strategy": str(cfg.experiment.layer_strategy),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
