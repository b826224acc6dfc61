"""Experiment configuration: one JSON file, overridable from the command line.

Precedence, lowest first: built-in defaults, the config file, CLI flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataParams
from .diffusion import TeacherConfig
from .distillation import DistillConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataSizes:
    n_videos: int = 2000
    n_images: int = 2000
    n_reference: int = 400


@dataclass
class ScheduleParams:
    num_train_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    epsilon_step: int = 0
    solver_points: int = 50


@dataclass
class EvalParams:
    n_samples: int = 200
    steps: tuple = (1, 2, 4, 8)
    seed: int = 12345
    motion_kinds: tuple = ("raw", "diff", "corr", "lowfreq", "highfreq", "learnable")


@dataclass
class AblateParams:
    seeds: tuple = (0, 1, 2)
    tables: tuple = ("components", "lambda_real")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataParams = field(default_factory=DataParams)
    sizes: DataSizes = field(default_factory=DataSizes)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalParams = field(default_factory=EvalParams)
    ablate: AblateParams = field(default_factory=AblateParams)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": self.data.to_dict(),
            "sizes": asdict(self.sizes),
            "schedule": asdict(self.schedule),
            "teacher": self.teacher.to_dict(),
            "distill": self.distill.to_dict(),
            "eval": asdict(self.eval),
            "ablate": {"seeds": list(self.ablate.seeds), "tables": list(self.ablate.tables)},
        }
        d["eval"]["steps"] = list(self.eval.steps)
        d["eval"]["motion_kinds"] = list(self.eval.motion_kinds)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        if cls is DataParams:
            return DataParams.from_dict(values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from exc


SECTIONS = {"data": DataParams, "sizes": DataSizes, "schedule": ScheduleParams, "teacher": TeacherConfig,
            "distill": DistillConfig, "eval": EvalParams,
            "ablate": AblateParams}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    unknown = set(raw) - set(SECTIONS) - {"schema_version", "seed", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    if isinstance(kwargs["eval"].steps, list):
        kwargs["eval"].steps = tuple(kwargs["eval"].steps)
    kwargs["eval"].motion_kinds = tuple(kwargs["eval"].motion_kinds)
    kwargs["ablate"].seeds = tuple(kwargs["ablate"].seeds)
    kwargs["ablate"].tables = tuple(kwargs["ablate"].tables)
    unknown_tables = set(kwargs["ablate"].tables) - {"components", "lambda_real", "motion"}
    if unknown_tables:
        raise ConfigError(f"unknown ablation tables: {sorted(unknown_tables)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return ExperimentConfig(seed=seed, output_dir=str(raw.get("output_dir", "runs/default")), **kwargs)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config.  Missing file or bad JSON raise :class:`ConfigError`."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def parse_steps(text: str) -> tuple[int, ...]:
    try:
        steps = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"--steps expects a comma-separated list of integers, got {text!r}") from exc
    bad = [s for s in steps if s not in (1, 2, 4, 8)]
    if not steps or bad:
        raise ConfigError(f"--steps entries must be drawn from 1, 2, 4, 8; got {text!r}")
    return steps


def apply_overrides(cfg: ExperimentConfig, seed=None, out=None, motion=None, lambda_real=None,
                    lambda_adv=None, steps=None) -> ExperimentConfig:
    """Flags win over file values.  ``--seed`` seeds teacher and distillation alike."""
    d = cfg.to_dict()
    if seed is not None:
        d["seed"] = seed
    if out is not None:
        d["output_dir"] = str(out)
    if motion is not None:
        d["distill"]["motion_kind"] = motion
    if lambda_real is not None:
        d["distill"]["lambda_real"] = lambda_real
    if lambda_adv is not None:
        d["distill"]["lambda_adv"] = lambda_adv
    if steps is not None:
        d["eval"]["steps"] = list(steps)
        d["distill"]["eval_steps"] = list(steps)
    d["teacher"]["seed"] = d["seed"]
    d["distill"]["seed"] = d["seed"]
    return config_from_dict(d)
