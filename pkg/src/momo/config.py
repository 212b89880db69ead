"""Run configuration: one JSON document with sections model, data, stages,
eval and seed.  Unknown keys anywhere are errors."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import StageConfig, config_hash

SECTIONS = ("model", "data", "stages", "eval", "seed")


@dataclass
class EvalConfig:
    probe_train: int = 256
    probe_test: int = 128
    probe_epochs: int = 200


def _build(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {section!r} section: {e}") from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: list[StageConfig] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def stage(self, k: int) -> StageConfig:
        for s in self.stages:
            if s.stage == k:
                return s
        raise ConfigError(f"config has no stage {k} entry")

    def run_hash(self, stage_cfg: StageConfig) -> str:
        return config_hash(self.model.to_dict(), dataclasses.asdict(self.data), stage_cfg.to_dict(), self.seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": dataclasses.asdict(self.data),
            "stages": [s.to_dict() for s in self.stages],
            "eval": dataclasses.asdict(self.eval),
            "seed": self.seed,
        }


def parse_config(doc: dict, env: dict | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    stages_doc = doc.get("stages", [])
    if not isinstance(stages_doc, list):
        raise ConfigError("'stages' must be a list")
    try:
        model = ModelConfig.from_dict(doc.get("model", {}))
        stages = [StageConfig.from_dict(s) for s in stages_doc]
    except TypeError as e:
        raise ConfigError(str(e)) from None
    seed = doc.get("seed", 0)
    env = os.environ if env is None else env
    if env.get("MOMO_SEED"):
        try:
            seed = int(env["MOMO_SEED"])
        except ValueError:
            raise ConfigError(f"MOMO_SEED must be an integer, got {env['MOMO_SEED']!r}") from None
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if len({s.stage for s in stages}) != len(stages):
        raise ConfigError("each stage may appear only once")
    return RunConfig(model, _build(DataConfig, doc.get("data", {}), "data"), stages,
                     _build(EvalConfig, doc.get("eval", {}), "eval"), seed)


def load_config(path, env: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(doc, env)
