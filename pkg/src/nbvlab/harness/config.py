"""Experiment configuration: strict schema, YAML on disk, stable hashing."""
from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ArtifactError, ParameterError


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SceneSet(Strict):
    categories: list[Literal["house", "toy", "creature"]] = ["house", "toy", "creature"]
    seeds: tuple[int, int] = Field(description="half-open range [start, stop) of scene seeds")

    @model_validator(mode="after")
    def _check(self):
        if self.seeds[1] <= self.seeds[0]:
            raise ValueError("scene seed range is empty")
        if not self.categories:
            raise ValueError("at least one category is required")
        return self

    def scenes(self) -> list[tuple[str, int]]:
        cats = self.categories
        return [(cats[s % len(cats)], s) for s in range(*self.seeds)]


class ScenesConfig(Strict):
    train: SceneSet = SceneSet(seeds=(0, 40))
    eval: SceneSet = SceneSet(seeds=(1000, 1020))
    target_size: float = Field(14.0, gt=0)
    gt_points: int = Field(10000, gt=0)


class CatalogConfig(Strict):
    per_shell: int = Field(40, ge=1)
    resolution: int = Field(128, ge=16)
    fov_deg: float = Field(60.0, gt=0, lt=180)
    shell_factors: tuple[float, float, float] = (1.5, 2.0, 2.5)


class LabelConfig(Strict):
    max_stage: int = Field(6, ge=2)


class TrainingConfig(Strict):
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)


class Constraint(Strict):
    name: str
    max_captures: Optional[int] = Field(None, ge=2)
    time_budget: Optional[float] = Field(None, gt=0)
    speed: float = Field(1.78816, gt=0)
    min_clearance: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.max_captures is None and self.time_budget is None:
            raise ValueError(f"constraint {self.name!r} needs max_captures or time_budget")
        return self


class RolloutConfig(Strict):
    criteria: list[Literal["random", "coverage", "oracle", "vin"]] = ["random", "coverage", "oracle", "vin"]
    constraints: list[Constraint] = [Constraint(name="captures10", max_captures=10)]
    candidate_limit: Optional[int] = Field(None, ge=1)


class ExperimentConfig(Strict):
    profile: Literal["desk", "paper", "micro"] = "desk"
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/desk"
    workers: int = Field(1, ge=1)
    scenes: ScenesConfig = ScenesConfig()
    catalog: CatalogConfig = CatalogConfig()
    labels: LabelConfig = LabelConfig()
    training: TrainingConfig = TrainingConfig()
    rollout: RolloutConfig = RolloutConfig()

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def subseed(seed: int, name: str, *ids: int) -> int:
    """Independent named sub-seed derived from the global seed."""
    entropy = [seed, zlib.crc32(name.encode()), *ids]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a YAML config (or defaults) and apply non-None top-level overrides."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ArtifactError(f"cannot read config {path}: {exc}") from None
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ParameterError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ParameterError(f"invalid config: {exc}") from None


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
