"""Experiment configuration and output-directory layout.

A config file is YAML with optional sections (`scenario`, `spectrogram`,
`model`, `splits`, `training`) plus `seed` and `output_dir`. Sections left out
are filled from the preset matching the model kind and scale.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import zlib
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_core import PydanticCustomError

from jamwatch.artifact_io import ensure_dir, write_json
from jamwatch.detector_service import DEFAULT_CALIBRATION_MARGIN, SplitSpec, TrainConfig
from jamwatch.enums import ModelKind, ModelScale
from jamwatch.errors import ConfigurationError
from jamwatch.iq_simulation_service import ScenarioConfig, _is_power_of_two
from jamwatch.spectrogram_service import DEFAULT_EPSILON, DEFAULT_N, DEFAULT_ROWS

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "JAMWATCH_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "out"
DESK_N = 128
DESK_ROWS = 32


class SpectrogramConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(DEFAULT_N, gt=0)
    rows: int = Field(DEFAULT_ROWS, gt=0)
    epsilon: float = Field(DEFAULT_EPSILON, gt=0)

    @field_validator("n")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if not _is_power_of_two(v):
            raise ValueError(f"n must be a power of two, got {v}")
        return v


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ModelKind = ModelKind.CAE
    scale: ModelScale = ModelScale.FULL
    calibrate_margin: float = Field(DEFAULT_CALIBRATION_MARGIN, gt=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scenario: ScenarioConfig
    spectrogram: SpectrogramConfig
    model: ModelConfig
    splits: SplitSpec
    training: TrainConfig
    seed: int = Field(0, ge=0)
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)

    @model_validator(mode="after")
    def _frame_fits_spectrogram(self) -> "ExperimentConfig":
        needed = self.spectrogram.rows * self.spectrogram.n
        if self.scenario.frame_len < needed:
            raise PydanticCustomError(
                "frame_too_short",
                "scenario.frame_len {frame_len} is shorter than spectrogram.rows x spectrogram.n = {needed}",
                {"frame_len": self.scenario.frame_len, "needed": needed, "field": "spectrogram.rows"},
            )
        return self


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the experiment seed and the stage name."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode("utf-8"))]).generate_state(1)[0])


def preset(kind: ModelKind, scale: ModelScale, seed: int) -> dict[str, Any]:
    desk = ModelScale(scale) is ModelScale.DESK
    scenario = ScenarioConfig.desk() if desk else ScenarioConfig()
    spectrogram = SpectrogramConfig(n=DESK_N, rows=DESK_ROWS) if desk else SpectrogramConfig()
    if ModelKind(kind) is ModelKind.CNN:
        splits = SplitSpec.supervised_recipe(scale)
    else:
        splits = SplitSpec.unsupervised(scale)
    return {
        "scenario": scenario.model_dump(mode="json"),
        "spectrogram": spectrogram.model_dump(mode="json"),
        "splits": splits.model_dump(mode="json"),
        "training": TrainConfig(seed=stage_seed(seed, "training")).model_dump(mode="json"),
    }


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(raw: dict[str, Any], assignment: str) -> None:
    """Applies `section.key=value`; the value is parsed as YAML so numbers and booleans keep their type."""
    if "=" not in assignment:
        raise ConfigurationError(f"override '{assignment}' must look like section.key=value", field="set")
    dotted, text = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigurationError(f"override '{assignment}' names no key", field="set")
    node = raw
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"'{key}' is not a section", field=dotted)
        node = child
    try:
        node[keys[-1]] = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse value '{text}': {e}", field=dotted) from e


def read_config_file(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path} is not valid YAML: {e}", field="config") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a mapping of sections", field="config")
    return raw


def _validation_field(e: ValidationError) -> str:
    errors = e.errors()
    if not errors:
        return "config"
    first = errors[0]
    return ".".join(str(part) for part in first["loc"]) or first.get("ctx", {}).get("field") or "config"


def build_config(
    raw: dict[str, Any],
    overrides: Iterable[str] = (),
    model_kind: Optional[ModelKind] = None,
    scale: Optional[ModelScale] = None,
    output_dir: Optional[Path] = None,
) -> ExperimentConfig:
    """Resolves precedence: preset < file < --set overrides < explicit flags; the env var replaces only output_dir."""
    raw = copy.deepcopy(raw)
    for assignment in overrides:
        apply_override(raw, assignment)
    model = raw.setdefault("model", {})
    if not isinstance(model, dict):
        raise ConfigurationError("'model' must be a section", field="model")
    if model_kind is not None:
        model["kind"] = str(model_kind)
    if scale is not None:
        model["scale"] = str(scale)

    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    elif env_dir:
        raw["output_dir"] = env_dir

    try:
        kind = ModelKind(model.get("kind", ModelKind.CAE))
        model_scale = ModelScale(model.get("scale", ModelScale.FULL))
        seed = int(raw.get("seed", 0))
    except (ValueError, TypeError) as e:
        raise ConfigurationError(str(e), field="model") from e

    merged = _deep_merge(preset(kind, model_scale, seed), raw)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        message = "; ".join(err["msg"] for err in e.errors()) or "invalid configuration"
        raise ConfigurationError(message, field=_validation_field(e)) from e


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = (), **flags: Any) -> ExperimentConfig:
    return build_config(read_config_file(path), overrides, **flags)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON config without output_dir."""
    payload = cfg.model_dump(mode="json", exclude={"output_dir"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ExperimentSetup:
    """One experiment = one output directory; stage outputs are never overwritten without force."""

    def __init__(self, config: ExperimentConfig, force: bool = False):
        self.config = config
        self.force = force
        self.output_dir = Path(config.output_dir)
        self.config_hash = config_hash(config)

    def iq_dir(self, split: str) -> Path:
        return self.output_dir / "iq" / split

    def dataset_path(self, split: str) -> Path:
        return self.output_dir / "spectrograms" / f"{split}.jwds"

    @property
    def model_dir(self) -> Path:
        return self.output_dir / "model"

    @property
    def checkpoint_path(self) -> Path:
        return self.model_dir / "checkpoint.jwck"

    @property
    def eval_dir(self) -> Path:
        return self.output_dir / "eval"

    @property
    def bench_dir(self) -> Path:
        return self.output_dir / "bench"

    def claim(self, path: Path) -> Path:
        """Makes `path` available for writing; existing outputs need force."""
        path = Path(path)
        if path.exists():
            if not self.force:
                raise ConfigurationError(f"{path} already exists; pass --force to overwrite", field="output_dir")
            logger.info("Overwriting %s", path)
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
        return path

    def provenance(self, **extra: Any) -> dict[str, Any]:
        return {"config_hash": self.config_hash, "seed": self.config.seed, **extra}

    def write_config_echo(self) -> Path:
        path = self.output_dir / "config.json"
        ensure_dir(self.output_dir)
        write_json(path, {"config_hash": self.config_hash, "config": self.config.model_dump(mode="json")})
        return path

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.config.seed, stage)

    def splits(self, split: str) -> list[str]:
        if split == "all":
            return ["train", "val", "test"]
        self.config.splits.counts(split)
        return [split]
