""" Run configuration: defaults, then a YAML or JSON file, then command-line flags. """

import logging
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .dataio import SyntheticSpec
from .dec import LossWeights, TrainConfig, Variant
from .distance import DtwConfig, PointCost
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SEED_VARIABLE = "STDEC_SEED"

RunVariant = Literal["kmeans", "kmeans-dtw", "dec", "sdec"]


class RunConfig(BaseModel):
    csv: Path | None = None
    sensor_order: list[str] | None = None
    synthetic: SyntheticSpec | None = None
    window: int = Field(12, ge=1)
    band: int = Field(6, ge=1)
    point_cost: PointCost = "squared_diff"
    elbow: list[int] | None = None
    variant: RunVariant = "sdec"
    weights: LossWeights = Field(default_factory=LossWeights.sdec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    train_fraction: float | None = Field(None, gt=0.0, lt=1.0)
    lambda_csv: Path | None = None
    dtw_sample_size: int | None = Field(500, ge=1)
    output: Path = Path("results")
    seed: int = 0

    @field_validator("elbow")
    @classmethod
    def check_elbow(cls, value: list[int] | None) -> list[int] | None:
        if value is not None and (len(set(value)) < 3 or min(value) < 1):
            raise ValueError("The elbow range needs at least three distinct positive values of k.")
        return sorted(set(value)) if value is not None else None

    @model_validator(mode="before")
    @classmethod
    def default_dec_weights(cls, data: Any) -> Any:
        """ A dec run without an explicit alpha0 gets alpha0 = 0. """
        if isinstance(data, dict) and data.get("variant") == "dec":
            weights = data.get("weights")
            if weights is None:
                data = {**data, "weights": LossWeights.dec().model_dump()}
            elif isinstance(weights, dict) and "alpha0" not in weights:
                data = {**data, "weights": {**weights, "alpha0": 0.0}}
        return data

    @model_validator(mode="before")
    @classmethod
    def seed_synthetic(cls, data: Any) -> Any:
        """ A synthetic spec without its own seed uses the run seed. """
        if isinstance(data, dict) and isinstance(data.get("synthetic"), dict) \
                and "seed" not in data["synthetic"]:
            data = {**data, "synthetic": {**data["synthetic"], "seed": data.get("seed", 0)}}
        return data

    @model_validator(mode="after")
    def check_run(self) -> "RunConfig":
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("Give exactly one data source: a CSV file or a synthetic spec.")
        if self.variant == "dec" and self.weights.alpha0 != 0.0:
            raise ValueError("alpha0 must be 0 for dec.")
        if self.band > self.window:
            raise ValueError(f"Band {self.band} is wider than the window {self.window}.")
        return self

    @property
    def dtw(self) -> DtwConfig:
        return DtwConfig(band=self.band, point_cost=self.point_cost)

    @property
    def trainer_variant(self) -> Variant:
        return "kmeans-ae" if self.variant == "kmeans" else self.variant

    @property
    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})


def merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """ Nested dictionary update; ``None`` values in ``overrides`` are ignored. """
    result = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = result.get(key)
            result[key] = merge(current if isinstance(current, dict) else {}, value)
        else:
            result[key] = value
    return result


def seed_from_environment() -> int | None:
    text = os.environ.get(SEED_VARIABLE)
    if text is None:
        return None
    try:
        return int(text)
    except ValueError as error:
        raise ConfigurationError(f"{SEED_VARIABLE} should be an integer.") from error


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path) as config_file:
            data = yaml.safe_load(config_file)
    except (OSError, yaml.YAMLError) as error:
        raise ConfigurationError(f"Cannot read configuration {path}: {error}") from error
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Configuration {path} should hold a mapping.")
    return data


def load_run_config(path: str | Path | None = None,
                    overrides: dict[str, Any] | None = None) -> RunConfig:
    """ Resolve a :class:`RunConfig`.

    Parameters
    ----------
    path: str or Path, optional
        YAML or JSON file with any subset of the fields.
    overrides: dict, optional
        Values from the command line; they win over the file.

    The seed falls back to the ``STDEC_SEED`` environment variable when neither the file
    nor the overrides give one.
    """
    data = read_config_file(path) if path is not None else {}
    data = merge(data, overrides or {})
    if "seed" not in data:
        seed = seed_from_environment()
        if seed is not None:
            data["seed"] = seed
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as error:
        raise ConfigurationError(str(error)) from error
    logger.debug("Resolved configuration: %s", config.model_dump(mode="json"))
    return config
