"""Experiment configuration: a strict YAML schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSection(Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class GridSection(Strict):
    M: int = 20
    M_list: list[int] = Field(default_factory=list)

    @field_validator("M")
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError("M must be at least 1")
        return value


class NetworkSection(Strict):
    hidden: int = 2
    width: int | None = None  # default d + 10
    activation: Literal["sigmoid", "tanh"] = "sigmoid"
    y0_init: float = 0.0


class TrainSection(Strict):
    iterations: int = 2000
    batch_size: int = 256
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rates: list[float] = Field(default_factory=lambda: [1e-2])
    boundaries: list[int] = Field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    clip_norm: float | None = 10.0
    checkpoint_every: int | None = None
    network: NetworkSection = Field(default_factory=NetworkSection)


class ReferenceSection(Strict):
    batch: int = 200_000
    degree: int = 3
    substeps: int = 4


class CertificateSection(Strict):
    lambda_sq: float | None = None
    lambdabar: float | None = None
    f1_coefficient: Literal[3, 4] = 3
    lambda3: float = 0.1
    lambda4: float = 0.1
    C_lambda3: float | None = None
    C_path: float | None = None
    malliavin: bool = False


class ExperimentConfig(Strict):
    problem: ProblemSection
    grid: GridSection = Field(default_factory=GridSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval_batch: int = 100_000
    reference: ReferenceSection = Field(default_factory=ReferenceSection)
    epsilon: float | None = None
    epsilon_list: list[float] = Field(default_factory=list)
    certificate: CertificateSection = Field(default_factory=CertificateSection)
    output: str = "runs/default"
    seed: int = 0

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def digest(self):
        """SHA-256 of the canonical JSON form, ignoring the output directory."""
        data = self.model_dump(mode="json")
        data.pop("output")
        return _sha(data)

    def training_digest(self):
        """Hash of the sections that determine a trained family."""
        data = self.model_dump(mode="json", include={"problem", "grid", "train", "epsilon", "seed"})
        data["grid"].pop("M_list")
        return _sha(data)


def _sha(data):
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _describe(error):
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def parse_config(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_describe(exc)}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data)
