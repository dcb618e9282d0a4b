"""Experiment configuration: a strict JSON schema backed by pydantic."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..errors import ValidationError

Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModeSpec(_Strict):
    A: Matrix
    B: Matrix
    Q: Matrix | None = None
    R: Matrix | None = None


class BoundsSpec(_Strict):
    alpha0: float = Field(gt=0)
    alpha1: float = Field(gt=0)
    vartheta: float = Field(gt=0)
    nu: float = Field(gt=0)


class ScenarioSpec(_Strict):
    # "scalar-pair", "random-NxM" (e.g. "random-2x1") or "explicit"
    recipe: str = "scalar-pair"
    n_modes: int = Field(default=2, ge=1)
    modes: list[ModeSpec] | None = None
    bounds: list[BoundsSpec] | None = None
    seed: int | None = None

    @field_validator("recipe")
    @classmethod
    def _recipe(cls, v: str) -> str:
        from .scenarios import parse_recipe
        parse_recipe(v)
        return v

    @model_validator(mode="after")
    def _explicit(self):
        if self.recipe == "explicit" and not self.modes:
            raise ValueError("recipe 'explicit' needs a modes list")
        if self.modes and self.recipe != "explicit":
            raise ValueError("modes may only be given with recipe 'explicit'")
        if self.bounds is not None and self.modes is not None and len(self.bounds) != len(self.modes):
            raise ValueError("bounds and modes differ in length")
        return self


class WarmupSpec(_Strict):
    T0: int | list[int] = 20000
    # "auto": zero gain for open-loop stable modes, otherwise the Riccati gain of the true mode
    K0: Literal["auto", "zero"] | list[Matrix] = "auto"
    kappa0: float = Field(default=1.0, gt=0)
    epsilon_tilde: float | None = None
    order_constant: float = Field(default=1.0, gt=0)


class SequenceSpec(_Strict):
    kind: Literal["alternate", "scripted", "random", "geometric"] = "alternate"
    script: list[int] | None = None
    stop_prob: float | None = Field(default=None, gt=0, le=1)

    @model_validator(mode="after")
    def _fields(self):
        if self.kind == "scripted" and not self.script:
            raise ValueError("scripted sequence needs a script")
        if self.kind == "geometric" and self.stop_prob is None:
            raise ValueError("geometric sequence needs stop_prob")
        return self


class AlgorithmSpec(_Strict):
    union_bound: bool = False
    reuse_warmup_data: bool = False
    zero_radius: bool = False
    enforce_precondition: bool = True
    lambda_iterations: int = Field(default=100, ge=1)
    sdp_tol: float = Field(default=1e-7, gt=0)


class OutputSpec(_Strict):
    dir: str = "runs"
    traces: bool = True
    svg: bool = True
    sdp_debug: bool = False
    datasets: bool = False


class ExperimentConfig(_Strict):
    name: str = "experiment"
    scenario: ScenarioSpec = ScenarioSpec()
    sigma_w: float = Field(default=1.0, ge=0)
    noise: Literal["gaussian", "truncated", "zero"] = "gaussian"
    delta: float = Field(default=0.1, gt=0, lt=1)
    alpha_bar: float = Field(default=0.9, gt=0, lt=1)
    x0: list[float] | None = None
    warmup: WarmupSpec = WarmupSpec()
    sequence: SequenceSpec = SequenceSpec()
    ns: list[int] = Field(default_factory=lambda: [8])
    replicates: int = Field(default=1, ge=1)
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    algorithm: AlgorithmSpec = AlgorithmSpec()
    output: OutputSpec = OutputSpec()

    @field_validator("ns")
    @classmethod
    def _ns(cls, v: list[int]) -> list[int]:
        if not v or any(k < 0 for k in v):
            raise ValueError("ns must be a non-empty list of non-negative integers")
        return v

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        return self if seed is None else self.model_copy(update={"seed": int(seed)})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    @property
    def scenario_seed(self) -> int:
        return self.seed if self.scenario.seed is None else self.scenario.seed


def parse_config(data: str | bytes | dict) -> ExperimentConfig:
    """Validate a JSON document (text or already decoded) against the schema."""
    import pydantic
    try:
        if isinstance(data, dict):
            return ExperimentConfig.model_validate(data)
        return ExperimentConfig.model_validate_json(data)
    except pydantic.ValidationError as exc:
        raise ValidationError(f"invalid experiment config:\n{exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
