"""Experiment configuration: schema, presets, YAML loading and CLI overrides.

Precedence is CLI override > config file > preset for the experiment tag >
field defaults. Unknown fields anywhere are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..invariance import MODES
from ..numerics import IntegratorConfig
from ..train import GainTuneConfig, TrainConfig

SCHEMA_VERSION = 1
EXPERIMENTS = ("spiral", "jensen", "boxsynth", "inputdemo")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    dims: list[int]
    activations: list[str]
    cubic_lift: bool = False

    @model_validator(mode="after")
    def _check(self):
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError("dims needs at least two positive sizes")
        if len(self.activations) != len(self.dims) - 1:
            raise ValueError("need one activation per layer")
        return self


class TrainSection(_Strict):
    epochs: int = Field(500, ge=0)
    batch_size: int = Field(20, ge=1)
    seq_len: int = Field(10, ge=1)
    lr: float = Field(1e-3, gt=0)
    optimizer: Literal["rmsprop"] = "rmsprop"
    iters_per_epoch: int = Field(1, ge=1)
    scheme: Literal["euler", "rk4"] = "rk4"
    eval_every: int = Field(0, ge=0)


class IntegratorSection(_Strict):
    scheme: Literal["euler", "rk4"] = "rk4"
    dt: float = Field(0.025, gt=0)
    horizon: Optional[float] = None  # None: the dataset's time span


class IpSection(_Strict):
    mode: str = "none"
    layer: int = -1
    count: int = Field(6, ge=1)
    selection_seed: int = 0
    eps: float = Field(10.0, gt=0)
    weights: float = Field(1.0, gt=0)
    gains: Optional[list[float]] = None  # replaces every spec's gains when set

    @field_validator("mode")
    @classmethod
    def _mode(cls, v):
        if v not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return v


class RolloutSection(_Strict):
    x0: Optional[list[float]] = None
    corner_seed: Optional[int] = None  # start near a random box corner (boxsynth)
    corner_scale: float = 0.9


class TuneSection(_Strict):
    fd_step: float = Field(1e-2, gt=0)
    deviation_weight: float = Field(0.1, ge=0)
    max_iter: int = Field(20, ge=0)
    min_gain: float = Field(1e-3, gt=0)
    rel_tol: float = Field(1e-3, gt=0)
    alternations: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    version: int = SCHEMA_VERSION
    experiment: Literal["spiral", "jensen", "boxsynth", "inputdemo"]
    seed: int = 0
    output_dir: str = "runs/out"
    dataset: dict[str, Any] = Field(default_factory=dict)
    model: ModelSection
    train: TrainSection = Field(default_factory=TrainSection)
    ip: IpSection = Field(default_factory=IpSection)
    specs: list[dict[str, Any]] = Field(default_factory=list)
    integrator: IntegratorSection = Field(default_factory=IntegratorSection)
    rollout: RolloutSection = Field(default_factory=RolloutSection)
    tune: TuneSection = Field(default_factory=TuneSection)
    sat_tol: float = Field(1e-3, ge=0)

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"config schema version {v} is not supported (expected {SCHEMA_VERSION})")
        return v

    @model_validator(mode="after")
    def _gain_chains(self):
        # hidden-layer IP is relative degree two: every spec needs two class-K gains
        if self.ip.mode != "nonlinear-layer":
            return self
        for block in self.specs:
            if block.get("type") == "derived":
                continue
            gains = self.ip.gains if self.ip.gains is not None else block.get("gains", [])
            if len(gains) < 2:
                raise ValueError(f"nonlinear-layer needs two gains per spec, got {list(gains)} "
                                 f"for {block.get('type')} (set ip.gains=[k1, k2])")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train.model_dump())

    def integrator_config(self, span: float) -> IntegratorConfig:
        i = self.integrator
        return IntegratorConfig(i.scheme, i.dt, span if i.horizon is None else i.horizon)

    def tune_config(self) -> GainTuneConfig:
        return GainTuneConfig(**self.tune.model_dump())

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_CIRCLES = [{"type": "circle", "center": [1.0, 0.55], "radius": 0.2, "gains": [10.0]},
            {"type": "circle", "center": [-1.2, -0.6], "radius": 0.2, "gains": [10.0]}]

PRESETS: dict[str, dict] = {
    "spiral": {
        "experiment": "spiral",
        "dataset": {"constrained": False},
        "model": {"dims": [2, 50, 2], "activations": ["tanhshrink", "identity"], "cubic_lift": True},
        "train": {"epochs": 500, "scheme": "rk4", "eval_every": 100},
        "ip": {"mode": "linear-layer", "layer": -1, "count": 6},
        "specs": _CIRCLES,
        "integrator": {"scheme": "rk4", "dt": 0.025},
    },
    "jensen": {
        "experiment": "jensen",
        "model": {"dims": [3, 50, 3], "activations": ["tanh", "identity"]},
        "train": {"epochs": 2000, "scheme": "euler"},
        "ip": {"mode": "linear-layer", "layer": -1, "count": 6},
        "specs": [{"type": "jensen", "gains": [1.0]}],
        "integrator": {"scheme": "euler", "dt": 10.0 / 99.0, "horizon": 149 * 10.0 / 99.0},
    },
    "boxsynth": {
        "experiment": "boxsynth",
        "model": {"dims": [17, 64, 17], "activations": ["tanh", "identity"]},
        "train": {"epochs": 1500, "scheme": "rk4"},
        "ip": {"mode": "linear-layer", "layer": -1, "count": 17},
        "specs": [{"type": "box", "from_dataset": True, "gains": [5.0]}],
        "integrator": {"scheme": "euler", "dt": 0.05, "horizon": 20.0},
        "rollout": {"corner_seed": 7},
    },
    "inputdemo": {
        "experiment": "inputdemo",
        "model": {"dims": [2, 16, 2], "activations": ["tanh", "identity"]},
        "train": {"epochs": 0},
        "ip": {"mode": "external-input"},
        "specs": [{"type": "circle", "center": [0.0, 1.0], "radius": 0.25, "gains": [5.0]}],
        "integrator": {"scheme": "euler", "dt": 0.01, "horizon": 10.0},
        "rollout": {"x0": [1.0, 0.0]},
    },
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> dict:
    """'ip.count=20' -> {'ip': {'count': 20}}; values are parsed as YAML scalars."""
    if "=" not in item:
        raise ValueError(f"override {item!r} must look like key.path=value")
    path, raw = item.split("=", 1)
    node: Any = yaml.safe_load(raw)
    for key in reversed(path.strip().split(".")):
        node = {key: node}
    return node


def build_config(file_data: dict | None = None, overrides: list[str] | dict | None = None,
                 experiment: str | None = None) -> ExperimentConfig:
    """Layer preset, file contents and overrides, then validate."""
    file_data = dict(file_data or {})
    if isinstance(overrides, dict):
        over = overrides
    else:
        over = {}
        for item in overrides or []:
            over = deep_merge(over, parse_override(item))
    tag = over.get("experiment") or file_data.get("experiment") or experiment
    if tag not in EXPERIMENTS:
        raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {tag!r}")
    merged = deep_merge(deep_merge(PRESETS[tag], file_data), over)
    merged["experiment"] = tag
    return ExperimentConfig.model_validate(merged)


def load_config(path, overrides=None, experiment: str | None = None) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping")
    return build_config(data, overrides, experiment)


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
