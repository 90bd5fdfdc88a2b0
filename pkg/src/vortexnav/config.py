"""Run configuration: one JSON document with ``env``, ``train`` and ``eval``
sections. Every key is optional; unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .agents import TrainConfig
from .env import EnvConfig


@dataclass(frozen=True)
class EvalSettings:
    case: int = 1
    n: int = 500
    seed: int = 0
    dt: float = 0.5
    k: int = 32

    def __post_init__(self):
        if self.case not in (1, 2):
            raise ValueError("eval.case must be 1 or 2")
        if self.n < 1 or self.dt <= 0 or self.k < 1:
            raise ValueError("eval.n, eval.dt and eval.k must be positive")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - {"env", "train", "eval"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        env = EnvConfig.from_dict(data.get("env", {}))
        train_data = dict(data.get("train", {}))
        if "env" in train_data:
            raise ValueError("put environment keys in the top-level 'env' section")
        train = TrainConfig.from_dict({**train_data, "env": env})
        eval_data = data.get("eval", {})
        unknown = set(eval_data) - set(EvalSettings.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(env=env, train=train, eval=EvalSettings(**eval_data))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def with_train(self, **overrides) -> "RunConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, train=replace(self.train, **overrides)) if overrides else self

    def with_eval(self, **overrides) -> "RunConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, eval=replace(self.eval, **overrides)) if overrides else self

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("env")
        return {"env": train_env_dict(self.env), "train": train, "eval": asdict(self.eval)}


def train_env_dict(env: EnvConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(env).items()}
