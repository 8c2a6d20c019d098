"""One flat run configuration covering data, model, training and evaluation keys.

A run reads an optional JSON document, then applies command-line overrides on
top. Unknown keys are rejected so that a typo never silently falls back to a
default.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .data import SynthConfig
from .model import ModelConfig
from .trainer import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types or values that fail validation."""


@dataclass(frozen=True)
class RunConfig:
    # synthetic data
    users: int = 200
    items: int = 100
    behaviors: int = 4
    clusters: int = 8
    within_prob: float = 0.5
    # time slicing
    num_slots: int = 3
    granularity: float = 86400.0
    # model
    dim: int = 32
    layers: int = 2
    heads: int = 1
    tau: float = 0.1
    alpha: float = 0.01
    beta: float = 0.01
    zeta_init: float = 0.5
    temporal_injection: bool = True
    time_scale: float = 0.03
    tie_weights_across_slots: bool = True
    bpr_all_behaviors: bool = False
    item_side_cl: bool = False
    # training
    epochs: int = 40
    batch_size: int = 64
    lr: float = 3e-3
    schedule: str = "fixed"
    lr_base: float = 1e-3
    lr_max: float = 1e-2
    lr_period: int = 10
    weight_decay: float = 0.0
    l2_lambda: float = 1e-4
    clip_norm: float = 5.0
    negatives: int = 1
    seed: int = 0
    # evaluation
    eval_negatives: int = 99
    strict_negatives: bool = True
    topk: tuple[int, ...] = (5, 10, 20)
    split_seed: int = 0
    # execution
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "topk":
                if not value or not all(isinstance(k, int) and k > 0 for k in value):
                    raise ConfigError("topk must be a non-empty list of positive integers")
                continue
            kind = type(f.default)
            if kind is bool:
                ok = isinstance(value, bool)
            elif kind is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif kind is float:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            else:
                ok = isinstance(value, kind)
            if not ok:
                raise ConfigError(f"{f.name}: expected {kind.__name__}, got {value!r}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.eval_negatives < 1:
            raise ConfigError("eval_negatives must be positive")

    # -- construction -------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(doc) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        if "topk" in doc:
            doc["topk"] = tuple(doc["topk"])
        return cls(**doc)

    @staticmethod
    def read(path: str | Path) -> dict[str, Any]:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return doc

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None,
             base: Mapping[str, Any] | None = None) -> "RunConfig":
        """Layer ``base``, then the file at ``path``, then ``overrides``.

        ``None`` values in ``overrides`` mean "not given" and are skipped, so
        flags win over the file only when they were actually passed.
        """
        doc: dict[str, Any] = dict(base or {})
        if path is not None:
            doc.update(cls.read(path))
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(doc)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        doc = dataclasses.asdict(self)
        doc["topk"] = list(self.topk)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- views for the library modules -------------------------------------

    def synth(self) -> SynthConfig:
        return SynthConfig(users=self.users, items=self.items, behaviors=self.behaviors,
                           num_slots=self.num_slots, clusters=self.clusters, seed=self.seed,
                           granularity=int(self.granularity), within_prob=self.within_prob)

    def model_kwargs(self) -> dict[str, Any]:
        return {"num_slots": self.num_slots, "granularity": float(self.granularity),
                "dim": self.dim, "layers": self.layers, "heads": self.heads, "tau": self.tau,
                "alpha": self.alpha, "beta": self.beta, "zeta_init": self.zeta_init,
                "temporal_injection": self.temporal_injection, "time_scale": self.time_scale,
                "tie_weights_across_slots": self.tie_weights_across_slots,
                "bpr_all_behaviors": self.bpr_all_behaviors, "item_side_cl": self.item_side_cl}

    def model(self, num_users: int, num_items: int, num_behaviors: int, target: int) -> ModelConfig:
        try:
            return ModelConfig(num_users=num_users, num_items=num_items,
                               num_behaviors=num_behaviors, target=target, **self.model_kwargs())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train(self) -> TrainConfig:
        try:
            return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                               schedule=self.schedule, lr_base=self.lr_base, lr_max=self.lr_max,
                               lr_period=self.lr_period, weight_decay=self.weight_decay,
                               l2_lambda=self.l2_lambda, clip_norm=self.clip_norm,
                               negatives=self.negatives, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def log_resolved(self, logger: logging.Logger | None = None) -> None:
        (logger or log).info("resolved config: %s", json.dumps(self.to_dict(), sort_keys=True))
