"""Variant runner for component and behavior-subset ablations.

Every variant trains on the same split, so metrics differ only by what the
variant removes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

from .data import Dataset, DataError, drop_behaviors
from .evaluation import EmbeddingScorer, EvalSplit, MetricReport, evaluate
from .model import ModelConfig
from .trainer import TrainConfig, TrainResult, train

COMPONENT_VARIANTS = ("full", "wo_cl", "wo_mbg", "target_only")


@dataclass
class AblationResult:
    variant: str
    report: MetricReport
    result: TrainResult
    behaviors: tuple[str, ...]

    def row(self, topk: int = 10) -> dict:
        last = self.result.log[-1] if self.result.log else {}
        return {"variant": self.variant, "behaviors": "+".join(self.behaviors),
                f"HR@{topk}": self.report.hr[topk], f"NDCG@{topk}": self.report.ndcg[topk],
                "cl_long": last.get("cl_long", 0.0), "cl_short": last.get("cl_short", 0.0)}


def parse_variant(variant: str, ds: Dataset) -> tuple[str, list[int]]:
    """Return (kind, behaviors to drop). Drop variants read ``drop:<id or name>``."""
    if variant in COMPONENT_VARIANTS:
        return variant, (ds.catalog.auxiliary if variant == "target_only" else [])
    if variant.startswith("drop:"):
        ref = variant.split(":", 1)[1]
        if ref.isdigit():
            b = int(ref)
        elif ref in ds.catalog.names:
            b = ds.catalog.names.index(ref)
        else:
            raise DataError(f"unknown behavior {ref!r}")
        if not 0 <= b < ds.catalog.size:
            raise DataError(f"behavior {b} does not exist")
        if b == ds.catalog.target:
            raise DataError("the target behavior cannot be dropped")
        return "drop", [b]
    raise ValueError(f"unknown variant {variant!r}")


def run_ablation(variant: str, ds: Dataset, split: EvalSplit, model_kwargs: dict,
                 train_cfg: TrainConfig, topk: Sequence[int] = (5, 10, 20)) -> AblationResult:
    """Train one variant on ``split.train_events`` and evaluate it on ``split``.

    ``wo_cl`` zeroes both contrastive weights. ``wo_mbg`` swaps the graph
    encoder for per-behavior ID embeddings and, like ``wo_cl``, trains
    without contrastive terms.
    """
    kind, dropped = parse_variant(variant, ds)
    train_ds = ds.with_events(split.train_events)
    if dropped:
        train_ds = drop_behaviors(train_ds, dropped)
    kwargs = dict(model_kwargs)
    if kind in ("wo_cl", "wo_mbg"):
        kwargs.update(alpha=0.0, beta=0.0)
    if kind == "wo_mbg":
        kwargs["variant"] = "wo_mbg"
    cfg = ModelConfig(num_users=ds.num_users, num_items=ds.num_items,
                      num_behaviors=train_ds.catalog.size, target=train_ds.catalog.target, **kwargs)
    result = train(train_ds.events, cfg, train_cfg)
    report = evaluate(EmbeddingScorer(*result.model.embeddings(result.params)), split, topk)
    return AblationResult(variant, report, result, train_ds.catalog.names)


def model_kwargs_from(cfg: ModelConfig) -> dict:
    skip = {"num_users", "num_items", "num_behaviors", "target"}
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in skip}
