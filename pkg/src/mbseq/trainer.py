"""Negative sampling, optimization and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import InteractionEvent
from .evaluation import EmbeddingScorer, EvalSplit, evaluate
from .model import Model, ModelConfig, clamp_params, init_params, objective

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "bpr", "cl_long", "cl_short", "total", "HR@10", "NDCG@10")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 3e-3
    schedule: str = "fixed"          # fixed | cyclic
    lr_base: float = 1e-3
    lr_max: float = 1e-2
    lr_period: int = 10              # epochs per full triangle
    weight_decay: float = 0.0
    l2_lambda: float = 1e-4
    clip_norm: float = 5.0
    negatives: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1 or self.negatives < 1:
            raise ValueError("batch_size and negatives must be positive")
        if self.schedule not in ("fixed", "cyclic"):
            raise ValueError("schedule must be 'fixed' or 'cyclic'")
        if min(self.lr, self.lr_base, self.lr_max) <= 0 or self.lr_period < 1:
            raise ValueError("learning rates and period must be positive")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "fixed":
        return cfg.lr
    half = cfg.lr_period / 2.0
    phase = (epoch % cfg.lr_period) / half
    frac = phase if phase <= 1 else 2 - phase
    return cfg.lr_base + (cfg.lr_max - cfg.lr_base) * frac


# --- sampling --------------------------------------------------------------

def observed_items(events: Sequence[InteractionEvent], behavior: int) -> dict[int, np.ndarray]:
    seen: dict[int, set[int]] = {}
    for e in events:
        if e.behavior == behavior:
            seen.setdefault(e.user, set()).add(e.item)
    return {u: np.array(sorted(s), dtype=np.int64) for u, s in sorted(seen.items())}


def sample_triples(events: Sequence[InteractionEvent], behavior: int, num_items: int,
                   rng: np.random.Generator, per_user: Mapping[int, int] | None = None,
                   negatives: int = 1) -> np.ndarray:
    """(u, i+, i-) rows: i+ uniform over u's observed items, i- rejection-sampled.

    By default each user contributes one triple per observed item, so the
    epoch size tracks the interaction count.
    """
    rows = []
    for u, pos in observed_items(events, behavior).items():
        if len(pos) >= num_items:
            log.warning("user %d has interacted with every item; skipped", u)
            continue
        pos_set = set(pos.tolist())
        n = (per_user or {}).get(u, len(pos)) * negatives
        for _ in range(n):
            ip = int(pos[rng.integers(len(pos))])
            while True:
                ineg = int(rng.integers(num_items))
                if ineg not in pos_set:
                    break
            rows.append((u, ip, ineg))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            p = params[k]
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# --- training --------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict]
    model: Model


def train(events: Sequence[InteractionEvent], model_cfg: ModelConfig, cfg: TrainConfig,
          split: EvalSplit | None = None, contrastive: bool = True,
          params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Run the full training loop on ``events``.

    Each step re-encodes every slot graph, runs the memory chain, fuses the
    views, builds the joint loss on one batch of triples and takes an AdamW
    step. ``contrastive=False`` is the BPR-only path.
    """
    events = list(events)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, sample_rng = (np.random.default_rng(s) for s in seeds)
    model = Model(model_cfg, events)
    params = init_params(model_cfg, init_rng) if params is None else params
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    aux_behaviors = [b for b in range(model_cfg.num_behaviors)
                     if model_cfg.bpr_all_behaviors and b != model_cfg.target]
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        triples = sample_triples(events, model_cfg.target, model_cfg.num_items, sample_rng,
                                 negatives=cfg.negatives)
        if len(triples) == 0:
            raise ValueError("no target-behavior interactions to train on")
        triples = triples[sample_rng.permutation(len(triples))]
        aux = {b: sample_triples(events, b, model_cfg.num_items, sample_rng) for b in aux_behaviors}
        sums = {"bpr": 0.0, "long_cl": 0.0, "short_cl": 0.0, "total": 0.0}
        n_steps = 0
        for start in range(0, len(triples), cfg.batch_size):
            batch = triples[start:start + cfg.batch_size]
            aux_batch = {b: t[sample_rng.integers(len(t), size=len(batch))] for b, t in aux.items() if len(t)}
            leaves = {k: ad.parameter(v, k) for k, v in params.items()}
            parts = objective(model, leaves, batch, cfg.l2_lambda, aux_batch, contrastive)
            vals = parts.values()
            if not all(math.isfinite(x) for x in vals.values()):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {n_steps}: {vals}")
            grads = ad.grad(parts.total, leaves)
            norm = clip_global_norm(grads, cfg.clip_norm)
            if not math.isfinite(norm):
                raise DivergenceError(f"non-finite gradient at epoch {epoch} step {n_steps}")
            opt.step(params, grads)
            clamp_params(params)
            for k in sums:
                sums[k] += vals[k]
            n_steps += 1
        row = {"epoch": epoch, "lr": opt.lr,
               "bpr": sums["bpr"] / n_steps, "cl_long": sums["long_cl"] / n_steps,
               "cl_short": sums["short_cl"] / n_steps, "total": sums["total"] / n_steps,
               "HR@10": "", "NDCG@10": ""}
        if split is not None:
            rep = evaluate(EmbeddingScorer(*model.embeddings(params)), split, (10,))
            row["HR@10"], row["NDCG@10"] = rep.hr[10], rep.ndcg[10]
        log.info("epoch %d total=%.5f bpr=%.5f HR@10=%s", epoch, row["total"], row["bpr"], row["HR@10"])
        history.append(row)
    return TrainResult(params, history, model)


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], model_cfg: ModelConfig,
                    extra: Mapping | None = None) -> None:
    doc = {
        "format": "mbseq-checkpoint/1",
        "config": asdict(model_cfg),
        "config_hash": model_cfg.digest(),
        "params": {k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()}
                   for k, v in sorted(params.items())},
    }
    if extra:
        doc["extra"] = dict(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    doc = json.loads(Path(path).read_text())
    cfg = ModelConfig(**doc["config"])
    if cfg.digest() != doc["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return params, cfg, doc.get("extra", {})
