"""Model assembly: named parameters, the full forward pass and the joint objective."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import gate_fuse, long_term_loss, short_term_loss
from .data import InteractionEvent, SlotConfig, SlotGraph, build_graphs
from .encoder import EncoderParams, encode_slot, temporal_context
from .memory import MemoryParams, run_memory_chain, stack_behaviors

VARIANTS = ("full", "wo_mbg")


@dataclass(frozen=True)
class ModelConfig:
    num_users: int
    num_items: int
    num_behaviors: int
    target: int
    num_slots: int = 3
    granularity: float = 86400.0
    dim: int = 32
    layers: int = 2
    heads: int = 1
    tau: float = 0.1
    alpha: float = 0.01
    beta: float = 0.01
    zeta_init: float = 0.5
    temporal_injection: bool = True
    time_scale: float = 0.03        # amplitude of the per-edge time code
    tie_weights_across_slots: bool = True
    bpr_all_behaviors: bool = False
    item_side_cl: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.layers not in (1, 2, 3, 4):
            raise ValueError("layers must be in {1, 2, 3, 4}")
        if self.dim % 2 or self.dim % self.heads:
            raise ValueError("dim must be even and divisible by heads")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.target < self.num_behaviors:
            raise ValueError("target behavior out of range")

    @property
    def slot_config(self) -> SlotConfig:
        return SlotConfig(self.granularity, self.num_slots)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _enc_key(cfg: ModelConfig, t: int, b: int, name: str) -> str:
    if cfg.tie_weights_across_slots:
        return f"enc/b{b}/{name}"
    return f"enc/t{t}/b{b}/{name}"


def _e0_key(cfg: ModelConfig, t: int, b: int) -> str:
    return f"E0/b{b}" if cfg.tie_weights_across_slots else f"E0/t{t}/b{b}"


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, PReLU slopes at 0.25, blend scalars at ``zeta_init``."""
    d, B = cfg.dim, cfg.num_behaviors
    p: dict[str, np.ndarray] = {}
    slots = [0] if cfg.tie_weights_across_slots else range(cfg.num_slots)
    if cfg.variant == "wo_mbg":
        for b in range(B):
            p[f"id/user/b{b}"] = xavier(rng, (cfg.num_users, d))
            p[f"id/item/b{b}"] = xavier(rng, (cfg.num_items, d))
    else:
        for t in slots:
            for b in range(B):
                p[_e0_key(cfg, t, b)] = xavier(rng, (cfg.num_items, d))
                for l in range(cfg.layers):
                    p[_enc_key(cfg, t, b, f"W_item{l}")] = xavier(rng, (d, d))
                    p[_enc_key(cfg, t, b, f"slope_item{l}")] = np.array(0.25)
                p[_enc_key(cfg, t, b, "W_cat")] = xavier(rng, (cfg.layers * d, d))
                p[_enc_key(cfg, t, b, "W_user")] = xavier(rng, (d, d))
                p[_enc_key(cfg, t, b, "slope_user")] = np.array(0.25)
        for b in range(B):
            p[f"enc/b{b}/W_zeta"] = xavier(rng, (d, d))
            p[f"enc/b{b}/zeta"] = np.array(cfg.zeta_init)
    p["mem/W_Q"] = xavier(rng, (d, d))
    p["mem/W_K"] = xavier(rng, (d, d))
    p["fuse/W_f"] = xavier(rng, (d,))
    return p


def clamp_params(params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        if k.endswith("/zeta"):
            np.clip(v, 0.0, 1.0, out=v)


def as_leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.parameter(v, k) for k, v in params.items()}


@dataclass
class ForwardOutput:
    slot_user: list[Tensor]          # per slot, (B, U, d)
    slot_item: list[Tensor]          # per slot, (B, I, d)
    slot_fused_user: list[Tensor]    # per slot, (U, d)
    slot_fused_item: list[Tensor]
    refined_user: Tensor             # final slot, (B, U, d)
    refined_item: Tensor
    fused_user: Tensor               # (U, d)
    fused_item: Tensor
    attention_user: list[np.ndarray] = field(default_factory=list)   # per slot pair, (U, B, B)
    attention_item: list[np.ndarray] = field(default_factory=list)


class Model:
    """Graphs built from one training log, plus the forward pass over them."""

    def __init__(self, cfg: ModelConfig, events: list[InteractionEvent]):
        self.cfg = cfg
        self.graphs: dict[tuple[int, int], SlotGraph] = build_graphs(
            events, cfg.num_users, cfg.num_items, cfg.num_behaviors, cfg.slot_config)
        self.time_context: dict[tuple[int, int], np.ndarray | None] = {
            key: cfg.time_scale * temporal_context(g, cfg.dim, cfg.granularity)
            if cfg.temporal_injection else None
            for key, g in self.graphs.items()
        }

    def encoder_params(self, leaves: Mapping[str, Tensor], t: int, b: int) -> EncoderParams:
        cfg = self.cfg
        key = lambda name: _enc_key(cfg, t, b, name)  # noqa: E731
        return EncoderParams(
            W_item=[leaves[key(f"W_item{l}")] for l in range(cfg.layers)],
            slope_item=[leaves[key(f"slope_item{l}")] for l in range(cfg.layers)],
            W_cat=leaves[key("W_cat")],
            W_user=leaves[key("W_user")],
            slope_user=leaves[key("slope_user")],
            W_zeta=leaves[f"enc/b{b}/W_zeta"],
            zeta=leaves[f"enc/b{b}/zeta"],
        )

    def encode(self, leaves: Mapping[str, Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        cfg = self.cfg
        B = cfg.num_behaviors
        if cfg.variant == "wo_mbg":
            users = stack_behaviors([leaves[f"id/user/b{b}"] for b in range(B)])
            items = stack_behaviors([leaves[f"id/item/b{b}"] for b in range(B)])
            return [users] * cfg.num_slots, [items] * cfg.num_slots
        slot_user, slot_item = [], []
        prev_items: list[Tensor | None] = [None] * B
        for t in range(cfg.num_slots):
            u_tabs, i_tabs = [], []
            for b in range(B):
                emb = encode_slot(self.graphs[(t, b)], self.encoder_params(leaves, t, b),
                                  leaves[_e0_key(cfg, t, b)], prev_items[b],
                                  self.time_context[(t, b)])
                u_tabs.append(emb.user)
                i_tabs.append(emb.item)
            prev_items = i_tabs
            slot_user.append(stack_behaviors(u_tabs))
            slot_item.append(stack_behaviors(i_tabs))
        return slot_user, slot_item

    def forward(self, leaves: Mapping[str, Tensor]) -> ForwardOutput:
        W_f = leaves["fuse/W_f"]
        slot_user, slot_item = self.encode(leaves)
        mem = MemoryParams(leaves["mem/W_Q"], leaves["mem/W_K"], self.cfg.heads)
        _, ref_u, att_u = run_memory_chain(slot_user, mem)
        _, ref_i, att_i = run_memory_chain(slot_item, mem)
        return ForwardOutput(
            slot_user=slot_user,
            slot_item=slot_item,
            slot_fused_user=[gate_fuse(s, W_f) for s in slot_user],
            slot_fused_item=[gate_fuse(s, W_f) for s in slot_item] if self.cfg.item_side_cl else [],
            refined_user=ref_u,
            refined_item=ref_i,
            fused_user=gate_fuse(ref_u, W_f),
            fused_item=gate_fuse(ref_i, W_f),
            attention_user=att_u,
            attention_item=att_i,
        )

    def embeddings(self, params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        out = self.forward({k: ad.Tensor(v) for k, v in params.items()})
        return out.fused_user.data, out.fused_item.data


# --- objective -------------------------------------------------------------

def l2_penalty(leaves: Mapping[str, Tensor]) -> Tensor:
    total = ad.as_tensor(0.0)
    for k in sorted(leaves):
        total = total + ad.tsum(leaves[k] * leaves[k])
    return total


def bpr_loss(user_emb, item_emb, triples: np.ndarray, l2_lambda: float = 0.0,
             leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Mean of -log sigmoid(s(u, i+) - s(u, i-)) plus an L2 term on every leaf."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    eu = ad.index(user_emb, triples[:, 0])
    diff = ad.dot(eu, ad.index(item_emb, triples[:, 1])) - ad.dot(eu, ad.index(item_emb, triples[:, 2]))
    loss = -ad.mean(ad.log_sigmoid(diff))
    if l2_lambda and leaves:
        loss = loss + l2_lambda * l2_penalty(leaves)
    return loss


def total_loss(bpr, long_cl, short_cl, alpha: float, beta: float):
    return bpr + alpha * long_cl + beta * short_cl


@dataclass
class LossParts:
    bpr: Tensor
    long_cl: Tensor
    short_cl: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("bpr", "long_cl", "short_cl", "total")}


def objective(model: Model, leaves: Mapping[str, Tensor], triples: np.ndarray,
              l2_lambda: float, aux_triples: Mapping[int, np.ndarray] | None = None,
              contrastive: bool = True) -> LossParts:
    """Joint loss for one batch: BPR on the target, plus weighted InfoNCE terms.

    With ``contrastive=False`` or both weights zero the InfoNCE terms are not
    built at all and are reported as exact zeros.
    """
    cfg = model.cfg
    out = model.forward(leaves)
    bpr = bpr_loss(out.fused_user, out.fused_item, triples, l2_lambda, leaves)
    for b, trip in (aux_triples or {}).items():
        if len(trip):
            bpr = bpr + bpr_loss(ad.index(out.refined_user, b), ad.index(out.refined_item, b), trip)
    zero = ad.as_tensor(0.0)
    long_cl = short_cl = zero
    users = np.unique(np.asarray(triples, dtype=np.int64).reshape(-1, 3)[:, 0])
    if contrastive and cfg.alpha:
        long_cl = long_term_loss(out.refined_user, out.fused_user, users, cfg.tau)
        if cfg.item_side_cl:
            items = np.unique(np.asarray(triples).reshape(-1, 3)[:, 1:])
            long_cl = long_cl + long_term_loss(out.refined_item, out.fused_item, items, cfg.tau)
    if contrastive and cfg.beta:
        short_cl = short_term_loss(out.slot_user, out.slot_fused_user, users, cfg.tau)
        if cfg.item_side_cl:
            items = np.unique(np.asarray(triples).reshape(-1, 3)[:, 1:])
            short_cl = short_cl + short_term_loss(out.slot_item, out.slot_fused_item, items, cfg.tau)
    total = bpr
    if long_cl is not zero:
        total = total + cfg.alpha * long_cl
    if short_cl is not zero:
        total = total + cfg.beta * short_cl
    return LossParts(bpr, long_cl, short_cl, total)
