"""Short-term encoder for one (slot, behavior) graph.

Items propagate over the item-item adjacency for ``L`` layers, the layers are
concatenated and projected, and users aggregate the resulting item rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .data import SlotGraph

# sinusoid positions span [0, POSITION_SCALE) across one slot
POSITION_SCALE = 1000.0


@dataclass
class EncoderParams:
    """Weights used to encode one (slot, behavior) graph."""
    W_item: list[Tensor]        # one d x d per layer
    slope_item: list[Tensor]    # one PReLU slope per layer
    W_cat: Tensor               # (L*d) x d
    W_user: Tensor
    slope_user: Tensor
    W_zeta: Tensor
    zeta: Tensor

    @property
    def layers(self) -> int:
        return len(self.W_item)


@dataclass
class SlotEmbeddings:
    item: Tensor
    user: Tensor


def propagate_item_layer(E_prev, gamma_ii: sp.spmatrix, W_item, slope) -> Tensor:
    return ad.prelu(ad.matmul(ad.spmm(gamma_ii, E_prev), W_item), slope)


def aggregate_layers(layers: Sequence, W_cat) -> Tensor:
    if not layers:
        raise ValueError("need at least one layer")
    cat = layers[0] if len(layers) == 1 else ad.concat(layers, axis=1)
    return ad.normalize_rows(ad.matmul(cat, W_cat))


def sinusoid(pos, d: int) -> np.ndarray:
    """Transformer-style position code; interleaves sin/cos per frequency."""
    if d % 2:
        raise ValueError("embedding dimension must be even for the time code")
    pos = np.asarray(pos, dtype=np.float64)
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    angle = pos[..., None] * freq
    out = np.empty(pos.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def temporal_encode(dt, d: int, granularity: float) -> np.ndarray:
    return sinusoid(np.asarray(dt, dtype=np.float64) / granularity * POSITION_SCALE, d)


def temporal_context(graph: SlotGraph, d: int, granularity: float) -> np.ndarray:
    """Per-user sum of normalized edge weights times each edge's time code.

    Adding the time code to every item message before aggregation is linear,
    so its contribution is a constant user x d matrix.
    """
    e = graph.edges
    ctx = np.zeros((graph.num_users, d))
    if len(e.users) == 0:
        return ctx
    w = np.asarray(graph.gamma_ui[e.users, e.items]).ravel()
    np.add.at(ctx, e.users, w[:, None] * temporal_encode(e.dt, d, granularity))
    return ctx


def propagate_user(E_item, gamma_ui: sp.spmatrix, W_user, slope,
                   time_context: np.ndarray | None = None) -> Tensor:
    msg = ad.spmm(gamma_ui, E_item)
    if time_context is not None:
        msg = msg + time_context
    return ad.normalize_rows(ad.prelu(ad.matmul(msg, W_user), slope))


def init_priori(E0_current, E_prev_slot, zeta, W_zeta) -> Tensor:
    zeta = ad.as_tensor(zeta)
    blend = zeta * E0_current + (1.0 - zeta) * E_prev_slot
    return ad.matmul(blend, W_zeta)


def encode_slot(graph: SlotGraph, params: EncoderParams, E0,
                E_prev_slot=None, time_context: np.ndarray | None = None) -> SlotEmbeddings:
    X = E0 if E_prev_slot is None else init_priori(E0, E_prev_slot, params.zeta, params.W_zeta)
    layers = []
    for W, slope in zip(params.W_item, params.slope_item):
        X = propagate_item_layer(X, graph.gamma_ii, W, slope)
        layers.append(X)
    item = aggregate_layers(layers, params.W_cat)
    user = propagate_user(item, graph.gamma_ui, params.W_user, params.slope_user, time_context)
    return SlotEmbeddings(item=item, user=user)
