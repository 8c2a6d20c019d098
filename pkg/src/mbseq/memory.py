"""Cross-relational memory: behavior x behavior attention between adjacent slots."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MemoryParams:
    W_Q: Tensor
    W_K: Tensor
    heads: int = 1


def stack_behaviors(tables: Sequence) -> Tensor:
    tables = [ad.as_tensor(t) for t in tables]
    shapes = {t.shape for t in tables}
    if len(shapes) != 1:
        raise ValueError(f"behavior tables disagree in shape: {sorted(shapes)}")
    return ad.stack(tables, axis=0)


def cross_attention(E_t, E_prev, params: MemoryParams) -> tuple[Tensor, np.ndarray]:
    """Attend from each behavior at slot t to every behavior at slot t-1, per node.

    Shapes follow the broadcast pipeline: Q (B,1,N,d) * K (1,B,N,d) is
    reduce-summed over d to (B,B,N), softmaxed over the key-behavior axis,
    then weights (B,B,N,1) * V (1,B,N,d) are summed over the key axis.

    Returns the attended tensor (B,N,d) and the weights laid out as (N,B,B).
    """
    E_t, E_prev = ad.as_tensor(E_t), ad.as_tensor(E_prev)
    if E_t.shape != E_prev.shape:
        raise ValueError(f"slot tensors differ: {E_t.shape} vs {E_prev.shape}")
    nb, n, d = E_t.shape
    if d % params.heads:
        raise ValueError(f"heads={params.heads} must divide d={d}")
    q = ad.reshape(ad.matmul(E_t, params.W_Q), (nb, 1, n, d))
    k = ad.reshape(ad.matmul(E_prev, params.W_K), (1, nb, n, d))
    v = ad.reshape(E_prev, (1, nb, n, d))
    logits = ad.tsum(q * k, axis=-1) / math.sqrt(d / params.heads)
    weights = ad.softmax(logits, axis=1)
    z = ad.tsum(ad.reshape(weights, (nb, nb, n, 1)) * v, axis=1)
    return z, np.transpose(weights.data, (2, 0, 1))


def refine(E_t, Z) -> Tensor:
    """Mean of the slot tensor and its attended memory, element by element."""
    return (ad.as_tensor(E_t) + Z) * 0.5


def run_memory_chain(slots: Sequence, params: MemoryParams):
    """Refine every slot t >= 1 against slot t-1.

    Attention always reads the raw stacked tensors. Returns the list of
    refined tensors (for slots 1..) and the final one; a single slot passes
    through untouched.
    """
    slots = [ad.as_tensor(s) for s in slots]
    if len(slots) < 2:
        return [], slots[-1], []
    refined, maps = [], []
    for t in range(1, len(slots)):
        z, attn = cross_attention(slots[t], slots[t - 1], params)
        refined.append(refine(slots[t], z))
        maps.append(attn)
    return refined, refined[-1], maps
