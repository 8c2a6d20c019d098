"""Gated behavior fusion, the cross-view InfoNCE objective and its gradient curve."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ZERO_ROW = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    alpha: float = 0.01
    beta: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


def gate_weights(tensor, W_f) -> Tensor:
    """Softmax over behaviors of each node's gate logit; shape (B, N)."""
    return ad.softmax(ad.matmul(tensor, W_f), axis=0)


def gate_fuse(tensor, W_f) -> Tensor:
    tensor = ad.as_tensor(tensor)
    nb, n, _ = tensor.shape
    w = ad.reshape(gate_weights(tensor, W_f), (nb, n, 1))
    return ad.tsum(w * tensor, axis=0)


def infonce(anchor, fused, users, tau: float) -> Tensor:
    """Mean cross-view InfoNCE over a batch of users.

    The positive pairs a user's behavior row with the same user's fused row.
    Negatives for user u are every other user's fused row and every other
    user's behavior row; similarities are cosines.
    """
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    if n < 2:
        raise ValueError("infonce needs at least two users in the batch")
    a = ad.normalize_rows(ad.index(ad.as_tensor(anchor), users))
    f = ad.normalize_rows(ad.index(ad.as_tensor(fused), users))
    cross = ad.matmul(a, ad.transpose(f)) / tau
    same = ad.matmul(a, ad.transpose(a)) / tau
    off_diag = 1.0 - np.eye(n)
    denom = ad.tsum(ad.exp(cross), axis=1) + ad.tsum(ad.exp(same) * off_diag, axis=1)
    pos = ad.dot(a, f) / tau
    return ad.mean(ad.log(denom) - pos)


def live_rows(*tables: Tensor, users=None) -> np.ndarray:
    """Users whose rows are nonzero in every given table."""
    ids = np.arange(tables[0].shape[0]) if users is None else np.asarray(users, dtype=np.int64)
    keep = np.ones(len(ids), dtype=bool)
    for t in tables:
        keep &= np.linalg.norm(t.data[ids], axis=-1) > ZERO_ROW
    return ids[keep]


def _masked_infonce(anchor: Tensor, fused: Tensor, users, tau: float) -> Tensor | None:
    ids = live_rows(anchor, fused, users=users)
    if len(ids) < 2:
        return None
    return infonce(anchor, fused, ids, tau)


def short_term_loss(slot_tables: Sequence, slot_fused: Sequence, users, tau: float) -> Tensor:
    """Sum over slots and behaviors of InfoNCE between behavior and fused views.

    ``slot_tables[t]`` is a (B, N, d) tensor, ``slot_fused[t]`` its (N, d)
    fusion. Users with an empty row in a view sit out that term.
    """
    total = ad.as_tensor(0.0)
    for stacked, fused in zip(slot_tables, slot_fused):
        for b in range(stacked.shape[0]):
            term = _masked_infonce(ad.index(stacked, b), fused, users, tau)
            if term is not None:
                total = total + term
    return total


def long_term_loss(refined, fused, users, tau: float) -> Tensor:
    total = ad.as_tensor(0.0)
    for b in range(refined.shape[0]):
        term = _masked_infonce(ad.index(refined, b), fused, users, tau)
        if term is not None:
            total = total + term
    return total


def neg_grad_curve(x, tau: float):
    """sqrt(1 - x^2) * exp(x / tau): how hard a negative at cosine x is pushed."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1):
        raise ValueError("similarity must lie in [-1, 1]")
    out = np.sqrt(1.0 - x * x) * np.exp(x / tau)
    return float(out) if out.ndim == 0 else out


def curve_turning_point(tau: float) -> float:
    """Positive root of x / (1 - x^2) = 1 / tau, where the curve peaks."""
    return (-tau + np.sqrt(tau * tau + 4.0)) / 2.0


def negative_gradient(anchor: np.ndarray, positive: np.ndarray, negatives: np.ndarray,
                      tau: float) -> np.ndarray:
    """Closed-form negative-pair part of d(InfoNCE)/d(anchor) for an unnormalized anchor.

    Each negative contributes (z_n - (z.z_n) z) exp(z.z_n / tau), scaled by
    1 / (tau ||e|| * sum over all pairs of exp(z.z_a / tau)).
    """
    e = np.asarray(anchor, dtype=np.float64)
    norm = np.linalg.norm(e)
    z = e / norm
    zp = positive / np.linalg.norm(positive)
    zn = negatives / np.linalg.norm(negatives, axis=1, keepdims=True)
    sims = zn @ z
    total = np.exp(z @ zp / tau) + np.exp(sims / tau).sum()
    tangential = zn - sims[:, None] * z
    return (tangential * np.exp(sims / tau)[:, None]).sum(axis=0) / (tau * norm * total)
