"""Leave-one-out ranking evaluation against sampled negatives."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import InteractionEvent

log = logging.getLogger(__name__)

DEFAULT_TOPK = (5, 10, 20)
# upper bounds (exclusive) on training-interaction counts; the last bucket is open
BUCKET_EDGES = (5, 15, 35, 60)


@dataclass
class EvalSplit:
    users: np.ndarray             # evaluated user ids
    positives: np.ndarray         # held-out item per user
    negatives: list[np.ndarray]   # sampled negatives per user
    train_events: list[InteractionEvent]

    @property
    def candidate_sizes(self) -> np.ndarray:
        return np.array([1 + len(n) for n in self.negatives])


def make_split(events: Sequence[InteractionEvent], target: int, num_items: int,
               rng: np.random.Generator, num_negatives: int = 99,
               strict_negatives: bool = True) -> EvalSplit:
    """Hold out each user's latest target interaction and sample negatives.

    Users with fewer than two target interactions stay in training but are not
    evaluated. With ``strict_negatives`` a negative may not have been touched
    under any behavior; otherwise only target interactions are excluded.
    """
    by_user: dict[int, list[int]] = defaultdict(list)
    for idx, e in enumerate(events):
        if e.behavior == target:
            by_user[e.user].append(idx)
    touched: dict[int, set[int]] = defaultdict(set)
    for e in events:
        if strict_negatives or e.behavior == target:
            touched[e.user].add(e.item)

    held_idx, users, positives, negatives = set(), [], [], []
    for u in sorted(by_user):
        idxs = by_user[u]
        if len(idxs) < 2:
            continue
        last = max(idxs, key=lambda i: (events[i].timestamp, i))
        held_idx.add(last)
        pool = np.array(sorted(set(range(num_items)) - touched[u]), dtype=np.int64)
        if len(pool) < num_negatives:
            log.debug("user %d: only %d eligible negatives", u, len(pool))
            neg = rng.permutation(pool)
        else:
            neg = rng.choice(pool, size=num_negatives, replace=False)
        users.append(u)
        positives.append(events[last].item)
        negatives.append(np.asarray(neg, dtype=np.int64))
    short = sum(1 for n in negatives if len(n) < num_negatives)
    if short:
        log.info("%d of %d users have fewer than %d eligible negatives", short, len(users), num_negatives)
    train = [e for i, e in enumerate(events) if i not in held_idx]
    return EvalSplit(np.array(users, dtype=np.int64), np.array(positives, dtype=np.int64),
                     negatives, train)


def rank_user(pos_score: float, neg_scores) -> int:
    """1-based rank of the positive; ties with negatives count against it."""
    return 1 + int(np.sum(np.asarray(neg_scores) >= pos_score))


def hr_ndcg(rank: int, n: int) -> tuple[int, float]:
    if rank < 1:
        raise ValueError("rank is 1-based")
    if rank > n:
        return 0, 0.0
    return 1, 1.0 / np.log2(rank + 1)


class Scorer(Protocol):
    def scores(self, user: int, items: np.ndarray) -> np.ndarray: ...


@dataclass
class EmbeddingScorer:
    user_emb: np.ndarray
    item_emb: np.ndarray

    def scores(self, user: int, items: np.ndarray) -> np.ndarray:
        return self.item_emb[items] @ self.user_emb[user]


@dataclass
class PermutationScorer:
    """Scores items by a fixed random permutation, identical for every user."""
    num_items: int
    seed: int = 0

    def __post_init__(self):
        self.order = np.random.default_rng(self.seed).permutation(self.num_items).astype(np.float64)

    def scores(self, user: int, items: np.ndarray) -> np.ndarray:
        return self.order[items]


@dataclass
class MetricReport:
    topk: tuple[int, ...]
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users: int
    buckets: dict[str, dict] = field(default_factory=dict)
    mean_candidates: float = 0.0

    def to_dict(self) -> dict:
        return {
            "num_users": self.num_users,
            "mean_candidates": self.mean_candidates,
            **{f"HR@{k}": self.hr[k] for k in self.topk},
            **{f"NDCG@{k}": self.ndcg[k] for k in self.topk},
            "buckets": self.buckets,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(["num_users"] + [f"HR@{k}" for k in self.topk] + [f"NDCG@{k}" for k in self.topk])

    def csv_row(self) -> str:
        vals = [str(self.num_users)] + [repr(self.hr[k]) for k in self.topk] + \
               [repr(self.ndcg[k]) for k in self.topk]
        return ",".join(vals)


def bucket_label(count: int) -> str:
    for edge in BUCKET_EDGES:
        if count < edge:
            return f"<{edge}"
    return f">={BUCKET_EDGES[-1]}"


def evaluate(scorer: Scorer, split: EvalSplit, topk: Sequence[int] = DEFAULT_TOPK) -> MetricReport:
    if len(split.users) == 0:
        raise ValueError("evaluation split has no users")
    topk = tuple(sorted(topk))
    counts = defaultdict(int)
    for e in split.train_events:
        counts[e.user] += 1
    hits = np.zeros((len(split.users), len(topk)))
    gains = np.zeros_like(hits)
    labels = []
    for row, (u, pos, neg) in enumerate(zip(split.users, split.positives, split.negatives)):
        cand = np.concatenate([[pos], neg])
        s = scorer.scores(int(u), cand)
        r = rank_user(s[0], s[1:])
        for j, k in enumerate(topk):
            hits[row, j], gains[row, j] = hr_ndcg(r, k)
        labels.append(bucket_label(counts[int(u)]))

    def summarize(mask) -> tuple[dict, dict]:
        return ({k: float(hits[mask, j].mean()) for j, k in enumerate(topk)},
                {k: float(gains[mask, j].mean()) for j, k in enumerate(topk)})

    hr, ndcg = summarize(np.ones(len(labels), dtype=bool))
    buckets = {}
    labels_arr = np.array(labels)
    for name in [f"<{e}" for e in BUCKET_EDGES] + [f">={BUCKET_EDGES[-1]}"]:
        mask = labels_arr == name
        if mask.any():
            bh, bn = summarize(mask)
            buckets[name] = {"users": int(mask.sum()),
                             **{f"HR@{k}": bh[k] for k in topk},
                             **{f"NDCG@{k}": bn[k] for k in topk}}
        else:
            buckets[name] = {"users": 0}
    return MetricReport(topk, hr, ndcg, len(split.users), buckets,
                        float(split.candidate_sizes.mean()))
