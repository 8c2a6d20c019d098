"""Interaction logs: parsing, synthesis, time slicing and per-slot graphs."""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, TextIO

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_BEHAVIOR_NAMES = ("view", "favorite", "cart", "purchase")


class DataError(ValueError):
    pass


class InteractionEvent(NamedTuple):
    user: int
    item: int
    behavior: int
    timestamp: int


@dataclass(frozen=True)
class BehaviorCatalog:
    names: tuple[str, ...]
    target: int

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError(f"behavior names must be unique: {self.names}")
        if not 0 <= self.target < len(self.names):
            raise DataError(f"target index {self.target} outside {len(self.names)} behaviors")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def auxiliary(self) -> list[int]:
        return [b for b in range(self.size) if b != self.target]

    @classmethod
    def default(cls, n: int) -> "BehaviorCatalog":
        """Names for ``n`` behaviors with the target (purchase) last."""
        presets = {1: ("purchase",), 2: ("view", "purchase"),
                   3: ("view", "cart", "purchase"), 4: DEFAULT_BEHAVIOR_NAMES}
        names = presets.get(n) or ("view",) + tuple(f"aux{k}" for k in range(1, n - 1)) + ("purchase",)
        return cls(tuple(names), n - 1)


@dataclass(frozen=True)
class Dataset:
    """Declared counts plus the event list; the sidecar JSON mirrors the header."""
    num_users: int
    num_items: int
    catalog: BehaviorCatalog
    events: list[InteractionEvent]
    granularity: int | None = None
    num_slots: int | None = None

    def with_events(self, events: list[InteractionEvent]) -> "Dataset":
        return Dataset(self.num_users, self.num_items, self.catalog, events,
                       self.granularity, self.num_slots)

    def sidecar(self) -> dict:
        doc = {"num_users": self.num_users, "num_items": self.num_items,
               "behaviors": list(self.catalog.names), "target": self.catalog.target}
        if self.granularity is not None:
            doc["granularity"] = self.granularity
        if self.num_slots is not None:
            doc["num_slots"] = self.num_slots
        return doc


@dataclass(frozen=True)
class SlotConfig:
    granularity: float
    num_slots: int

    def __post_init__(self):
        if not self.granularity > 0:
            raise DataError("granularity must be positive")
        if self.num_slots < 1:
            raise DataError("num_slots must be at least 1")


@dataclass
class SlotEdges:
    users: np.ndarray
    items: np.ndarray
    dt: np.ndarray


@dataclass
class SlotGraph:
    t: int
    b: int
    M: sp.csr_matrix            # item x user, 0/1
    item_deg: np.ndarray
    user_deg: np.ndarray
    gamma_ii: sp.csr_matrix     # item x item
    gamma_ui: sp.csr_matrix     # user x item
    edges: SlotEdges = field(repr=False)

    @property
    def num_items(self) -> int:
        return self.M.shape[0]

    @property
    def num_users(self) -> int:
        return self.M.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.M.nnz == 0


# --- parsing ---------------------------------------------------------------

def parse_events(stream: TextIO | Iterable[str], num_users: int, num_items: int,
                 num_behaviors: int) -> list[InteractionEvent]:
    """Read ``user,item,behavior,timestamp`` rows; a non-numeric first row is a header."""
    bounds = {"user": num_users, "item": num_items, "behavior": num_behaviors}
    events = []
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            vals = [int(c.strip()) for c in row]
        except ValueError:
            if lineno == 1:
                continue
            raise DataError(f"line {lineno}: non-integer field in {row!r}") from None
        ev = InteractionEvent(*vals)
        for fname, limit in bounds.items():
            v = getattr(ev, fname)
            if not 0 <= v < limit:
                raise DataError(f"line {lineno}: {fname} id {v} out of range [0, {limit})")
        if ev.timestamp < 0:
            raise DataError(f"line {lineno}: timestamp must be nonnegative")
        events.append(ev)
    events.sort(key=lambda e: (e.user, e.timestamp))
    return events


def read_sidecar(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    missing = {"num_users", "num_items", "behaviors", "target"} - doc.keys()
    if missing:
        raise DataError(f"sidecar {path} lacks {sorted(missing)}")
    return doc


def load_dataset(csv_path: str | Path, sidecar_path: str | Path | None = None) -> Dataset:
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    doc = read_sidecar(sidecar_path)
    catalog = BehaviorCatalog(tuple(doc["behaviors"]), int(doc["target"]))
    with csv_path.open(newline="") as fh:
        events = parse_events(fh, doc["num_users"], doc["num_items"], catalog.size)
    return Dataset(doc["num_users"], doc["num_items"], catalog, events,
                   doc.get("granularity"), doc.get("num_slots"))


def format_events(events: Iterable[InteractionEvent]) -> str:
    buf = io.StringIO()
    buf.write("user,item,behavior,timestamp\n")
    for e in events:
        buf.write(f"{e.user},{e.item},{e.behavior},{e.timestamp}\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, csv_path: str | Path, sidecar_path: str | Path | None = None) -> Path:
    """Write the CSV log and its sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    csv_path.write_text(format_events(ds.events))
    sidecar_path.write_text(json.dumps(ds.sidecar(), indent=2, sort_keys=True) + "\n")
    return sidecar_path


# --- slicing and graphs ----------------------------------------------------

def slot_of(timestamp: float, cfg: SlotConfig) -> int:
    return min(int(timestamp // cfg.granularity), cfg.num_slots - 1)


def slice_slots(events: Iterable[InteractionEvent], cfg: SlotConfig,
                num_behaviors: int) -> dict[tuple[int, int], SlotEdges]:
    """Bucket events by (slot, behavior); repeated (u, i) in a bucket keep the earliest offset."""
    first: dict[tuple[int, int], dict[tuple[int, int], float]] = defaultdict(dict)
    for e in events:
        t = slot_of(e.timestamp, cfg)
        dt = e.timestamp - t * cfg.granularity
        bucket = first[(t, e.behavior)]
        key = (e.user, e.item)
        if key not in bucket or dt < bucket[key]:
            bucket[key] = dt
    out = {}
    for t in range(cfg.num_slots):
        for b in range(num_behaviors):
            bucket = first.get((t, b), {})
            keys = sorted(bucket)
            out[(t, b)] = SlotEdges(
                users=np.array([k[0] for k in keys], dtype=np.int64),
                items=np.array([k[1] for k in keys], dtype=np.int64),
                dt=np.array([bucket[k] for k in keys], dtype=np.float64),
            )
    return out


def _inv_pow(deg: np.ndarray, power: float) -> np.ndarray:
    out = np.zeros_like(deg, dtype=np.float64)
    nz = deg > 0
    out[nz] = deg[nz] ** power
    return out


def build_slot_graph(edges: SlotEdges, num_users: int, num_items: int,
                     t: int = 0, b: int = 0) -> SlotGraph:
    """Incidence matrix, degrees and both normalized adjacencies for one bucket."""
    n = len(edges.users)
    M = sp.csr_matrix((np.ones(n), (edges.items, edges.users)), shape=(num_items, num_users))
    M.data[:] = 1.0
    item_deg = np.asarray(M.sum(axis=1)).ravel()
    user_deg = np.asarray(M.sum(axis=0)).ravel()
    d_half = sp.diags(_inv_pow(item_deg, -0.5))
    b_inv = sp.diags(_inv_pow(user_deg, -1.0))
    b_half = sp.diags(_inv_pow(user_deg, -0.5))
    gamma_ii = (d_half @ M @ b_inv @ M.T @ d_half).tocsr()
    gamma_ui = (b_half @ M.T @ d_half).tocsr()
    return SlotGraph(t, b, M, item_deg, user_deg, gamma_ii, gamma_ui, edges)


def build_graphs(events: Iterable[InteractionEvent], num_users: int, num_items: int,
                 num_behaviors: int, cfg: SlotConfig) -> dict[tuple[int, int], SlotGraph]:
    sliced = slice_slots(events, cfg, num_behaviors)
    return {key: build_slot_graph(e, num_users, num_items, *key) for key, e in sliced.items()}


# --- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    users: int = 200
    items: int = 100
    behaviors: int = 4
    num_slots: int = 3
    clusters: int = 8
    seed: int = 0
    granularity: int = 86400
    target_mean: float = 2.0       # purchases per user beyond the mandatory two
    view_ratio: float = 4.0        # view-set size relative to purchases
    minor_ratio: float = 1.5       # size of the other auxiliary sets relative to purchases
    within_prob: float = 0.5       # share of picks drawn from the user's own cluster


def _pick_items(rng: np.random.Generator, pool_in: np.ndarray, pool_out: np.ndarray,
                k: int, p_in: float, exclude: set[int]) -> list[int]:
    chosen: list[int] = []
    taken = set(exclude)
    avail_in = [i for i in pool_in if i not in taken]
    avail_out = [i for i in pool_out if i not in taken]
    for _ in range(k):
        use_in = avail_in and (not avail_out or rng.random() < p_in)
        src = avail_in if use_in else avail_out
        if not src:
            break
        j = int(rng.integers(len(src)))
        chosen.append(src.pop(j))
    return chosen


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Planted-cluster multi-behavior log.

    Users and items get latent clusters; picks land in the user's cluster with
    probability ``within_prob``. Every auxiliary behavior contains the user's
    purchases plus extra items; views precede the matching purchase in time.
    """
    if min(cfg.users, cfg.items, cfg.behaviors, cfg.num_slots, cfg.clusters) < 1:
        raise DataError("all synthetic counts must be positive")
    if cfg.clusters > min(cfg.users, cfg.items):
        raise DataError("clusters must not exceed min(users, items)")
    if cfg.items < 3:
        raise DataError("need at least 3 items so every user can hold 2 purchases and a negative")
    rng = np.random.default_rng(cfg.seed)
    catalog = BehaviorCatalog.default(cfg.behaviors)
    target = catalog.target
    horizon = cfg.granularity * cfg.num_slots

    user_cluster = rng.permutation(np.arange(cfg.users) % cfg.clusters)
    item_cluster = rng.permutation(np.arange(cfg.items) % cfg.clusters)
    members = {c: np.flatnonzero(item_cluster == c) for c in range(cfg.clusters)}
    # with one cluster every item is "within"; the split below degenerates to a single rate
    p_in = cfg.within_prob if cfg.clusters > 1 else 1.0

    events: list[InteractionEvent] = []
    for u in range(cfg.users):
        c = user_cluster[u]
        inside = members[c]
        outside = np.flatnonzero(item_cluster != c)
        n_target = min(2 + int(rng.poisson(cfg.target_mean)), cfg.items - 1)
        bought = _pick_items(rng, inside, outside, n_target, p_in, set())
        if len(bought) < 2:
            raise DataError(f"user {u}: cannot place two target interactions")
        buy_times = np.sort(rng.integers(horizon // 4, horizon, size=len(bought)))
        for item, ts in zip(bought, buy_times):
            events.append(InteractionEvent(u, item, target, int(ts)))
        for b in catalog.auxiliary:
            ratio = cfg.view_ratio if b == catalog.auxiliary[0] else cfg.minor_ratio
            extra_n = max(1, int(round((ratio - 1.0) * len(bought))))
            extra_n = min(extra_n, cfg.items - len(bought) - 1)
            extra = _pick_items(rng, inside, outside, extra_n, p_in, set(bought))
            for item, ts in zip(bought, buy_times):
                lead = int(rng.integers(0, max(1, cfg.granularity // 2)))
                events.append(InteractionEvent(u, item, b, int(max(0, ts - lead))))
            for item in extra:
                events.append(InteractionEvent(u, item, b, int(rng.integers(0, horizon))))
    events.sort(key=lambda e: (e.user, e.timestamp, e.behavior, e.item))
    return Dataset(cfg.users, cfg.items, catalog, events, cfg.granularity, cfg.num_slots)


def cluster_rates(ds: Dataset, user_cluster: np.ndarray, item_cluster: np.ndarray,
                  behavior: int) -> tuple[float, float]:
    """Empirical interaction rate per (user, item) pair within vs across clusters."""
    pairs = {(e.user, e.item) for e in ds.events if e.behavior == behavior}
    within = sum(1 for u, i in pairs if user_cluster[u] == item_cluster[i])
    cross = len(pairs) - within
    n_within = sum(int(np.sum(user_cluster == c)) * int(np.sum(item_cluster == c))
                   for c in np.unique(np.concatenate([user_cluster, item_cluster])))
    n_cross = ds.num_users * ds.num_items - n_within
    return within / max(n_within, 1), cross / max(n_cross, 1)


def synth_clusters(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Re-derive the planted cluster labels for a config (same draws as synth_generate)."""
    rng = np.random.default_rng(cfg.seed)
    user_cluster = rng.permutation(np.arange(cfg.users) % cfg.clusters)
    item_cluster = rng.permutation(np.arange(cfg.items) % cfg.clusters)
    return user_cluster, item_cluster


def drop_behaviors(ds: Dataset, behaviors: Iterable[int]) -> Dataset:
    """Remove behaviors entirely; remaining behavior ids are re-indexed in order."""
    drop = set(behaviors)
    for b in drop:
        if not 0 <= b < ds.catalog.size:
            raise DataError(f"behavior {b} does not exist")
    if ds.catalog.target in drop:
        raise DataError("the target behavior cannot be dropped")
    keep = [b for b in range(ds.catalog.size) if b not in drop]
    remap = {b: k for k, b in enumerate(keep)}
    catalog = BehaviorCatalog(tuple(ds.catalog.names[b] for b in keep), remap[ds.catalog.target])
    events = [e._replace(behavior=remap[e.behavior]) for e in ds.events if e.behavior in remap]
    return Dataset(ds.num_users, ds.num_items, catalog, events, ds.granularity, ds.num_slots)
