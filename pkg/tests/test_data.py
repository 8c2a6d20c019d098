import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbseq.data import (BehaviorCatalog, DataError, InteractionEvent, SlotConfig, SlotEdges,
                        SynthConfig, build_slot_graph, cluster_rates, drop_behaviors,
                        format_events, load_dataset, parse_events, slice_slots, slot_of,
                        synth_clusters, synth_generate, write_dataset)


def dense_gammas(M):
    """Brute-force normalized adjacencies from a dense item x user matrix."""
    item_deg = M.sum(axis=1)
    user_deg = M.sum(axis=0)
    inv = lambda v, p: np.array([x ** p if x > 0 else 0.0 for x in v])  # noqa: E731
    D_half = np.diag(inv(item_deg, -0.5))
    B_inv = np.diag(inv(user_deg, -1.0))
    B_half = np.diag(inv(user_deg, -0.5))
    return D_half @ M @ B_inv @ M.T @ D_half, B_half @ M.T @ D_half


def edges_of(M):
    items, users = np.nonzero(M)
    return SlotEdges(users=users.astype(np.int64), items=items.astype(np.int64),
                     dt=np.zeros(len(users)))


# --- parsing ----------------------------------------------------------------

def test_parse_single_line():
    assert parse_events(io.StringIO("0,5,1,1000\n"), 1, 6, 4) == [InteractionEvent(0, 5, 1, 1000)]


def test_parse_empty_file():
    assert parse_events(io.StringIO(""), 1, 1, 1) == []


def test_parse_behavior_out_of_range_names_field():
    with pytest.raises(DataError, match="behavior"):
        parse_events(io.StringIO("0,5,9,1000\n"), 1, 6, 4)


def test_parse_reports_line_number():
    with pytest.raises(DataError, match="line 3"):
        parse_events(io.StringIO("user,item,behavior,timestamp\n0,1,0,5\n0,x,0,7\n"), 1, 2, 1)


def test_parse_wrong_field_count():
    with pytest.raises(DataError, match="line 1"):
        parse_events(io.StringIO("0,1,0\n"), 1, 2, 1)


def test_parse_skips_header_and_sorts():
    text = "user,item,behavior,timestamp\n1,0,0,5\n0,1,0,9\n0,0,0,3\n"
    evs = parse_events(io.StringIO(text), 2, 2, 1)
    assert [(e.user, e.timestamp) for e in evs] == [(0, 3), (0, 9), (1, 5)]


def test_csv_round_trip(tmp_path):
    ds = synth_generate(SynthConfig(users=10, items=20, seed=3))
    write_dataset(ds, tmp_path / "ev.csv")
    back = load_dataset(tmp_path / "ev.csv")
    assert back.events == ds.events
    assert back.catalog == ds.catalog
    assert (back.num_users, back.num_items) == (10, 20)


def test_catalog_rejects_duplicates_and_bad_target():
    with pytest.raises(DataError):
        BehaviorCatalog(("a", "a"), 0)
    with pytest.raises(DataError):
        BehaviorCatalog(("a", "b"), 2)


# --- slicing ----------------------------------------------------------------

def test_slot_examples():
    cfg = SlotConfig(granularity=100, num_slots=3)
    sl = slice_slots([InteractionEvent(0, 0, 0, 250)], cfg, 1)
    assert list(sl[(2, 0)].dt) == [50]
    assert slot_of(0, cfg) == 0
    assert slot_of(10**9, cfg) == 2


def test_duplicates_collapse_to_earliest_offset():
    cfg = SlotConfig(granularity=100, num_slots=2)
    evs = [InteractionEvent(0, 1, 0, 180), InteractionEvent(0, 1, 0, 120), InteractionEvent(0, 1, 0, 150)]
    e = slice_slots(evs, cfg, 1)[(1, 0)]
    assert len(e.users) == 1 and e.dt[0] == 20


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 5), st.integers(0, 2),
                          st.integers(0, 2000)), max_size=40))
def test_slicing_partitions_events(rows):
    cfg = SlotConfig(granularity=300, num_slots=3)
    events = [InteractionEvent(*r) for r in rows]
    sl = slice_slots(events, cfg, 3)
    assert set(sl) == {(t, b) for t in range(3) for b in range(3)}
    for e in events:
        homes = [k for k, v in sl.items()
                 if any(u == e.user and i == e.item for u, i in zip(v.users, v.items))
                 and k[1] == e.behavior and k[0] == slot_of(e.timestamp, cfg)]
        assert len(homes) == 1
    distinct = {(e.user, e.item, e.behavior, slot_of(e.timestamp, cfg)) for e in events}
    assert sum(len(v.users) for v in sl.values()) == len(distinct)


# --- graphs -----------------------------------------------------------------

def test_degrees_and_gamma_of_hand_matrix():
    M = np.array([[1, 1], [0, 1]], dtype=float)
    g = build_slot_graph(edges_of(M), num_users=2, num_items=2)
    np.testing.assert_array_equal(g.item_deg, [2, 1])
    np.testing.assert_array_equal(g.user_deg, [1, 2])
    np.testing.assert_allclose(g.gamma_ii.toarray(), [[0.75, 0.353553], [0.353553, 0.5]], atol=1e-6)
    oracle_ii, oracle_ui = dense_gammas(M)
    np.testing.assert_allclose(g.gamma_ii.toarray(), oracle_ii, atol=1e-12)
    np.testing.assert_allclose(g.gamma_ui.toarray(), oracle_ui, atol=1e-12)


def test_empty_graph_is_all_zero():
    g = build_slot_graph(edges_of(np.zeros((3, 2))), 2, 3)
    assert g.is_empty
    for m in (g.gamma_ii, g.gamma_ui):
        arr = m.toarray()
        assert np.all(arr == 0) and np.all(np.isfinite(arr))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_sparse_gammas_match_dense_oracle(n_items, n_users, seed, density):
    M = (np.random.default_rng(seed).random((n_items, n_users)) < density).astype(float)
    g = build_slot_graph(edges_of(M), n_users, n_items)
    oracle_ii, oracle_ui = dense_gammas(M)
    gii = g.gamma_ii.toarray()
    np.testing.assert_allclose(gii, oracle_ii, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g.gamma_ui.toarray(), oracle_ui, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gii, gii.T, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(g.item_deg, M.sum(axis=1))
    np.testing.assert_array_equal(g.user_deg, M.sum(axis=0))
    zero_rows = ~gii.any(axis=1)
    np.testing.assert_array_equal(zero_rows, g.item_deg == 0)


# --- synthetic generator -----------------------------------------------------

def test_synth_is_deterministic():
    a = synth_generate(SynthConfig(seed=5))
    b = synth_generate(SynthConfig(seed=5))
    assert format_events(a.events) == format_events(b.events)


def test_synth_single_cluster_has_one_rate():
    cfg = SynthConfig(users=30, items=20, clusters=1, seed=2)
    ds = synth_generate(cfg)
    uc, ic = synth_clusters(cfg)
    assert set(uc) == {0} and set(ic) == {0}
    within, cross = cluster_rates(ds, uc, ic, ds.catalog.target)
    assert within > 0 and cross == 0


def test_synth_planted_structure_default_scale():
    cfg = SynthConfig(users=200, items=100, behaviors=4, seed=0)
    ds = synth_generate(cfg)
    uc, ic = synth_clusters(cfg)
    within, cross = cluster_rates(ds, uc, ic, ds.catalog.target)
    assert within >= 5 * cross


def test_synth_behavior_structure():
    ds = synth_generate(SynthConfig(seed=4))
    t = ds.catalog.target
    per = {b: {} for b in range(ds.catalog.size)}
    for e in ds.events:
        per[e.behavior].setdefault(e.user, set()).add(e.item)
    for u in range(ds.num_users):
        bought = per[t].get(u, set())
        assert len(bought) >= 2
        for b in ds.catalog.auxiliary:
            assert bought < per[b][u]      # strict superset
    n_target = sum(len(s) for s in per[t].values())
    n_aux = sum(len(s) for b in ds.catalog.auxiliary for s in per[b].values())
    assert 5 <= n_aux / n_target <= 10


def test_synth_rejects_bad_configs():
    with pytest.raises(DataError):
        synth_generate(SynthConfig(users=3, items=10, clusters=4))
    with pytest.raises(DataError):
        synth_generate(SynthConfig(users=5, items=2, clusters=1))
    with pytest.raises(DataError):
        synth_generate(SynthConfig(users=0))


def test_drop_behaviors_reindexes_and_guards_target():
    ds = synth_generate(SynthConfig(users=10, items=30, seed=1))
    dropped = drop_behaviors(ds, [0])
    assert dropped.catalog.names == ("favorite", "cart", "purchase")
    assert dropped.catalog.target == 2
    assert all(e.behavior in (0, 1, 2) for e in dropped.events)
    with pytest.raises(DataError):
        drop_behaviors(ds, [ds.catalog.target])
    with pytest.raises(DataError):
        drop_behaviors(ds, [7])
