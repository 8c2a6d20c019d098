import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbseq import autodiff as ad
from mbseq.autodiff import Tensor, finite_diff_check
from mbseq.data import SlotEdges, build_slot_graph
from mbseq.encoder import (EncoderParams, aggregate_layers, encode_slot, init_priori,
                           propagate_item_layer, propagate_user, sinusoid, temporal_context,
                           temporal_encode)

I2 = np.eye(2)
HAND_GAMMA = np.array([[0.75, 0.353553], [0.353553, 0.5]])


def graph_from(M, dt=None):
    items, users = np.nonzero(M)
    dt = np.zeros(len(users)) if dt is None else np.asarray(dt, dtype=float)
    return build_slot_graph(SlotEdges(users.astype(np.int64), items.astype(np.int64), dt),
                            M.shape[1], M.shape[0])


def identity_params(d, layers=1):
    eye = Tensor(np.eye(d))
    return EncoderParams(W_item=[eye] * layers, slope_item=[Tensor(0.25)] * layers,
                         W_cat=Tensor(np.vstack([np.eye(d)] * layers)), W_user=eye,
                         slope_user=Tensor(0.25), W_zeta=eye, zeta=Tensor(0.5))


def unit_rows(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def prelu(x, s=0.25):
    return np.where(x < 0, s * x, x)


# --- propagate_item_layer ----------------------------------------------------

def test_item_layer_identity_returns_gamma():
    import scipy.sparse as sp
    out = propagate_item_layer(Tensor(I2), sp.csr_matrix(HAND_GAMMA), Tensor(I2), Tensor(0.25))
    np.testing.assert_allclose(out.data, HAND_GAMMA, atol=1e-15)


def test_item_layer_zero_gamma():
    import scipy.sparse as sp
    out = propagate_item_layer(Tensor(np.ones((2, 2))), sp.csr_matrix((2, 2)), Tensor(I2), Tensor(0.25))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_prelu_negative_branch():
    import scipy.sparse as sp
    out = propagate_item_layer(Tensor(np.array([[-2.0]])), sp.csr_matrix(np.eye(1)),
                               Tensor(np.eye(1)), Tensor(0.25))
    assert out.data[0, 0] == pytest.approx(-0.5)


# --- aggregate_layers ----------------------------------------------------------

def test_aggregate_single_layer_identity():
    X = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 1.0]])
    out = aggregate_layers([Tensor(X)], Tensor(I2)).data
    np.testing.assert_allclose(out, unit_rows(X), atol=1e-15)
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])


def test_aggregate_two_layers_concatenates():
    A, B = np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])
    W = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    out = aggregate_layers([Tensor(A), Tensor(B)], Tensor(W)).data
    np.testing.assert_allclose(out, unit_rows(np.array([[1.0, 2.0]])))


def test_aggregate_needs_a_layer():
    with pytest.raises(ValueError):
        aggregate_layers([], Tensor(I2))


# --- propagate_user ------------------------------------------------------------

def test_single_edge_user_is_normalized_item():
    M = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = graph_from(M)
    E = np.array([[3.0, 4.0], [1.0, 1.0]])
    out = propagate_user(Tensor(E), g.gamma_ui, Tensor(I2), Tensor(0.25)).data
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])


def test_time_code_at_zero_is_added_to_message():
    M = np.array([[1.0]])
    g = graph_from(M, dt=[0.0])
    ctx = temporal_context(g, 4, granularity=100.0)
    np.testing.assert_allclose(ctx, [[0.0, 1.0, 0.0, 1.0]], atol=1e-15)
    E = np.array([[0.5, -0.5, 2.0, 0.0]])
    out = propagate_user(Tensor(E), g.gamma_ui, Tensor(np.eye(4)), Tensor(1.0), ctx).data
    np.testing.assert_allclose(out, unit_rows(E + [0, 1, 0, 1]), atol=1e-15)


def test_time_context_equals_per_edge_message_sum(rng):
    M = (rng.random((5, 4)) < 0.5).astype(float)
    M[0, 0] = 1.0
    n = int(M.sum())
    dt = rng.uniform(0, 100, n)
    g = graph_from(M, dt)
    d = 6
    E = rng.normal(size=(5, d))
    # oracle: every edge carries (item row + its own time code), weighted by gamma_ui
    G = g.gamma_ui.toarray()
    items, users = np.nonzero(M)
    msg = np.zeros((4, d))
    for u, i, t in zip(users, items, dt):
        msg[u] += G[u, i] * (E[i] + temporal_encode(t, d, 100.0))
    ctx = temporal_context(g, d, 100.0)
    out = propagate_user(Tensor(E), g.gamma_ui, Tensor(np.eye(d)), Tensor(1.0), ctx).data
    np.testing.assert_allclose(out, unit_rows(msg), atol=1e-12)


def test_injection_off_is_plain_aggregation(rng):
    M = (rng.random((6, 5)) < 0.4).astype(float)
    g = graph_from(M)
    E, W = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))
    out = propagate_user(Tensor(E), g.gamma_ui, Tensor(W), Tensor(0.25)).data
    np.testing.assert_allclose(out, unit_rows(prelu(g.gamma_ui.toarray() @ E @ W)), atol=1e-12)


# --- time code -------------------------------------------------------------------

def test_sinusoid_examples():
    np.testing.assert_allclose(sinusoid(0.0, 4), [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(sinusoid(1.0, 4), [0.841471, 0.540302, 0.010000, 0.999950], atol=1e-6)


def test_position_scaling():
    np.testing.assert_allclose(temporal_encode(50.0, 4, granularity=100.0), sinusoid(500.0, 4))


def test_odd_dimension_rejected():
    with pytest.raises(ValueError):
        sinusoid(0.0, 3)


@given(st.floats(0, 1e6), st.sampled_from([2, 4, 8, 16]))
def test_sin_cos_pairs_have_unit_norm(pos, d):
    p = sinusoid(pos, d)
    np.testing.assert_allclose(p[0::2] ** 2 + p[1::2] ** 2, 1.0, atol=1e-12)


# --- priori init -----------------------------------------------------------------

@pytest.mark.parametrize("zeta, expected", [(1.0, [[2.0, 0.0]]), (0.5, [[1.0, 1.0]]), (0.0, [[0.0, 2.0]])])
def test_priori_blend(zeta, expected):
    out = init_priori(Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]]), zeta, Tensor(I2))
    np.testing.assert_allclose(out.data, expected)


# --- encode_slot -----------------------------------------------------------------

def test_empty_slot_encodes_to_zeros(rng):
    g = graph_from(np.zeros((4, 3)))
    out = encode_slot(g, identity_params(2), Tensor(rng.normal(size=(4, 2))))
    assert not out.item.data.any() and not out.user.data.any()


def dense_encode(M, E0):
    gii, gui = (m.toarray() for m in (graph_from(M).gamma_ii, graph_from(M).gamma_ui))
    item = unit_rows(gii @ E0)
    return item, unit_rows(gui @ item)


def test_hand_graph_matches_composition():
    M = np.array([[1.0, 1.0], [0.0, 1.0]])
    E0 = np.eye(2)
    out = encode_slot(graph_from(M), identity_params(2), Tensor(E0))
    item, user = dense_encode(M, E0)
    np.testing.assert_allclose(out.item.data, unit_rows(HAND_GAMMA), atol=1e-6)
    np.testing.assert_allclose(out.item.data, item, atol=1e-12)
    np.testing.assert_allclose(out.user.data, user, atol=1e-12)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_identity_encoder_matches_dense_oracle(n_items, n_users, d, seed):
    r = np.random.default_rng(seed)
    M = (r.random((n_items, n_users)) < 0.5).astype(float)
    E0 = r.uniform(0, 1, (n_items, d))
    out = encode_slot(graph_from(M), identity_params(d), Tensor(E0))
    item, user = dense_encode(M, E0)
    np.testing.assert_allclose(out.item.data, item, atol=1e-10)
    np.testing.assert_allclose(out.user.data, user, atol=1e-10)
    for table in (out.item.data, out.user.data):
        norms = np.linalg.norm(table, axis=1)
        assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))


def random_params(r, d, layers):
    names = {}
    for l in range(layers):
        names[f"W_item{l}"] = r.uniform(-1, 1, (d, d))
        names[f"slope{l}"] = np.array(0.25)
    names.update(W_cat=r.uniform(-1, 1, (layers * d, d)), W_user=r.uniform(-1, 1, (d, d)),
                 slope_user=np.array(0.25), W_zeta=r.uniform(-1, 1, (d, d)), zeta=np.array(0.4))
    return names


def as_encoder(p, layers):
    return EncoderParams([p[f"W_item{l}"] for l in range(layers)],
                         [p[f"slope{l}"] for l in range(layers)],
                         p["W_cat"], p["W_user"], p["slope_user"], p["W_zeta"], p["zeta"])


def test_encoder_gradients_pass_finite_differences(rng):
    M = (rng.random((5, 4)) < 0.5).astype(float)
    M[:, 0] = 1.0
    g = graph_from(M, dt=rng.uniform(0, 50, int(M.sum())))
    d, layers = 4, 2
    params = random_params(rng, d, layers)
    params["E0"] = rng.uniform(-1, 1, (5, d))
    params["E_prev"] = rng.uniform(-1, 1, (5, d))
    ctx = temporal_context(g, d, 100.0)
    pu, pi = rng.uniform(-1, 1, (4, d)), rng.uniform(-1, 1, (5, d))

    def loss(p):
        out = encode_slot(g, as_encoder(p, layers), p["E0"], p["E_prev"], ctx)
        return ad.tsum(out.user * pu) + ad.tsum(out.item * pi)

    report = finite_diff_check(loss, params, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_item_permutation_equivariance(rng):
    M = (rng.random((6, 4)) < 0.5).astype(float)
    d = 4
    p = {k: Tensor(v) for k, v in random_params(rng, d, 2).items()}
    enc = as_encoder(p, 2)
    E0 = rng.normal(size=(6, d))
    perm = rng.permutation(6)
    base = encode_slot(graph_from(M), enc, Tensor(E0))
    moved = encode_slot(graph_from(M[perm]), enc, Tensor(E0[perm]))
    np.testing.assert_allclose(moved.item.data, base.item.data[perm], atol=1e-12)
    np.testing.assert_allclose(moved.user.data, base.user.data, atol=1e-12)
