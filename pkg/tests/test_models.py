import math

import numpy as np
import pytest

from fedrecsim.checks import FD_TOL, attack_loss_fd_error, rec_loss_fd_error, toy_instance
from fedrecsim.models import LocalGraph, PublicParams, Recommender, init_public, rank_top_k, sigmoid

from conftest import random_pub
from oracles import brute_top_k


def straight_line_logit(kind, u, V, theta, graph_items, j):
    """Independent scalar forward pass written out loop by loop."""
    d = V.shape[1]
    if kind == "ncf":
        ur, vr = list(u), list(V[j])
    else:
        n = len(graph_items)
        c = 1.0 / math.sqrt(n) if n else 0.0
        ur = [0.5 * (u[a] + c * sum(V[g][a] for g in graph_items)) for a in range(d)]
        extra = c if j in set(graph_items) else 0.0
        vr = [0.5 * (V[j][a] + extra * u[a]) for a in range(d)]
    h = ur + vr
    n_layers = len(theta) // 2
    for i in range(n_layers):
        W, b = theta[f"W{i}"], theta[f"b{i}"]
        out = []
        for col in range(W.shape[1]):
            z = b[col] + sum(h[r] * W[r, col] for r in range(W.shape[0]))
            out.append(max(z, 0.0) if i < n_layers - 1 else z)
        h = out
    return h[0]


def test_zero_network_scores_one_half(model):
    pub = init_public(7, 3, [6, 4], np.random.default_rng(0))
    pub.item_emb[:] = 0.0
    for k in pub.theta:
        pub.theta[k][:] = 0.0
    s = model.score(np.zeros(3), pub, LocalGraph.of([1, 2]), np.arange(7))
    np.testing.assert_array_equal(s, np.full(7, 0.5))


def test_forward_matches_straight_line_code(model, rng):
    for _ in range(5):
        pub = random_pub(rng)
        u = rng.normal(size=4)
        graph = LocalGraph.of(rng.choice(12, size=3, replace=False))
        got = model.all_logits(u, pub, graph)
        want = [straight_line_logit(model.kind, u, pub.item_emb, pub.theta, graph.items.tolist(), j)
                for j in range(12)]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_zero_logit_loss_is_ln2_per_sample(model):
    pub = init_public(5, 2, [4, 3], np.random.default_rng(0))
    for k in pub.theta:
        pub.theta[k][:] = 0.0
    loss, *_ = model.rec_loss_and_grads(np.ones(2), pub, LocalGraph.of([0]), [0, 1, 2], [1, 0, 0])
    assert loss == pytest.approx(3 * math.log(2), abs=1e-12)


def test_clamped_predictions_give_bounded_loss_and_no_gradient():
    m = Recommender("ncf", head="dot")
    pub = PublicParams(np.array([[100.0], [-100.0]]))
    loss, g_u, (ids, rows), _, n_clamped = m.rec_loss_and_grads(np.array([1.0]), pub, LocalGraph.of([0]),
                                                                 [0, 1], [0, 1])
    assert n_clamped == 2
    assert loss == pytest.approx(-2 * math.log(1e-7), rel=1e-9)
    assert np.all(g_u == 0) and np.all(rows == 0)


@pytest.mark.parametrize("kind", ["ncf", "lightgcn"])
def test_rec_and_attack_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(5):
        inst = toy_instance(kind, rng)
        assert rec_loss_fd_error(inst) < FD_TOL
        assert attack_loss_fd_error(inst) < FD_TOL


def test_ncf_item_gradient_touches_only_batch_items(rng):
    pub = random_pub(rng)
    m = Recommender("ncf")
    _, _, (ids, _), _, _ = m.rec_loss_and_grads(rng.normal(size=4), pub, LocalGraph.of([1, 2]), [5, 1, 5, 9],
                                                [1, 1, 0, 0])
    assert ids.tolist() == [1, 5, 9]


def test_lightgcn_item_gradient_covers_batch_and_graph(rng):
    pub = random_pub(rng)
    m = Recommender("lightgcn")
    _, _, (ids, _), _, _ = m.rec_loss_and_grads(rng.normal(size=4), pub, LocalGraph.of([1, 2]), [5, 9], [1, 0])
    assert ids.tolist() == [1, 2, 5, 9]


def test_top_k_matches_brute_force_with_ties():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        scores = rng.integers(0, 5, size=n).astype(float)  # plenty of ties
        exclude = rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist()
        k = int(rng.integers(0, n - len(exclude) + 1))
        assert rank_top_k(scores, exclude, k).tolist() == brute_top_k(scores, exclude, k)


def test_top_k_via_model_and_errors(model, rng):
    pub = random_pub(rng)
    u, g = rng.normal(size=4), LocalGraph.of([0, 3])
    s = model.all_logits(u, pub, g)
    assert model.top_k(u, pub, g, [0, 3], 5).tolist() == brute_top_k(s, [0, 3], 5)
    with pytest.raises(ValueError):
        model.top_k(u, pub, g, [0, 3], 11)


def test_logit_matrix_equals_per_user_logits(model, rng):
    pub = random_pub(rng)
    users = rng.normal(size=(6, 4))
    graphs = [LocalGraph.of(rng.choice(12, size=int(rng.integers(1, 5)), replace=False)) for _ in range(6)]
    mat = model.logit_matrix(users, pub, graphs)
    for i in range(6):
        np.testing.assert_allclose(mat[i], model.all_logits(users[i], pub, graphs[i]), rtol=0, atol=1e-12)


def test_score_rejects_out_of_range_item(model, rng):
    with pytest.raises(IndexError):
        model.score(np.zeros(4), random_pub(rng), LocalGraph.of([0]), [12])


def test_bad_batch_and_constructor_arguments(rng):
    m = Recommender("ncf")
    pub = random_pub(rng)
    with pytest.raises(ValueError):
        m.rec_loss_and_grads(np.zeros(4), pub, LocalGraph.of([0]), [], [])
    with pytest.raises(ValueError):
        m.rec_loss_and_grads(np.zeros(4), pub, LocalGraph.of([0]), [1], [0.5])
    with pytest.raises(ValueError):
        Recommender("mf")
    with pytest.raises(ValueError):
        init_public(5, 4, [6, 3], rng)


def test_sigmoid_is_stable_at_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_raising_output_weight_on_active_unit_raises_score(rng):
    m = Recommender("ncf")
    pub = random_pub(rng)
    u, g = rng.normal(size=4), LocalGraph.of([0])
    x = np.concatenate([u, pub.item_emb[3]])
    h = np.maximum(np.maximum(x @ pub.theta["W0"] + pub.theta["b0"], 0) @ pub.theta["W1"] + pub.theta["b1"], 0)
    unit = int(np.argmax(h))
    assert h[unit] > 0
    before = m.score(u, pub, g, [3])[0]
    pub.theta["W2"][unit, 0] += 0.5
    assert m.score(u, pub, g, [3])[0] > before


def test_confident_negative_has_vanishing_loss():
    m = Recommender("ncf", head="dot")
    pub = PublicParams(np.array([[-12.0]]))
    loss, *_ = m.rec_loss_and_grads(np.array([1.0]), pub, LocalGraph.of([]), [0], [0])
    assert 0 < loss < 1e-5


def test_top_k_full_length_is_a_permutation_of_candidates(model, rng):
    pub = random_pub(rng)
    u, g = rng.normal(size=4), LocalGraph.of([1])
    ranked = model.top_k(u, pub, g, [1, 7], 10)
    assert sorted(ranked.tolist()) == [i for i in range(12) if i not in (1, 7)]
    scores = model.all_logits(u, pub, g)[ranked]
    assert np.all(np.diff(scores) <= 0)
