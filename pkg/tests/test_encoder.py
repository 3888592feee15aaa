import numpy as np
import pytest

from graphcap import autodiff as ad
from graphcap.autodiff import Tensor
from graphcap.encoder import (
    GatLayerParams,
    attention_coefficients,
    batch_graphs,
    embed_nodes,
    encode,
    gat_layer_forward,
)
from graphcap.errors import ConfigError, DimensionError, LabelSpaceError
from graphcap.scene_graph import ObjectNode, RelationEdge, SceneGraph, reify

from helpers import LABELS, random_graph


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def layer(W, a):
    return GatLayerParams(Tensor(np.asarray(W, float), requires_grad=True), Tensor(np.asarray(a, float), requires_grad=True))


def random_layer(rng, d_in, d_out, scale=1.0):
    return layer(rng.normal(scale=scale, size=(d_out, d_in)), rng.normal(scale=scale, size=2 * d_out))


def two_nodes():
    return np.ones((2, 2), dtype=bool)


# ------------------------------------------------------------------ embedding


def test_embed_nodes_shapes_and_shared_rows():
    g = reify(SceneGraph([ObjectNode(0, "dog"), ObjectNode(1, "dog")], [RelationEdge(0, 1, "near")]))
    table = Tensor(np.random.default_rng(0).normal(size=(LABELS.size, 5)))
    V = embed_nodes(g, table, LABELS)
    assert V.shape == (3, 5)
    np.testing.assert_array_equal(V.data[0], V.data[1])
    np.testing.assert_array_equal(V.data[2], table.data[LABELS.size - len(LABELS.predicates) + 1])


def test_embed_unknown_label():
    g = reify(SceneGraph([ObjectNode(0, "xyz"), ObjectNode(1, "dog")], []))
    with pytest.raises(LabelSpaceError):
        embed_nodes(g, Tensor(np.zeros((LABELS.size, 2))), LABELS)


def test_batch_graphs_is_block_diagonal():
    g1 = reify(SceneGraph([ObjectNode(0, "dog"), ObjectNode(1, "cat")], [RelationEdge(0, 1, "on")]))
    g2 = reify(SceneGraph([ObjectNode(0, "man"), ObjectNode(1, "tree")], []))
    batch = batch_graphs([g1, g2], LABELS)
    assert batch.count == 2
    np.testing.assert_array_equal(batch.segments, [0, 0, 0, 1, 1])
    assert not batch.adjacency[:3, 3:].any() and not batch.adjacency[3:, :3].any()
    np.testing.assert_array_equal(batch.membership, [[1, 1, 1, 0, 0], [0, 0, 0, 1, 1]])


# -------------------------------------------------------------- coefficients


def test_zero_attention_vector_gives_uniform_weights():
    rng = np.random.default_rng(1)
    adj = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    alpha = attention_coefficients(Tensor(rng.normal(size=(3, 4))), layer(rng.normal(size=(4, 4)), np.zeros(8)), adj).data
    np.testing.assert_allclose(alpha, adj / adj.sum(1, keepdims=True), atol=1e-15)


def test_isolated_node_attends_to_itself():
    alpha = attention_coefficients(Tensor(np.ones((1, 3))), random_layer(np.random.default_rng(2), 3, 3),
                                   np.ones((1, 1), dtype=bool)).data
    assert alpha.tolist() == [[1.0]]


def test_two_node_hand_computed_coefficients():
    V = Tensor(np.array([[1.0, 2.0], [-1.0, 0.5]]))
    # a = [1, 0, 0, 0]: only the source half, so each row is uniform.
    alpha = attention_coefficients(V, layer(np.eye(2), [1, 0, 0, 0]), two_nodes()).data
    np.testing.assert_allclose(alpha, np.full((2, 2), 0.5), atol=1e-15)
    # a = [0, 0, 1, 0]: score_ij = LeakyReLU(v_j[0]) = [1, -0.2] for every row.
    alpha = attention_coefficients(V, layer(np.eye(2), [0, 0, 1, 0]), two_nodes()).data
    p = np.exp(1.0) / (np.exp(1.0) + np.exp(-0.2))
    np.testing.assert_allclose(alpha, [[p, 1 - p], [p, 1 - p]], atol=1e-15)
    # a = [1, 0, 1, 0]: score_ij = LeakyReLU(v_i[0] + v_j[0]).
    alpha = attention_coefficients(V, layer(np.eye(2), [1, 0, 1, 0]), two_nodes()).data
    row0 = np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum()
    row1 = np.exp([0.0, -0.4]) / np.exp([0.0, -0.4]).sum()
    np.testing.assert_allclose(alpha, [row0, row1], atol=1e-15)


def test_attention_rows_sum_to_one_on_random_graphs():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = reify(random_graph(rng, 8, 10))
        if len(g) == 0:
            continue
        V = Tensor(rng.normal(size=(len(g), 6)))
        adj = g.adjacency()
        alpha = attention_coefficients(V, random_layer(rng, 6, 5, 2.0), adj).data
        assert (alpha[~adj] == 0).all() and (alpha >= 0).all()
        worst = max(worst, float(np.abs(alpha.sum(1) - 1).max()))
    assert worst < 1e-9


# --------------------------------------------------------------------- layer


def test_isolated_node_closed_form():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(1, 4))
    lyr = random_layer(rng, 4, 3)
    out = gat_layer_forward(Tensor(v), np.ones((1, 1), bool), lyr, training=False).data
    np.testing.assert_array_equal(out, sigmoid(v @ lyr.W.data.T))


def test_uniform_attention_averages_neighbors():
    v, u = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.5, -0.7])
    out = gat_layer_forward(Tensor(np.stack([v, u])), two_nodes(), layer(np.eye(3), np.zeros(6))).data
    np.testing.assert_allclose(out[0], sigmoid((v + u) / 2), atol=1e-15)


def test_outputs_lie_in_unit_interval():
    rng = np.random.default_rng(4)
    g = reify(random_graph(rng, 8, 8))
    out = gat_layer_forward(Tensor(rng.normal(size=(len(g), 5))), g.adjacency(), random_layer(rng, 5, 5)).data
    assert ((out > 0) & (out < 1)).all()


def test_dropout_acts_only_in_training():
    rng = np.random.default_rng(5)
    V, lyr, adj = Tensor(rng.normal(size=(3, 4))), random_layer(rng, 4, 4), np.ones((3, 3), bool)
    eval_out = gat_layer_forward(V, adj, lyr, 0.25, training=False).data
    no_drop = gat_layer_forward(V, adj, lyr, 0.0, training=True, rng=np.random.default_rng(0)).data
    dropped = gat_layer_forward(V, adj, lyr, 0.25, training=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(eval_out, no_drop)
    assert not np.array_equal(eval_out, dropped)


def test_layer_shape_errors():
    lyr = random_layer(np.random.default_rng(6), 4, 3)
    with pytest.raises(DimensionError):
        gat_layer_forward(Tensor(np.ones((2, 5))), two_nodes(), lyr)
    bad = GatLayerParams(lyr.W, Tensor(np.ones(5)))
    with pytest.raises(DimensionError):
        gat_layer_forward(Tensor(np.ones((2, 4))), two_nodes(), bad)


# -------------------------------------------------------------------- encode


def test_zero_layers_is_identity():
    V = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    assert encode(V, np.eye(3, dtype=bool), []) is V


def test_two_layers_on_single_node():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(1, 4))
    l1, l2 = random_layer(rng, 4, 4), random_layer(rng, 4, 4)
    out = encode(Tensor(v), np.ones((1, 1), bool), [l1, l2]).data
    np.testing.assert_array_equal(out, sigmoid(sigmoid(v @ l1.W.data.T) @ l2.W.data.T))


def test_encode_width_mismatch():
    rng = np.random.default_rng(9)
    with pytest.raises(ConfigError):
        encode(Tensor(np.ones((1, 4))), np.ones((1, 1), bool), [random_layer(rng, 4, 3), random_layer(rng, 4, 4)])


@pytest.mark.parametrize("n", [1, 2, 7])
def test_encode_output_shape(n):
    rng = np.random.default_rng(n)
    layers = [random_layer(rng, 6, 5), random_layer(rng, 5, 5)]
    assert encode(Tensor(rng.normal(size=(n, 6))), np.ones((n, n), bool), layers).shape == (n, 5)


def test_permutation_equivariance():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = reify(random_graph(rng, 8, 10))
        n = len(g)
        if n == 0:
            continue
        V, adj = rng.normal(size=(n, 5)), g.adjacency()
        layers = [random_layer(rng, 5, 5), random_layer(rng, 5, 5)]
        perm = rng.permutation(n)
        out = encode(Tensor(V), adj, layers).data
        out_p = encode(Tensor(V[perm]), adj[np.ix_(perm, perm)], layers).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-14)


def test_gradient_through_two_layers():
    rng = np.random.default_rng(10)
    g = reify(SceneGraph([ObjectNode(0, "dog"), ObjectNode(1, "cat"), ObjectNode(2, "man")],
                         [RelationEdge(0, 1, "on"), RelationEdge(2, 1, "near")]))
    adj = g.adjacency()
    params = {"V": Tensor(rng.normal(size=(len(g), 4)), requires_grad=True)}
    l1, l2 = random_layer(rng, 4, 4, 1.5), random_layer(rng, 4, 4, 1.5)
    params.update({"W1": l1.W, "a1": l1.a, "W2": l2.W, "a2": l2.a})
    R = rng.normal(size=(len(g), 4))

    def f(p):
        return ad.sum(ad.mul(encode(p["V"], adj, [l1, l2]), R))

    report = ad.finite_difference_check(f, params)
    assert report.max_error < 1e-4, report.per_param
