import numpy as np
import pytest

from graphcap import autodiff as ad
from graphcap.autodiff import Tensor
from graphcap.data import END, START
from graphcap.decoder import (
    MLP,
    DecodeConfig,
    DecoderParams,
    DecoderRun,
    attend,
    decode_batch,
    greedy_decode,
    init_states,
    lstm_step,
    output_distribution,
    sample_decode,
)
from graphcap.errors import ConfigError, DimensionError, ValidationError, VocabularyError
from graphcap.model import ModelConfig, init_model
from graphcap.scene_graph import LabelSpace, ObjectNode, RelationEdge, SceneGraph, reify

from helpers import numeric_grad


def T(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def random_params(rng, Vw=12, D=5, H=6, A=4, attention=False, scale=0.5):
    n = lambda *s: T(rng.normal(scale=scale, size=s))  # noqa: E731
    mlp = lambda: MLP(n(H, D), n(H), n(H, H), n(H))  # noqa: E731
    extra = dict(P_z=n(D, D), W_a=n(A, D), U_a=n(A, H), w_e=n(A)) if attention else {}
    in_width = 2 * D if attention else D
    return DecoderParams(n(Vw, D), n(4 * H, in_width), n(4 * H, H), n(4 * H), mlp(), mlp(), n(Vw, D), n(D, H), **extra)


def one_graph(n):
    return np.zeros(n, dtype=np.int64), 1


# ------------------------------------------------------------------ init states


def test_single_node_init_is_psi_of_node():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    v = rng.normal(size=(1, 5))
    h0, c0 = init_states(Tensor(v), *one_graph(1), p, None, training=False)
    np.testing.assert_array_equal(h0.data, p.psi_h(Tensor(v)).data)
    np.testing.assert_array_equal(c0.data, p.psi_c(Tensor(v)).data)


def test_init_is_permutation_invariant():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    V = rng.normal(size=(4, 5))
    a = init_states(Tensor(V), *one_graph(4), p, None, False)
    b = init_states(Tensor(V[[2, 0, 3, 1]]), *one_graph(4), p, None, False)
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-15)
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-15)


def test_opposite_nodes_pool_to_zero():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    v = rng.normal(size=5)
    h0, _ = init_states(Tensor(np.stack([v, -v])), *one_graph(2), p, None, False)
    expected = p.psi_h.W2.data @ np.tanh(p.psi_h.b1.data) + p.psi_h.b2.data
    np.testing.assert_allclose(h0.data[0], expected, atol=1e-15)


def test_empty_graph_is_rejected():
    p = random_params(np.random.default_rng(3))
    with pytest.raises(ValidationError):
        init_states(Tensor(np.zeros((0, 5))), np.zeros(0, dtype=np.int64), 1, p, None, False)


# --------------------------------------------------------------------- LSTM


def test_lstm_zero_weights_closed_form():
    H, D = 3, 2
    c = np.array([[0.4, -1.0, 2.0]])
    h_new, c_new = lstm_step(Tensor(np.ones((1, D))), Tensor(np.ones((1, H))), Tensor(c),
                             Tensor(np.zeros((4 * H, D))), Tensor(np.zeros((4 * H, H))), Tensor(np.zeros(4 * H)))
    np.testing.assert_array_equal(c_new.data, 0.5 * c)
    np.testing.assert_array_equal(h_new.data, 0.5 * np.tanh(0.5 * c))


def test_lstm_saturated_gates_keep_cell():
    H, D = 3, 2
    b = np.zeros(4 * H)
    b[:H], b[H:2 * H] = -50.0, 50.0  # input gate shut, forget gate open
    c = np.array([[0.4, -1.0, 2.0]])
    _, c_new = lstm_step(Tensor(np.ones((1, D))), Tensor(np.zeros((1, H))), Tensor(c),
                         Tensor(np.zeros((4 * H, D))), Tensor(np.zeros((4 * H, H))), Tensor(b))
    np.testing.assert_allclose(c_new.data, c, atol=1e-15)


def test_lstm_width_mismatch():
    with pytest.raises(DimensionError):
        lstm_step(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))),
                  Tensor(np.zeros((8, 4))), Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))


def test_lstm_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    H, D = 3, 4
    x, h, c = T(rng.normal(size=(2, D))), T(rng.normal(size=(2, H))), T(rng.normal(size=(2, H)))
    W_x, W_h, b = T(rng.normal(size=(4 * H, D))), T(rng.normal(size=(4 * H, H))), T(rng.normal(size=4 * H))
    R1, R2 = rng.normal(size=(2, H)), rng.normal(size=(2, H))

    def loss():
        h2, c2 = lstm_step(x, h, c, W_x, W_h, b)
        return ad.add(ad.sum(ad.mul(h2, R1)), ad.sum(ad.mul(c2, R2)))

    grads = ad.backward(loss())
    with ad.no_grad():
        for t in (x, h, c, W_x, W_h, b):
            num = numeric_grad(lambda: loss().item(), t.data)
            assert ad.relative_error(grads[t], num).max() < 1e-6


# ---------------------------------------------------------------- attention


def test_attend_single_node():
    rng = np.random.default_rng(5)
    p = random_params(rng, attention=True)
    v = rng.normal(size=(1, 5))
    z, alpha = attend(Tensor(v), Tensor(rng.normal(size=(1, 6))), p)
    assert alpha.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(z.data, v)


def test_attend_identical_nodes_split_evenly():
    rng = np.random.default_rng(6)
    p = random_params(rng, attention=True)
    v = rng.normal(size=5)
    _, alpha = attend(Tensor(np.stack([v, v])), Tensor(rng.normal(size=(1, 6))), p)
    np.testing.assert_array_equal(alpha.data, [[0.5, 0.5]])


def test_attend_zero_scorer_is_mean():
    rng = np.random.default_rng(7)
    p = random_params(rng, attention=True)
    p.w_e.data[:] = 0.0
    V = rng.normal(size=(3, 5))
    z, alpha = attend(Tensor(V), Tensor(rng.normal(size=(1, 6))), p)
    np.testing.assert_allclose(alpha.data, np.full((1, 3), 1 / 3), atol=1e-15)
    np.testing.assert_allclose(z.data[0], V.mean(0), atol=1e-15)


def test_attend_respects_graph_membership():
    rng = np.random.default_rng(8)
    p = random_params(rng, attention=True)
    membership = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]], dtype=bool)
    _, alpha = attend(Tensor(rng.normal(size=(5, 5))), Tensor(rng.normal(size=(2, 6))), p, membership)
    assert (alpha.data[~membership] == 0).all()
    np.testing.assert_allclose(alpha.data.sum(1), 1.0, atol=1e-12)


# ------------------------------------------------------------- distribution


def test_output_distribution_sums_to_one():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        att = bool(seed % 2)
        p = random_params(rng, attention=att, scale=2.0)
        z = Tensor(rng.normal(size=(3, 5))) if att else None
        probs = output_distribution(rng.integers(0, 12, size=3), Tensor(rng.normal(size=(3, 6))), p, z).data
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-9)


def test_zero_output_projection_is_uniform():
    rng = np.random.default_rng(9)
    p = random_params(rng)
    p.P_o.data[:] = 0.0
    probs = output_distribution([4], Tensor(rng.normal(size=(1, 6))), p).data
    np.testing.assert_allclose(probs, np.full((1, 12), 1 / 12), atol=1e-15)


def test_tiny_fixture_by_hand():
    """V_w=4, D=2, H=2: p = softmax(P_o tanh(E_W[y] + P_h h))."""
    E_W = np.array([[0.1, -0.2], [0.3, 0.4], [-0.5, 0.2], [0.0, 0.7]])
    P_o = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]])
    P_h = np.array([[0.5, -0.5], [0.25, 1.0]])
    h = np.array([0.2, -0.6])
    y = 1
    inner = np.tanh(np.array([0.3 + 0.5 * 0.2 - 0.5 * -0.6, 0.4 + 0.25 * 0.2 + 1.0 * -0.6]))
    logits = np.array([inner[0], inner[1], inner[0] + inner[1], -inner[0] + 0.5 * inner[1]])
    expected = np.exp(logits) / np.exp(logits).sum()
    zeros = lambda *s: T(np.zeros(s))  # noqa: E731
    p = DecoderParams(T(E_W), zeros(8, 2), zeros(8, 2), zeros(8), MLP(zeros(2, 2), zeros(2), zeros(2, 2), zeros(2)),
                      MLP(zeros(2, 2), zeros(2), zeros(2, 2), zeros(2)), T(P_o), T(P_h))
    probs = output_distribution([y], Tensor(h[None]), p).data[0]
    np.testing.assert_allclose(probs, expected, atol=1e-15)


def test_invalid_previous_token():
    p = random_params(np.random.default_rng(10))
    with pytest.raises(VocabularyError):
        output_distribution([12], Tensor(np.zeros((1, 6))), p)


def test_decoder_dropout_only_in_training():
    rng = np.random.default_rng(11)
    p = random_params(rng)
    h = Tensor(rng.normal(size=(2, 6)))
    a = output_distribution([1, 2], h, p, training=False).data
    b = output_distribution([1, 2], h, p, dropout_rate=0.5, training=True, rng=np.random.default_rng(0)).data
    c = output_distribution([1, 2], h, p, dropout_rate=0.0, training=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, c)
    assert not np.array_equal(a, b)


# --------------------------------------------------------------- decoding


def test_greedy_bounds_and_determinism():
    rng = np.random.default_rng(12)
    for att in (False, True):
        p = random_params(rng, attention=att, scale=1.0)
        V = Tensor(rng.normal(size=(3, 5)))
        assert len(greedy_decode(V, p, None, DecodeConfig(max_len=1))) <= 1
        a = greedy_decode(V, p, None, DecodeConfig(max_len=15))
        assert a == greedy_decode(V, p, None, DecodeConfig(max_len=15))
        assert len(a) <= 15 and START not in a and END not in a


def test_decode_config_guards():
    with pytest.raises(ConfigError):
        DecodeConfig(max_len=0)
    with pytest.raises(ConfigError):
        DecodeConfig(mode="sample", temperature=0.0)
    with pytest.raises(ConfigError):
        DecodeConfig(mode="beam")


def test_decode_stops_at_end_token():
    rng = np.random.default_rng(13)
    p = random_params(rng)
    p.P_o.data[:] = 0.0
    p.P_o.data[END] = 50.0
    p.word_embed.data[:] = 3.0  # tanh(...) > 0 so END dominates
    p.P_h.data[:] = 0.0
    assert greedy_decode(Tensor(rng.normal(size=(2, 5))), p, None, DecodeConfig()) == []


def test_low_temperature_sampling_matches_greedy():
    rng = np.random.default_rng(14)
    p = random_params(rng, scale=1.5)
    V = Tensor(rng.normal(size=(3, 5)))
    greedy = greedy_decode(V, p, None, DecodeConfig(max_len=10))
    cold = sample_decode(V, p, None, DecodeConfig(max_len=10, mode="sample", temperature=1e-4), np.random.default_rng(0))
    assert cold == greedy


def test_sampling_is_seeded():
    rng = np.random.default_rng(15)
    p = random_params(rng, scale=1.0)
    V = Tensor(rng.normal(size=(3, 5)))
    cfg = DecodeConfig(max_len=10, mode="sample", temperature=1.5)
    a = sample_decode(V, p, None, cfg, np.random.default_rng(7))
    assert a == sample_decode(V, p, None, cfg, np.random.default_rng(7))
    with pytest.raises(ConfigError):
        decode_batch(V, *one_graph(3), p, None, cfg)


def test_sampling_frequency_matches_distribution():
    """One sampling step over 10^4 graphs whose next-token law is {END: 0.7, 3: 0.3}."""
    Vw, D, H = 4, 1, 2
    zeros = lambda *s: T(np.zeros(s))  # noqa: E731
    E_W = np.zeros((Vw, D))
    E_W[START] = np.arctanh(0.5)
    P_o = np.array([[-400.0], [-400.0], [2 * np.log(0.7)], [2 * np.log(0.3)]])
    p = DecoderParams(T(E_W), zeros(4 * H, D), zeros(4 * H, H), zeros(4 * H),
                      MLP(zeros(H, D), zeros(H), zeros(H, H), zeros(H)), MLP(zeros(H, D), zeros(H), zeros(H, H), zeros(H)),
                      T(P_o), zeros(D, H))
    n = 10_000
    out = decode_batch(Tensor(np.zeros((n, D))), np.arange(n), n, p, None,
                       DecodeConfig(max_len=1, mode="sample"), np.random.default_rng(0))
    freq_end = np.mean([len(s) == 0 for s in out])
    assert abs(freq_end - 0.7) < 0.02
    assert all(s in ([], [3]) for s in out)


@pytest.mark.parametrize("attention", [False, True])
def test_decoded_tokens_invariant_to_node_order(attention):
    rng = np.random.default_rng(16)
    p = random_params(rng, attention=attention, scale=1.0)
    V = rng.normal(size=(4, 5))
    a = greedy_decode(Tensor(V), p, None, DecodeConfig(max_len=12))
    b = greedy_decode(Tensor(V[[3, 1, 0, 2]]), p, None, DecodeConfig(max_len=12))
    assert a == b


def test_attention_weights_normalized_at_every_step():
    rng = np.random.default_rng(17)
    p = random_params(rng, attention=True, scale=1.0)
    segments = np.array([0, 0, 0, 1, 1])
    run = DecoderRun(Tensor(rng.normal(size=(5, 5))), segments, 2, p, None, training=False)
    y = np.array([START, START])
    for _ in range(6):
        y = np.argmax(run.step(y).data, axis=-1)
    assert len(run.alphas) == 6
    for alpha in run.alphas:
        np.testing.assert_allclose(alpha.sum(1), 1.0, atol=1e-9)


def test_batched_decoding_matches_one_by_one():
    config = ModelConfig.for_variant("enc_att", 10, 15, embed_dim=6, hidden_dim=8, attn_dim=4)
    model = init_model(config, seed=3)
    for t in model.parameters().values():
        t.data[...] = np.random.default_rng(1).normal(scale=0.8, size=t.shape)
    labels = LabelSpace([f"o{i}" for i in range(7)], ["p0", "p1", "p2"])
    graphs = [
        reify(SceneGraph([ObjectNode(0, "o1"), ObjectNode(1, "o2")], [RelationEdge(0, 1, "p0")])),
        reify(SceneGraph([ObjectNode(0, "o3"), ObjectNode(1, "o4"), ObjectNode(2, "o6")], [RelationEdge(2, 1, "p2")])),
        reify(SceneGraph([ObjectNode(0, "o0"), ObjectNode(1, "o5")], [])),
    ]
    cfg = DecodeConfig(max_len=8)
    together = model.generate(graphs, labels, cfg)
    apart = [model.generate([g], labels, cfg)[0] for g in graphs]
    assert together == apart
