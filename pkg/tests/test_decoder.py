import math

import numpy as np
import pytest
import torch

from vsgae.data import Dataset, make_dataset
from vsgae.decoder import (
    TrainConfig,
    VsgaeModel,
    add_edges,
    add_node,
    decode,
    decode_batch,
    graph_prop,
    init_node,
    start_node,
    teacher_forced_loss,
    teacher_forced_loss_batch,
    train_vsgae,
    vsgae_loss,
)
from vsgae.encoder import EncoderConfig, aggregate, propagate_round
from vsgae.graphs import TYPE_TO_INDEX, CellGraph, NodeType, validate
from vsgae.primitives import DTYPE, gradcheck, softmax, tensor

from conftest import G2, G3_CHAIN, G3_SKIP, G5, make_models, nudge_params, zero_params

INPUT_IDX = TYPE_TO_INDEX[NodeType.INPUT]


@pytest.fixture
def tiny(tiny_cfg):
    store, enc, dec = make_models(tiny_cfg, seed=0)
    return tiny_cfg, store, enc, dec


@pytest.fixture
def tiny_zeroed(tiny_cfg):
    store, enc, dec = make_models(tiny_cfg, seed=0)
    zero_params(store)
    return tiny_cfg, store, enc, dec


# ---------------------------------------------------------------------------
# graph_prop


def test_graph_prop_single_node_zero_params(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    h = tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    summary, h_prop = graph_prop(h, [], dec.prop)
    assert torch.equal(summary, torch.zeros(3, dtype=DTYPE))
    # two propagation rounds, each halving under zero parameters
    assert torch.allclose(h_prop, 0.25 * h, atol=1e-15)


def test_graph_prop_single_round_halves(tiny_cfg):
    cfg = EncoderConfig(d_n=4, d_g=3, rounds=1)
    store, enc, dec = make_models(cfg, seed=0)
    zero_params(store)
    h = tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    summary, h_prop = graph_prop(h, [], dec.prop)
    assert torch.allclose(h_prop, 0.5 * h, atol=1e-15)


def test_graph_prop_equals_encoder_stack_with_decoder_weights(tiny):
    cfg, store, enc, dec = tiny
    h = tensor(np.random.default_rng(3).standard_normal((3, 4)))
    summary, h_prop = graph_prop(h, G3_SKIP, dec.prop)
    expected = h
    for rp in dec.prop.rounds:
        expected = propagate_round(expected, G3_SKIP, rp)
    emb = aggregate(expected, dec.prop.agg)
    assert torch.allclose(h_prop, expected, atol=1e-12)
    assert torch.allclose(summary, emb.mean, atol=1e-12)


def test_graph_prop_permutation_invariant_summary(tiny):
    cfg, store, enc, dec = tiny
    rng = np.random.default_rng(4)
    h = tensor(rng.standard_normal((3, 4)))
    edges = [(0, 1), (0, 2)]
    summary, _ = graph_prop(h, edges, dec.prop)
    # relabel nodes 1 and 2 (both reachable orderings stay upper-triangular)
    h_swapped = h[[0, 2, 1]]
    swapped_edges = [(0, 2), (0, 1)]
    summary2, _ = graph_prop(h_swapped, swapped_edges, dec.prop)
    assert torch.allclose(summary, summary2, atol=1e-12)


def test_graph_prop_rejects_mismatched_rows(tiny):
    cfg, store, enc, dec = tiny
    with pytest.raises(ValueError):
        graph_prop(tensor(np.zeros((2, 4))), G3_SKIP, dec.prop)


# ---------------------------------------------------------------------------
# add_node / init_node / start_node / add_edges


def test_add_node_zero_params_uniform(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    logits = add_node(torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), dec.add_node)
    assert torch.equal(logits, torch.zeros(5, dtype=DTYPE))
    probs = softmax(logits)
    assert torch.allclose(probs, torch.full((5,), 0.2, dtype=DTYPE), atol=1e-15)


def test_add_node_masking_renormalizes_over_four(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    logits = add_node(
        torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), dec.add_node
    ).detach()
    masked = logits.clone()
    masked[INPUT_IDX] = float("-inf")
    probs = softmax(masked)
    assert float(probs[INPUT_IDX]) == 0.0
    others = [i for i in range(5) if i != INPUT_IDX]
    assert torch.allclose(probs[others], torch.full((4,), 0.25, dtype=DTYPE), atol=1e-15)


def test_init_and_start_node_zero_params(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    z = tensor(np.ones(3))
    h_gt = tensor(np.ones(3))
    out = init_node(z, h_gt, NodeType.CONV3X3, dec.init_node, dec.lookup)
    assert torch.equal(out, torch.zeros(4, dtype=DTYPE))
    out = start_node(z, dec.start_node, dec.lookup)
    assert torch.equal(out, torch.zeros(4, dtype=DTYPE))


def test_start_node_ignores_partial_graph_summary(tiny):
    # the first embedding depends only on the latent point and the lookup
    cfg, store, enc, dec = tiny
    z = tensor(np.random.default_rng(5).standard_normal(3))
    out1 = start_node(z, dec.start_node, dec.lookup)
    assert out1.shape == (4,)
    # distinct parameter sets: same inputs through init_node differ
    h_gt = torch.zeros(3, dtype=DTYPE)
    out2 = init_node(z, h_gt, NodeType.INPUT, dec.init_node, dec.lookup)
    assert not torch.allclose(out1, out2)


def test_add_edges_zero_params_scores_zero(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    h_new = torch.zeros(4, dtype=DTYPE)
    h_prop = tensor(np.random.default_rng(6).standard_normal((3, 4)))
    scores = add_edges(h_new, h_prop, torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), dec.add_edges)
    assert scores.shape == (3,)
    assert torch.equal(scores, torch.zeros(3, dtype=DTYPE))
    assert torch.allclose(torch.sigmoid(scores), torch.full((3,), 0.5, dtype=DTYPE))


def test_add_edges_requires_previous_nodes(tiny):
    cfg, store, enc, dec = tiny
    with pytest.raises(ValueError):
        add_edges(
            torch.zeros(4, dtype=DTYPE),
            torch.zeros(0, 4, dtype=DTYPE),
            torch.zeros(3, dtype=DTYPE),
            torch.zeros(3, dtype=DTYPE),
            dec.add_edges,
        )


# ---------------------------------------------------------------------------
# decode


def test_decode_reproducible(tiny):
    cfg, store, enc, dec = tiny
    z = np.random.default_rng(7).standard_normal(3)
    g1, t1 = decode(z, dec, np.random.default_rng(99))
    g2, t2 = decode(z, dec, np.random.default_rng(99))
    assert g1 == g2
    assert len(t1) == len(t2) == g1.n - 1


def test_decode_zero_params_contract(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    rng = np.random.default_rng(11)
    for _ in range(20):
        g, trace = decode(np.zeros(3), dec, rng)
        assert 2 <= g.n <= 7
        assert len(trace) == g.n - 1
        # the forced start node is the only input node
        assert g.labels[0] is NodeType.INPUT
        assert NodeType.INPUT not in g.labels[1:]
        for step, n_prev in zip(trace.steps, range(1, g.n)):
            assert step.edge_scores.shape == (n_prev,)
            assert step.node_logits.shape == (5,)
        if g.n < 7:
            assert g.labels[-1] is NodeType.OUTPUT


def test_decode_cap_returns_partial_graph(tiny):
    cfg, store, enc, dec = tiny
    # force the output class to be unreachable: huge negative weight via bias
    with torch.no_grad():
        dec.add_node.layers[-1].bias[TYPE_TO_INDEX[NodeType.OUTPUT]] = -1e9
    rng = np.random.default_rng(13)
    g, trace = decode(np.zeros(3), dec, rng, max_gen_nodes=5)
    assert g.n == 5
    assert NodeType.OUTPUT not in g.labels
    assert not validate(g).valid  # capped graphs count as invalid


def test_decode_stops_right_after_output(tiny):
    cfg, store, enc, dec = tiny
    with torch.no_grad():
        dec.add_node.layers[-1].bias[TYPE_TO_INDEX[NodeType.OUTPUT]] = 1e9
    g, trace = decode(np.zeros(3), dec, np.random.default_rng(17))
    assert g.n == 2  # output sampled at the first iteration, edges still added
    assert g.labels == (NodeType.INPUT, NodeType.OUTPUT)
    assert len(trace) == 1


def test_decode_batch_matches_sequential_protocol(tiny):
    cfg, store, enc, dec = tiny
    rng = np.random.default_rng(23)
    zs = rng.standard_normal((8, 3))
    batch = decode_batch(zs, dec, np.random.default_rng(5), with_traces=True)
    assert len(batch) == 8
    for g, trace in batch:
        assert g.labels[0] is NodeType.INPUT
        assert len(trace) == g.n - 1


def test_decode_rejects_nonfinite(tiny):
    cfg, store, enc, dec = tiny
    with pytest.raises(ValueError):
        decode(np.array([np.nan, 0.0, 0.0]), dec, np.random.default_rng(0))


def test_decode_greedy_mode_is_deterministic(tiny):
    cfg, store, enc, dec = tiny
    zs = np.random.default_rng(41).standard_normal((5, 3))
    a = decode_batch(zs, dec, rng=None, greedy=True)
    b = decode_batch(zs, dec, rng=None, greedy=True)
    assert [g for g, _ in a] == [g for g, _ in b]
    with pytest.raises(ValueError):
        decode_batch(zs, dec, rng=None)  # sampling mode needs a generator


def test_decode_greedy_reconstructs_mean_latent_deterministically(tiny_cfg):
    from vsgae.data import make_dataset
    from vsgae.decoder import train_vsgae

    ds = make_dataset(mode="enumerate_upto_n", param=3)
    model, _ = train_vsgae(ds, TrainConfig(epochs=5, seed=0, batch_size=4), EncoderConfig(d_n=6, d_g=4))
    mu, _ = model.encode_graphs(ds.graphs())
    a = decode_batch(mu, model.decoder, rng=None, greedy=True)
    b = decode_batch(mu, model.decoder, rng=None, greedy=True)
    assert [g for g, _ in a] == [g for g, _ in b]


# ---------------------------------------------------------------------------
# teacher forcing


def test_teacher_forced_loss_zero_params_minimal_graph(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    lv, le = teacher_forced_loss(G2, torch.zeros(3, dtype=DTYPE), dec)
    assert lv.item() == pytest.approx(math.log(5), abs=1e-12)
    assert le.item() == pytest.approx(math.log(2), abs=1e-12)


def test_teacher_forced_loss_zero_params_any_latent(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    z = tensor(np.random.default_rng(29).standard_normal(3))
    lv, le = teacher_forced_loss(G2, z, dec)
    assert lv.item() == pytest.approx(math.log(5), abs=1e-12)
    assert le.item() == pytest.approx(math.log(2), abs=1e-12)


def test_teacher_forced_loss_zero_params_counts_iterations(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    # n-1 node events of ln 5; sum_{t=1}^{n-1} t candidate edges of ln 2
    for g in [G2, G3_SKIP, G5]:
        lv, le = teacher_forced_loss(g, torch.zeros(3, dtype=DTYPE), dec)
        n = g.n
        assert lv.item() == pytest.approx((n - 1) * math.log(5), abs=1e-10)
        assert le.item() == pytest.approx((n - 1) * n / 2 * math.log(2), abs=1e-10)


def test_teacher_forced_loss_confident_model_goes_to_zero(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    # drive the node head to certainty on OUTPUT and edges to certainty on
    # presence: for the 2-node graph both ground truths are exactly that
    with torch.no_grad():
        dec.add_node.layers[-1].bias[TYPE_TO_INDEX[NodeType.OUTPUT]] = 200.0
        dec.add_edges.layers[-1].bias.fill_(200.0)
    lv, le = teacher_forced_loss(G2, torch.zeros(3, dtype=DTYPE), dec)
    assert lv.item() == pytest.approx(0.0, abs=1e-12)
    assert le.item() == pytest.approx(0.0, abs=1e-12)


def test_teacher_forced_loss_deterministic(tiny):
    cfg, store, enc, dec = tiny
    z = tensor(np.random.default_rng(31).standard_normal(3))
    a = teacher_forced_loss(G5, z, dec)
    b = teacher_forced_loss(G5, z, dec)
    assert a[0].item() == b[0].item() and a[1].item() == b[1].item()


def test_teacher_forced_loss_rejects_invalid(tiny):
    cfg, store, enc, dec = tiny
    bad = CellGraph(3, [NodeType.INPUT, NodeType.CONV3X3, NodeType.OUTPUT], [(0, 2)])
    with pytest.raises(ValueError):
        teacher_forced_loss(bad, torch.zeros(3, dtype=DTYPE), dec)


def test_teacher_forced_batch_matches_single(tiny):
    cfg, store, enc, dec = tiny
    rng = np.random.default_rng(37)
    graphs = [g for g in [G3_CHAIN, G3_SKIP, G3_CHAIN]]
    zs = tensor(rng.standard_normal((3, 3)))
    lv_b, le_b = teacher_forced_loss_batch(graphs, zs, dec)
    for i, g in enumerate(graphs):
        lv, le = teacher_forced_loss(g, zs[i], dec)
        assert lv.item() == pytest.approx(lv_b[i].item(), abs=1e-12)
        assert le.item() == pytest.approx(le_b[i].item(), abs=1e-12)


def test_teacher_forced_batch_rejects_mixed_sizes(tiny):
    cfg, store, enc, dec = tiny
    with pytest.raises(ValueError):
        teacher_forced_loss_batch([G2, G3_SKIP], torch.zeros(2, 3, dtype=DTYPE), dec)


# ---------------------------------------------------------------------------
# full objective


def test_vsgae_loss_zero_params(tiny_zeroed):
    cfg, store, enc, dec = tiny_zeroed
    out = vsgae_loss(G2, enc, dec, cfg, rng=np.random.default_rng(0))
    assert out.kl.item() == pytest.approx(0.0, abs=1e-12)
    assert out.total.item() == pytest.approx(out.reconstruction.item(), abs=1e-12)
    assert out.reconstruction.item() == pytest.approx(math.log(5) + math.log(2), abs=1e-12)


def test_vsgae_loss_alpha_zero(tiny):
    cfg, store, enc, dec = tiny
    eps = torch.zeros(3, dtype=DTYPE)
    out = vsgae_loss(G3_SKIP, enc, dec, cfg, alpha=0.0, eps=eps)
    assert out.total.item() == pytest.approx(out.reconstruction.item(), abs=1e-12)
    out2 = vsgae_loss(G3_SKIP, enc, dec, cfg, alpha=0.5, eps=eps)
    assert out2.total.item() == pytest.approx(
        out2.reconstruction.item() + 0.5 * out2.kl.item(), abs=1e-12
    )


def test_vsgae_loss_end_to_end_gradcheck(tiny_cfg):
    store, enc, dec = make_models(tiny_cfg, seed=0)
    # evaluation point chosen so every live gradient clears the central
    # difference noise floor (tiny-gradient entries otherwise drown in
    # cancellation error at step 1e-5)
    nudge_params(store, scale=0.3, seed=123)
    eps = tensor(np.random.default_rng(43).standard_normal(3))

    def f():
        return vsgae_loss(G3_SKIP, enc, dec, tiny_cfg, eps=eps).total

    report = gradcheck(f, store.parameters())
    assert report.passed, report


# ---------------------------------------------------------------------------
# training


def small_dataset():
    return make_dataset(mode="enumerate_upto_n", param=3)  # 7 graphs


def test_train_vsgae_two_runs_identical():
    ds = small_dataset()
    cfg = TrainConfig(epochs=4, seed=5, batch_size=4)
    enc_cfg = EncoderConfig(d_n=6, d_g=4)
    _, log1 = train_vsgae(ds, cfg, enc_cfg)
    _, log2 = train_vsgae(ds, cfg, enc_cfg)
    assert log1 == log2


def test_train_vsgae_loss_decreases():
    ds = make_dataset(mode="enumerate_upto_n", param=4)
    cfg = TrainConfig(epochs=40, seed=1, batch_size=16)
    enc_cfg = EncoderConfig(d_n=12, d_g=6)
    model, log = train_vsgae(ds, cfg, enc_cfg)
    first = np.mean([s.total for s in log[:20]])
    last = np.mean([s.total for s in log[20:]])
    assert last < first + 1e-9
    assert all(math.isfinite(s.kl) for s in log)
    assert max(s.kl for s in log) < 1e4  # regularizer keeps the posterior bounded


def test_train_vsgae_checkpoint_roundtrip(tmp_path):
    ds = small_dataset()
    cfg = TrainConfig(epochs=2, seed=2, batch_size=4)
    enc_cfg = EncoderConfig(d_n=6, d_g=4)
    model, _ = train_vsgae(ds, cfg, enc_cfg)
    path = tmp_path / "model.bin"
    model.save(path, {"note": 1})
    loaded, extra = VsgaeModel.load(path)
    assert extra["note"] == 1
    assert extra["encoder_config"]["d_n"] == 6
    mu0, lv0 = model.encode_graphs([G2, G3_SKIP])
    mu1, lv1 = loaded.encode_graphs([G2, G3_SKIP])
    assert np.allclose(mu0, mu1, atol=1e-6)  # float32 checkpoint payload
    assert np.allclose(lv0, lv1, atol=1e-6)
    rng = np.random.default_rng(3)
    out0 = model.decode_latents(np.zeros((4, 4)), np.random.default_rng(7))
    out1 = loaded.decode_latents(np.zeros((4, 4)), np.random.default_rng(7))
    assert out0 == out1


def test_train_vsgae_empty_dataset():
    with pytest.raises(ValueError):
        train_vsgae(
            Dataset((), "synthetic", 0), TrainConfig(epochs=1), EncoderConfig(d_n=4, d_g=3)
        )
