"""Forward engine: activations, experts, gating, layers, and two-stage traces."""

import math

import numpy as np
import pytest

from moe_lens import ModelConfig
from moe_lens.moe_core import (Expert, GateParams, activation_fn, expert_forward,
                               flatten_corpus, gate_forward, gate_from_logits,
                               model_forward, moe_layer_forward, read_corpus,
                               recombined_output, rmsnorm, trace_all_experts)
from moe_lens.moe_core import LayerWeights
from moe_lens.synth import SynthSpec, synth_scratch


# --- independent oracles -----------------------------------------------------

def silu_ref(x):
    return x / (1.0 + math.exp(-x))


def gelu_ref(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def expert_ref(w_up, w_act, w_down, x, act):
    """Triple-loop expert evaluation, no matrix ops."""
    d_mid, d_hid = len(w_up), len(w_up[0])
    inter = []
    for i in range(d_mid):
        up = sum(w_up[i][j] * x[j] for j in range(d_hid))
        pre = sum(w_act[i][j] * x[j] for j in range(d_hid))
        inter.append((up, act(pre)))
    out = []
    for j in range(d_hid):
        out.append(sum(w_down[j][i] * inter[i][0] * inter[i][1] for i in range(d_mid)))
    return out, [g for _, g in inter]


def softmax_ref(values):
    exps = [math.exp(v) for v in values]
    s = sum(exps)
    return [e / s for e in exps]


# --- activations -------------------------------------------------------------

def test_silu_zero_and_one():
    assert activation_fn("silu", 0.0) == 0.0
    assert abs(activation_fn("silu", 1.0) - 0.7310585786300049) < 1e-12


def test_gelu_matches_erf_form():
    for x in (-2.0, -0.5, 0.0, 0.3, 1.0, 4.0):
        assert abs(activation_fn("gelu", x) - gelu_ref(x)) < 1e-12
    assert activation_fn("gelu", 0.0) == 0.0


def test_activation_vectorized_matches_scalar():
    xs = np.linspace(-4, 4, 17)
    got = activation_fn("silu", xs)
    want = [silu_ref(float(x)) for x in xs]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_unknown_activation_rejected():
    with pytest.raises(ValueError, match="unknown activation"):
        activation_fn("relu", 1.0)


# --- expert forward ----------------------------------------------------------

def test_expert_scalar_oracle():
    # 1-d everything: output = w_down * (w_up * x) * silu(w_act * x)
    e = Expert(w_up=np.array([[2.0]]), w_act=np.array([[1.0]]), w_down=np.array([[3.0]]))
    y, inter = expert_forward(e, np.array([1.0]), "silu")
    assert abs(inter[0] - 0.7310585786300049) < 1e-9
    assert abs(y[0] - 3.0 * 2.0 * 0.7310585786300049) < 1e-9


def test_expert_zero_input_gives_zero_output():
    rng = np.random.default_rng(5)
    e = Expert(w_up=rng.normal(size=(6, 4)), w_act=rng.normal(size=(6, 4)),
               w_down=rng.normal(size=(4, 6)))
    for act in ("silu", "gelu"):
        y, inter = expert_forward(e, np.zeros(4), act)
        assert np.all(y == 0.0)
        assert np.all(inter == 0.0)


def test_expert_matches_loop_oracle():
    rng = np.random.default_rng(11)
    w_up = rng.normal(size=(6, 4))
    w_act = rng.normal(size=(6, 4))
    w_down = rng.normal(size=(4, 6))
    x = rng.normal(size=4)
    for act_name, act in (("silu", silu_ref), ("gelu", gelu_ref)):
        y, inter = expert_forward(Expert(w_up, w_act, w_down), x, act_name)
        want_y, want_inter = expert_ref(w_up.tolist(), w_act.tolist(),
                                        w_down.tolist(), x.tolist(), act)
        np.testing.assert_allclose(y, want_y, atol=1e-6)
        np.testing.assert_allclose(inter, want_inter, atol=1e-6)


def test_expert_dimension_mismatch():
    e = Expert(w_up=np.ones((3, 2)), w_act=np.ones((3, 2)), w_down=np.ones((2, 3)))
    with pytest.raises(ValueError):
        expert_forward(e, np.ones(5), "silu")


# --- gating ------------------------------------------------------------------

def test_gate_topk_then_softmax_frozen_example():
    scores, selected = gate_from_logits(np.array([1.0, 2.0, 3.0]), 2,
                                        "topk_then_softmax")
    ref = softmax_ref([2.0, 3.0])
    assert selected == [2, 1]
    assert abs(scores[0]) == 0.0
    assert abs(scores[1] - ref[0]) < 1e-9   # 0.268941
    assert abs(scores[2] - ref[1]) < 1e-9   # 0.731059
    assert abs(scores.sum() - 1.0) < 1e-6


def test_gate_softmax_then_topk_frozen_example():
    scores, selected = gate_from_logits(np.array([1.0, 2.0, 3.0]), 2,
                                        "softmax_then_topk")
    ref = softmax_ref([1.0, 2.0, 3.0])
    assert selected == [2, 1]
    assert scores[0] == 0.0
    assert abs(scores[1] - ref[1]) < 1e-9   # 0.244728
    assert abs(scores[2] - ref[2]) < 1e-9   # 0.665241
    # No renormalization: the kept probabilities sum below one.
    assert scores.sum() < 1.0


def test_gate_orders_select_same_experts_when_tie_free(rng):
    for _ in range(300):
        logits = rng.normal(size=8)
        for k in (1, 3, 8):
            _, sel_a = gate_from_logits(logits, k, "topk_then_softmax")
            _, sel_b = gate_from_logits(logits, k, "softmax_then_topk")
            assert sel_a == sel_b


def test_gate_tie_goes_to_lower_index():
    scores, selected = gate_from_logits(np.array([1.0, 1.0, 0.0]), 1,
                                        "topk_then_softmax")
    assert selected == [0]
    assert scores[0] == 1.0


def test_gate_k_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        gate_from_logits(np.array([1.0, 2.0]), 3, "topk_then_softmax")


def test_gate_forward_uses_projection():
    gate = GateParams(w_g=np.eye(3))
    scores, selected = gate_forward(gate, np.array([1.0, 2.0, 3.0]), 2,
                                    "topk_then_softmax")
    assert selected == [2, 1]
    assert abs(scores[2] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-9


# --- layer forward -----------------------------------------------------------

def layer_from(config, rng, n_experts, shared=0):
    mk = lambda: Expert(w_up=rng.normal(size=(config.d_mid, config.d_hid)),
                        w_act=rng.normal(size=(config.d_mid, config.d_hid)),
                        w_down=rng.normal(size=(config.d_hid, config.d_mid)))
    gate = None if n_experts == 1 else GateParams(
        w_g=rng.normal(size=(n_experts, config.d_hid)))
    return LayerWeights(experts=[mk() for _ in range(n_experts)], gate=gate,
                        shared=[mk() for _ in range(shared)])


def test_layer_zero_weights_is_identity(small_config):
    zeros = lambda shape: np.zeros(shape)
    e = Expert(w_up=zeros((12, 8)), w_act=zeros((12, 8)), w_down=zeros((8, 12)))
    weights = LayerWeights(experts=[e, e], gate=GateParams(w_g=np.zeros((2, 8))),
                           shared=[])
    cfg = ModelConfig(num_layers=1, experts_per_layer=[2], num_shared=[0], top_k=1,
                      d_hid=8, d_mid=12, vocab=17)
    x = np.arange(8, dtype=float)
    z, _ = moe_layer_forward(weights, x, cfg)
    np.testing.assert_array_equal(z, x)


def test_layer_matches_compositional_oracle():
    cfg = ModelConfig(num_layers=1, experts_per_layer=[2], num_shared=[0], top_k=1,
                      d_hid=2, d_mid=2, vocab=3)
    rng = np.random.default_rng(42)
    weights = layer_from(cfg, rng, n_experts=2)
    x = rng.normal(size=2)
    z, trace = moe_layer_forward(weights, x, cfg)

    h = x / np.sqrt(np.mean(x * x) + 1e-6)
    scores, selected = gate_forward(weights.gate, h, 1, cfg.gating_order)
    picked = selected[0]
    y, _ = expert_forward(weights.experts[picked], h, cfg.activation)
    np.testing.assert_allclose(z, x + scores[picked] * y, atol=1e-6)
    assert trace.selected == selected


def test_dense_layer_equals_one_expert_with_unit_score():
    cfg = ModelConfig(num_layers=1, experts_per_layer=[1], num_shared=[0], top_k=1,
                      d_hid=4, d_mid=6, vocab=3)
    rng = np.random.default_rng(9)
    weights = layer_from(cfg, rng, n_experts=1)
    x = rng.normal(size=4)
    z, trace = moe_layer_forward(weights, x, cfg)
    h = rmsnorm(x)
    y, _ = expert_forward(weights.experts[0], h, "silu")
    np.testing.assert_allclose(z, x + 1.0 * y, atol=1e-12)
    assert trace.selected == [0]
    assert trace.gate_scores.tolist() == [1.0]


def test_shared_experts_bypass_gate():
    cfg = ModelConfig(num_layers=1, experts_per_layer=[2], num_shared=[2], top_k=1,
                      d_hid=4, d_mid=5, vocab=3)
    rng = np.random.default_rng(10)
    weights = layer_from(cfg, rng, n_experts=2, shared=2)
    x = rng.normal(size=4)
    z, _ = moe_layer_forward(weights, x, cfg)
    h = rmsnorm(x)
    scores, selected = gate_forward(weights.gate, h, 1, cfg.gating_order)
    want = x + scores[selected[0]] * expert_forward(weights.experts[selected[0]], h)[0]
    for s in weights.shared:
        want = want + expert_forward(s, h)[0]
    np.testing.assert_allclose(z, want, atol=1e-9)


def test_prenorm_off_feeds_raw_input():
    cfg = ModelConfig(num_layers=1, experts_per_layer=[1], num_shared=[0], top_k=1,
                      d_hid=4, d_mid=5, vocab=3, use_prenorm=False)
    rng = np.random.default_rng(2)
    weights = layer_from(cfg, rng, n_experts=1)
    x = rng.normal(size=4)
    z, _ = moe_layer_forward(weights, x, cfg)
    np.testing.assert_allclose(z, x + expert_forward(weights.experts[0], x)[0],
                               atol=1e-12)


# --- model forward and tracing -------------------------------------------------

def test_model_forward_zero_layers_keeps_embedding():
    cfg = ModelConfig(num_layers=0, experts_per_layer=[], num_shared=[], top_k=1,
                      d_hid=4, d_mid=5, vocab=3)
    ck = synth_scratch(SynthSpec(config=cfg, mode="scratch", seed=0))
    outs = model_forward(ck, [1])
    assert outs == [[]]


def test_model_forward_composes_layers(small_checkpoint):
    from moe_lens.moe_core import load_layer_weights
    ck = small_checkpoint
    zs = model_forward(ck, [3])[0]
    x = np.asarray(ck.get_tensor("embed.weight")[3], dtype=np.float64)
    z = x
    for i in range(ck.config.num_layers):
        z, _ = moe_layer_forward(load_layer_weights(ck, i), z, ck.config)
    np.testing.assert_array_equal(zs[-1], z)


def test_model_forward_token_out_of_range(small_checkpoint):
    with pytest.raises(ValueError, match="token id out of range"):
        model_forward(small_checkpoint, [17])


def test_trace_shapes_and_native_routing(small_checkpoint):
    ck = small_checkpoint
    tokens = [0, 5, 9]
    traces = trace_all_experts(ck, tokens)
    assert len(traces) == 3
    for trace, token in zip(traces, tokens):
        assert trace.token_id == token
        assert len(trace.per_layer) == 2
        for lt in trace.per_layer:
            assert lt.expert_outputs.shape == (4, 8)
            assert lt.intermediates.shape == (4, 12)
            assert len(lt.selected) == 2
            assert set(np.flatnonzero(lt.gate_scores)) == set(lt.selected)
            assert abs(lt.full_scores.sum() - 1.0) < 1e-9


def test_trace_recombination_reproduces_recorded_outputs(small_checkpoint):
    traces = trace_all_experts(small_checkpoint, list(range(10)))
    for trace in traces:
        for lt in trace.per_layer:
            scale = np.linalg.norm(lt.z_out)
            err = np.linalg.norm(recombined_output(lt) - lt.z_out)
            assert err <= 1e-5 * max(scale, 1e-12)


def test_trace_selected_matches_native_forward(small_checkpoint):
    ck = small_checkpoint
    traces = trace_all_experts(ck, [4])
    # An independent stage-one pass must agree with the trace's routing.
    from moe_lens.moe_core import load_layer_weights
    x = np.asarray(ck.get_tensor("embed.weight")[4], dtype=np.float64)
    z = x
    for i, lt in enumerate(traces[0].per_layer):
        _, fresh = moe_layer_forward(load_layer_weights(ck, i), z, ck.config)
        assert fresh.selected == lt.selected
        np.testing.assert_array_equal(lt.z_in, z)
        z = fresh.z_out
        np.testing.assert_array_equal(lt.z_out, z)


def test_trace_with_shared_and_dense_layers():
    cfg = ModelConfig(num_layers=3, experts_per_layer=[4, 1, 3], num_shared=[1, 0, 0],
                      top_k=2, d_hid=8, d_mid=10, vocab=13)
    ck = synth_scratch(SynthSpec(config=cfg, mode="scratch", seed=77))
    traces = trace_all_experts(ck, [1, 2])
    for trace in traces:
        dense = trace.per_layer[1]
        assert dense.expert_outputs.shape == (1, 8)
        assert dense.selected == [0]
        assert dense.gate_scores.tolist() == [1.0]
        assert trace.per_layer[0].shared_outputs.shape == (1, 8)
        assert trace.per_layer[2].shared_outputs.shape == (0, 8)
        for lt in trace.per_layer:
            err = np.linalg.norm(recombined_output(lt) - lt.z_out)
            assert err <= 1e-5 * max(np.linalg.norm(lt.z_out), 1e-12)


def test_trace_k_override_routes_everything(small_checkpoint):
    traces = trace_all_experts(small_checkpoint, [0], k_override_all=True)
    lt = traces[0].per_layer[0]
    assert sorted(lt.selected) == [0, 1, 2, 3]
    assert abs(lt.gate_scores.sum() - 1.0) < 1e-9


def test_trace_reference_outputs_present():
    from moe_lens.synth import synth_upcycled
    cfg = ModelConfig(num_layers=2, experts_per_layer=[3, 3], num_shared=[0, 0],
                      top_k=1, d_hid=6, d_mid=8, vocab=7)
    model, ref = synth_upcycled(SynthSpec(config=cfg, mode="upcycled", seed=5,
                                          upcycle_noise_std=0.5))
    traces = trace_all_experts(model, [0], reference=ref)
    lt = traces[0].per_layer[0]
    assert lt.reference_output is not None
    assert lt.reference_output.shape == (6,)


# --- corpus ------------------------------------------------------------------

def test_read_corpus_round_trip(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("1 2 3\n\n7 8\n", encoding="utf-8")
    seqs = read_corpus(path)
    assert seqs == [[1, 2, 3], [7, 8]]
    assert flatten_corpus(seqs) == [1, 2, 3, 7, 8]


def test_read_corpus_rejects_garbage(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("1 banana 3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 1"):
        read_corpus(path)


def test_read_corpus_rejects_negative(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("1 -2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="negative"):
        read_corpus(path)
