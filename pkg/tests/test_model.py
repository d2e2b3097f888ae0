import math

import numpy as np
import pytest

from headprune import numerics as nx
from headprune.cost_model import ArchSpec, allatt_params
from headprune.errors import DimensionError
from headprune.gating import GateSet, gate_scale
from headprune.model import AllAttentionLM, LayerParams, MemoryState, ModelConfig, head_attention, layer_forward
from headprune.numerics import Tensor


def tiny(**kw):
    base = dict(d=8, n_heads=2, n_persist=3, n_layers=2, seg_len=4, vocab_size=7, dropout_attn=0.0,
                dropout_hidden=0.0, init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


def randomise(model, rng, scale=0.5):
    """Non-trivial values for the zero/one-initialised biases and norms."""
    for k, t in model.named_parameters().items():
        if "bias" in k or "gain" in k:
            t.data = (t.data + scale * rng.standard_normal(t.shape)).astype(t.dtype)


# -- brute-force oracle --------------------------------------------------------------


def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [g[i] * (v[i] - mu) / math.sqrt(var + eps) + b[i] for i in range(len(v))]


def _vecmat(v, m):
    return [sum(v[i] * m[i][j] for i in range(len(v))) for j in range(len(m[0]))]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _encoding(dist, d):
    half = d // 2
    inv = [1.0 / 10000 ** (2 * i / d) for i in range(half)]
    return [math.sin(dist * w) for w in inv] + [math.cos(dist * w) for w in inv]


def brute_layer(x, mem, lp: LayerParams):
    """Scalar-loop reference for one layer: pre-norm, relative scores, persistent slots."""
    P = {k: t.data.tolist() for k, t in lp.named().items()}
    h, n_persist, d_h = lp.p_k.shape
    T, S, d = len(x), len(mem), len(x[0])
    ctx = [_ln(r, P["kv_norm_gain"], P["kv_norm_bias"]) for r in mem + x]
    out = []
    for t in range(T):
        hq = _ln(x[t], P["q_norm_gain"], P["q_norm_bias"])
        q_all = _vecmat(hq, P["w_q"])
        concat = []
        for i in range(h):
            cols = slice(i * d_h, (i + 1) * d_h)
            q = q_all[cols]
            u, vb = P["bias_u"][i], P["bias_v"][i]
            scores, values = [], []
            for j in range(S + t + 1):
                k = _vecmat(ctx[j], P["w_k"])[cols]
                r = _vecmat(_encoding(S + t - j, d), P["w_r"])[cols]
                s = _dot([a + b for a, b in zip(q, u)], k) + _dot([a + b for a, b in zip(q, vb)], r)
                scores.append(s / math.sqrt(d_h))
                values.append(_vecmat(ctx[j], P["w_v"])[cols])
            for n in range(n_persist):
                scores.append(_dot(q, P["p_k"][i][n]) / math.sqrt(d_h))
                values.append(P["p_v"][i][n])
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            concat += [sum(w[j] * values[j][c] for j in range(len(w))) / z for c in range(d_h)]
        proj = _vecmat(concat, P["w_o"])
        out.append([x[t][c] + proj[c] for c in range(d)])
    return out


def test_layer_matches_scalar_oracle_single_head():
    rng = np.random.default_rng(0)
    m = AllAttentionLM(tiny(d=2, n_heads=1, n_persist=1, n_layers=1, seg_len=2, mem_len=1), seed=1)
    randomise(m, rng)
    x = rng.standard_normal((2, 2))
    mem = rng.standard_normal((1, 2))
    got = layer_forward(Tensor(x[None]), mem[None], m.layers[0], valid=1).data[0]
    ref = brute_layer(x.tolist(), mem.tolist(), m.layers[0])
    assert np.allclose(got, ref, rtol=0, atol=1e-12)


def test_layer_matches_scalar_oracle_multi_head():
    rng = np.random.default_rng(1)
    m = AllAttentionLM(tiny(d=8, n_heads=2, n_persist=3, n_layers=1, seg_len=3, mem_len=2), seed=2)
    randomise(m, rng)
    x = rng.standard_normal((3, 8))
    mem = rng.standard_normal((2, 8))
    got = layer_forward(Tensor(x[None]), mem[None], m.layers[0], valid=2).data[0]
    assert np.allclose(got, brute_layer(x.tolist(), mem.tolist(), m.layers[0]), rtol=0, atol=1e-12)


def test_head_attention_is_slice_of_all_heads():
    rng = np.random.default_rng(2)
    m = AllAttentionLM(tiny(), seed=0)
    randomise(m, rng)
    x = rng.standard_normal((4, 8))
    mem = rng.standard_normal((4, 8))
    lp = m.layers[0]
    heads = [head_attention(Tensor(x), mem, lp, i).data for i in range(2)]
    # re-project single heads through their W_O rows and compare to the layer
    d_h = 4
    proj = sum(heads[i] @ lp.w_o.data[i * d_h : (i + 1) * d_h] for i in range(2))
    layer = layer_forward(Tensor(x[None]), mem[None], lp).data[0]
    assert np.allclose(x + proj, layer, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        head_attention(Tensor(x), mem, lp, 2)


# -- masking and memory -----------------------------------------------------------


def test_causal_future_tokens_do_not_leak():
    m = AllAttentionLM(tiny(seg_len=6), seed=3)
    toks = np.array([1, 2, 3, 4, 5, 6])
    base, _ = m(toks)
    for t in range(6):
        alt = toks.copy()
        alt[t] = 0
        out, _ = m(alt)
        assert np.array_equal(out.data[:t], base.data[:t])
        assert not np.allclose(out.data[t], base.data[t])


def test_memory_reproduces_one_long_segment():
    """Two cached segments give the same logits as one segment of double length."""
    rng = np.random.default_rng(4)
    m = AllAttentionLM(tiny(seg_len=4, mem_len=4), seed=5)
    randomise(m, rng)
    toks = rng.integers(0, 7, (2, 8))
    a, mem = m(toks[:, :4])
    b, _ = m(toks[:, 4:], mem)
    whole, _ = m(toks)
    assert np.allclose(np.concatenate([a.data, b.data], axis=1), whole.data, rtol=0, atol=1e-12)


def test_unfilled_memory_rows_are_ignored():
    rng = np.random.default_rng(5)
    m = AllAttentionLM(tiny(), seed=0)
    toks = rng.integers(0, 7, (3, 4))
    clean, _ = m(toks)
    junk = MemoryState([rng.standard_normal((3, 4, 8)) * 50 for _ in range(2)], valid=0)
    dirty, mem = m(toks, junk)
    assert np.array_equal(clean.data, dirty.data)
    assert mem.valid == 4


def test_memory_is_detached_layer_inputs():
    m = AllAttentionLM(tiny(), seed=0)
    _, mem = m(np.array([[1, 2, 3, 4]]))
    emb = m.embed.data[[1, 2, 3, 4]]
    assert np.array_equal(mem.hiddens[0][0], emb)
    assert isinstance(mem.hiddens[1], np.ndarray)


def test_memory_valid_count_saturates():
    m = AllAttentionLM(tiny(seg_len=4, mem_len=6), seed=0)
    mem = None
    valids = []
    for _ in range(3):
        _, mem = m(np.zeros((1, 4), dtype=int), mem)
        valids.append(mem.valid)
    assert valids == [4, 6, 6]


# -- residual / gate identities ---------------------------------------------------


def test_zero_output_projection_is_identity():
    rng = np.random.default_rng(6)
    m = AllAttentionLM(tiny(), seed=0)
    lp = m.layers[0]
    lp.w_o.data[:] = 0.0
    x = rng.standard_normal((2, 4, 8))
    out = layer_forward(Tensor(x), np.zeros((2, 4, 8)), lp, valid=0)
    assert np.array_equal(out.data, x)


def test_layer_with_no_heads_is_identity():
    m = AllAttentionLM(tiny(heads_per_layer=[0, 2]), seed=0)
    x = np.random.default_rng(0).standard_normal((1, 4, 8))
    assert np.array_equal(layer_forward(Tensor(x), np.zeros((1, 4, 8)), m.layers[0]).data, x)


def test_all_open_gates_are_bit_identical_to_ungated():
    rng = np.random.default_rng(7)
    m = AllAttentionLM(tiny(n_heads=4), seed=1)
    randomise(m, rng)
    toks = rng.integers(0, 7, (2, 4))
    ones = [Tensor(np.ones(4)) for _ in range(2)]
    a, _ = m(toks)
    b, _ = m(toks, gate_values=ones)
    assert np.array_equal(a.data, b.data)


def test_gate_scale_clip_rule():
    H = 8
    assert float(gate_scale(Tensor(np.zeros(H))).data) == H
    assert float(gate_scale(Tensor(np.full(H, 0.05))).data) == H
    for k in range(1, H + 1):
        g = np.zeros(H)
        g[:k] = 1.0
        assert float(gate_scale(Tensor(g)).data) == H / k
    assert float(gate_scale(Tensor(np.zeros(H)), enabled=False).data) == 1.0


def test_k_open_gates_scale_surviving_heads():
    rng = np.random.default_rng(8)
    H = 4
    m = AllAttentionLM(tiny(n_heads=H, n_layers=1), seed=2)
    randomise(m, rng)
    lp = m.layers[0]
    x = rng.standard_normal((1, 4, 8))
    mem = np.zeros((1, 4, 8))
    g = np.array([1.0, 0.0, 1.0, 0.0])
    gated = layer_forward(Tensor(x), mem, lp, gate=Tensor(g), valid=0).data
    d_h = 2
    heads = [head_attention(Tensor(x), mem, lp, i, valid=0).data for i in range(H)]
    manual = x + (H / 2) * sum(heads[i] @ lp.w_o.data[i * d_h : (i + 1) * d_h] for i in (0, 2))
    assert np.allclose(gated, manual, rtol=0, atol=1e-12)
    unscaled = layer_forward(Tensor(x), mem, lp, gate=Tensor(g), output_scaling=False, valid=0).data
    assert np.allclose(unscaled - x, (gated - x) / 2, rtol=0, atol=1e-12)


def test_all_closed_gates_leave_only_residual():
    m = AllAttentionLM(tiny(), seed=0)
    x = np.random.default_rng(9).standard_normal((1, 4, 8))
    out = layer_forward(Tensor(x), np.zeros((1, 4, 8)), m.layers[0], gate=Tensor(np.zeros(2)), valid=0)
    assert np.array_equal(out.data, x)


# -- parameters and initialisation ---------------------------------------------------


@pytest.mark.parametrize("hpl", [None, [2, 1, 0], [0, 0, 0], [1, 2, 2]])
def test_param_count_matches_cost_model(hpl):
    cfg = ModelConfig(d=8, n_heads=2, n_persist=5, n_layers=3, seg_len=4, vocab_size=11, heads_per_layer=hpl)
    m = AllAttentionLM(cfg)
    spec = ArchSpec("allatt", d=8, n_heads=2, n_layers=3, seg_len=4, mem_len=4, n_persist=5)
    assert m.count_params("non_embedding") == allatt_params(spec, heads_per_layer=hpl, include_aux=True)
    assert m.count_params("heads") == allatt_params(spec, heads_per_layer=hpl)
    assert m.count_params("all") == m.count_params("non_embedding") + 2 * 11 * 8


def test_initial_loss_is_near_uniform():
    V = 28
    cfg = ModelConfig(d=16, n_heads=4, n_persist=8, n_layers=2, seg_len=8, vocab_size=V)
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        m = AllAttentionLM(cfg, seed=seed)
        toks = rng.integers(0, V, (4, 9))
        logits, _ = m(toks[:, :8])
        loss = nx.cross_entropy(logits, toks[:, 1:]).item()
        assert abs(loss - math.log(V)) <= 0.05 * math.log(V)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=2, heads_per_layer=[9, 1])
    cfg = ModelConfig(mem_len=None, seg_len=12, heads_per_layer=[3, 8])
    assert cfg.mem_len == 12
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_out_of_vocab_token_raises():
    m = AllAttentionLM(tiny(), seed=0)
    with pytest.raises(IndexError):
        m(np.array([0, 7]))


def test_forward_accepts_single_sequence():
    m = AllAttentionLM(tiny(), seed=0)
    one, _ = m(np.array([1, 2, 3]))
    batch, _ = m(np.array([[1, 2, 3]]))
    assert one.shape == (3, 7)
    assert np.array_equal(one.data, batch.data[0])


def test_float32_model_stays_float32():
    m = AllAttentionLM(tiny(), seed=0, dtype=np.float32)
    logits, mem = m(np.array([[1, 2, 3, 4]]))
    assert logits.dtype == np.float32 and mem.hiddens[0].dtype == np.float32


# -- gradients ------------------------------------------------------------------------


def test_layer_gradients():
    rng = np.random.default_rng(10)
    m = AllAttentionLM(tiny(n_layers=1), seed=3)
    randomise(m, rng)
    lp = m.layers[0]
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    mem = rng.standard_normal((2, 3, 8))
    g = Tensor(np.array([0.7, 0.4]), requires_grad=True)
    w = rng.standard_normal((2, 4, 8))
    params = [x, g, *lp.named().values()]
    err = nx.grad_check(lambda: (layer_forward(x, mem, lp, gate=g, valid=2) * w).sum(), params)
    assert err < 1e-4


def test_full_two_layer_model_gradients():
    rng = np.random.default_rng(11)
    m = AllAttentionLM(tiny(), seed=4)
    randomise(m, rng)
    toks = rng.integers(0, 7, (2, 5))
    _, mem = m(rng.integers(0, 7, (2, 4)))
    gates = GateSet(2, 2, init=0.5)
    gate_rng_seed = 99

    def loss():
        logits, _ = m(toks[:, :4], mem, gates=gates, rng=np.random.default_rng(gate_rng_seed))
        return nx.cross_entropy(logits, toks[:, 1:])

    err = nx.grad_check(loss, m.parameters() + gates.pi, samples_per_param=8)
    assert err < 1e-4
