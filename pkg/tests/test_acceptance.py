"""Acceptance criteria, one test per criterion.

Each test records a ``CRITERION n: PASS|FAIL ...`` line; the lines are also
printed in the pytest terminal summary. The desk-scale pruning runs (8, 9)
share one baseline and one cache of prune runs and take roughly 25 minutes
single-threaded.
"""

import dataclasses
import math
import statistics
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from headprune import numerics as nx
from headprune.config import RunConfig
from headprune.cost_model import ArchSpec, allatt_params, cost_report, heads_for_percent
from headprune.gating import DETERMINISTIC, GateSet, HardConcreteConfig, expected_l0, expected_open, gate_scale, sample_gates
from headprune.model import AllAttentionLM, ModelConfig, layer_forward
from headprune.numerics import Tensor
from headprune.runs import VARIANTS, load_splits, matched_vanilla, prune_baseline, train_baseline
from headprune.synthetic import synthetic_text8
from headprune.trainer import apply_structural_prune, extract_prune_mask, make_state, run_training, verify_prune_equivalence

REPORT: list[str] = []

# desk-scale recipe
BASELINE_STEPS = 2000
PRUNE_STEPS = 1000
SEEDS = (0, 1, 2)
SPEC_GRID = (0.01, 0.02, 0.04)
DESK_GRID = (0.1, 0.2, 0.4)  # the same grid scaled x10 so pruning actually happens
ABLATION_LAMBDA = 0.2


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    REPORT.append(line)
    print(line, flush=True)
    return ok


# -- 1-4: closed forms and gate statistics ---------------------------------------------


def test_criterion_1_parameter_accounting():
    big, small = allatt_params(ArchSpec()), allatt_params(ArchSpec(n_layers=12))
    ok = big == 54_525_952 and small == 40_894_464
    record(1, ok, f"L=16 -> {big:,}, L=12 -> {small:,}")
    assert ok


def test_criterion_2_sparsity_rows():
    rows = []
    ok = True
    for L, table in ((16, [(17.2, 22, 45.2), (32.8, 42, 36.7), (43.8, 56, 30.7)]),
                     (12, [(15.6, 15, 34.5), (27.1, 26, 29.8), (37.5, 36, 25.6)])):
        spec = ArchSpec(n_layers=L)
        for pct, heads, reported in table:
            k = heads_for_percent(pct, L, 8)
            count = allatt_params(spec, k / (L * 8))
            good = k == heads and abs(count / 1e6 - reported) < 0.1
            ok &= good
            rows.append(f"{pct}%->{k}h {count / 1e6:.2f}M~{reported}M")
    record(2, ok, "; ".join(rows))
    assert ok


def test_criterion_3_fifty_percent_ratios():
    a = cost_report(ArchSpec(), 0.5)
    t = cost_report(ArchSpec(arch="txl"), 0.5)
    ok = a.param_ratio == 0.5 and a.mac_ratio == 0.5 and 0.79 <= t.param_ratio <= 0.83 and 0.70 <= t.mac_ratio <= 0.76
    record(3, ok, f"allatt {a.param_ratio:.3f}/{a.mac_ratio:.3f}, txl params {t.param_ratio:.4f} MACs {t.mac_ratio:.4f}")
    assert ok


def test_criterion_4_gate_open_probability():
    cfg = HardConcreteConfig()
    g = sample_gates(np.full(100_000, 2.0), cfg, np.random.default_rng(0)).data
    p_pos, closed = (g > 0).mean(), float(expected_open(2.0, cfg).data)
    p_half = (g > 0.5).mean()
    ok = abs(p_pos - closed) <= 0.01 and abs(p_half - 0.88) <= 0.01
    record(4, ok, f"MC P(g>0)={p_pos:.4f} vs closed form {closed:.4f}; MC P(g>0.5)={p_half:.4f} vs 0.88")
    assert ok


# -- 5-7: properties ---------------------------------------------------------------------


def _p(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_criterion_5_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(0)
    hc = HardConcreteConfig()
    a, b, c = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 4, 5)
    w = rng.standard_normal((3, 4))
    ids = np.array([[0, 2, 1], [3, 0, 2]])
    table, v = _p(rng, 5, 4), _p(rng, 4)
    cases = {
        "add/sub/mul/div": (lambda: ((a + b) * (a - 0.5) / (b * b + 1.0)).sum(), [a, b]),
        "matmul": (lambda: ((a @ c) * rng_w(3, 5)).sum(), [a, c]),
        "exp/log": (lambda: nx.log(nx.exp(a) + 1.0).sum(), [a]),
        "sigmoid": (lambda: (nx.sigmoid(a) * w).sum(), [a]),
        "clip": (lambda: (nx.clip(a * 2.0, -1.0, 1.0) * w).sum(), [a]),
        "softmax": (lambda: (nx.softmax_lastdim(a) * w).sum(), [a]),
        "layernorm": (lambda: (nx.layernorm(a, v, v * 0.5) * w).sum(), [a, v]),
        "cross_entropy": (lambda: nx.cross_entropy(a, np.array([0, 3, 1])), [a]),
        "embedding": (lambda: (nx.embedding(table, ids) * rng_w(2, 3, 4)).sum(), [table]),
        "rel_shift": (lambda: (nx.rel_shift(a) * w).sum(), [a]),
        "concat/getitem": (lambda: (nx.concat([a, b], axis=1)[:, 2:7] * 1.5).sum(), [a, b]),
        "reshape/transpose/mean": (lambda: (a.reshape(4, 3).transpose() * b).mean(), [a, b]),
        "dropout": (lambda: (nx.dropout(a, 0.3, np.random.default_rng(1), True) * w).sum(), [a]),
        "hard_concrete": (lambda: (sample_gates(v, hc, np.random.default_rng(2)) * np.arange(4.0)).sum(), [v]),
        "expected_l0": (lambda: expected_l0(v, hc), [v]),
        "gate_scale": (lambda: gate_scale(nx.sigmoid(v)) * 1.0, [v]),
    }
    worst = {}
    for name, (f, params) in cases.items():
        worst[name] = nx.grad_check(f, params, samples_per_param=None)

    mcfg = ModelConfig(d=8, n_heads=2, n_persist=3, n_layers=2, seg_len=4, vocab_size=6, dropout_attn=0.0,
                       dropout_hidden=0.0, init_std=0.5)
    model = AllAttentionLM(mcfg, seed=0)
    for k, t in model.named_parameters().items():
        if "bias" in k or "gain" in k:
            t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    toks = rng.integers(0, 6, (2, 5))
    _, mem = model(rng.integers(0, 6, (2, 4)))
    gates = GateSet(2, 2, init=0.5)

    def full():
        logits, _ = model(toks[:, :4], mem, gates=gates, rng=np.random.default_rng(3))
        return nx.cross_entropy(logits, toks[:, 1:])

    worst["2-layer model"] = nx.grad_check(full, model.parameters() + gates.pi, samples_per_param=10)
    elapsed = time.time() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(5, ok, f"{len(worst)} checks, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert ok


def rng_w(*shape):
    return np.random.default_rng(sum(shape)).standard_normal(shape)


def test_criterion_6_structural_prune_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(0)
    cfg = ModelConfig(d=16, n_heads=4, n_persist=5, n_layers=3, seg_len=6, vocab_size=9, dropout_attn=0.0,
                      dropout_hidden=0.0, init_std=0.2)
    spec = ArchSpec("allatt", d=16, n_heads=4, n_layers=3, seg_len=6, mem_len=6, n_persist=5)
    worst, counts_ok = 0.0, True
    for trial in range(20):
        model = AllAttentionLM(cfg, seed=trial)
        gates = GateSet(3, 4, mode=DETERMINISTIC)
        for p in gates.pi:
            p.data = rng.normal(0.0, 2.0, 4)
        mask = extract_prune_mask(gates)
        pruned = apply_structural_prune(model, mask)
        batches = [rng.integers(0, 9, (2, 6)) for _ in range(3)]
        worst = max(worst, verify_prune_equivalence(model, gates, pruned, batches, rtol=1e-6))
        hpl = mask.heads_per_layer()
        counts_ok &= pruned.count_params("heads") == allatt_params(spec, heads_per_layer=hpl)
        counts_ok &= pruned.count_params("non_embedding") == allatt_params(spec, heads_per_layer=hpl, include_aux=True)
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and counts_ok and elapsed < 60
    record(6, ok, f"20 masks, max rel diff {worst:.2e}, counts match cost model: {counts_ok}, {elapsed:.1f}s")
    assert ok


def test_criterion_7_gate_reductions():
    rng = np.random.default_rng(0)
    H = 8
    cfg = ModelConfig(d=16, n_heads=H, n_persist=4, n_layers=1, seg_len=5, vocab_size=7, dropout_attn=0.0,
                      dropout_hidden=0.0)
    lp = AllAttentionLM(cfg, seed=1).layers[0]
    x, mem = Tensor(rng.standard_normal((2, 5, 16))), rng.standard_normal((2, 5, 16))
    plain = layer_forward(x, mem, lp).data
    all_open = layer_forward(x, mem, lp, gate=Tensor(np.ones(H))).data
    closed_scale = float(gate_scale(np.zeros(H)).data)
    scales = [float(gate_scale(np.r_[np.ones(k), np.zeros(H - k)]).data) for k in range(1, H + 1)]
    ok = (
        np.array_equal(plain, all_open)
        and closed_scale == H
        and scales == [H / k for k in range(1, H + 1)]
    )
    record(7, ok, f"all-open bit-identical: {np.array_equal(plain, all_open)}, all-closed s_g={closed_scale:g}, "
                  f"k-open s_g=H/k: {scales == [H / k for k in range(1, H + 1)]}")
    assert ok


# -- 8-10: desk-scale runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    corpus = tmp_path_factory.mktemp("desk") / "corpus.txt"
    corpus.write_text(synthetic_text8(1_000_000, seed=0))
    cfg = RunConfig(corpus=str(corpus), steps=BASELINE_STEPS)
    with threadpool_limits(1):
        t0 = time.time()
        splits = load_splits(cfg)
        base = train_baseline(cfg, splits)
        base_time = time.time() - t0
        yield {"cfg": cfg, "splits": splits, "base": base, "runs": {}, "t0": t0, "base_time": base_time}


def prune_run(desk, lam, seed, variant="full"):
    key = (lam, seed, variant)
    if key not in desk["runs"]:
        c = desk["cfg"].replace(steps=PRUNE_STEPS, lambda_=lam, seed=seed, **VARIANTS[variant])
        desk["runs"][key] = prune_baseline(c, desk["splits"], desk["base"].model).summary
    return desk["runs"][key]


def test_criterion_8_desk_pruning(desk):
    V = len(desk["splits"]["train"].vocab)
    bpc = desk["base"].summary["bpc"]
    a = bpc < 0.9 * math.log2(V)
    r0 = prune_run(desk, 0.0, 0)
    b = r0["pruned_heads"] <= 1
    grids = {}
    for grid in (SPEC_GRID, DESK_GRID):
        grids[grid] = [[prune_run(desk, lam, s)["pruned_heads"] for s in SEEDS] for lam in grid]
    medians = {g: [statistics.median(h) for h in heads] for g, heads in grids.items()}
    c_spec = all(x <= y for x, y in zip(medians[SPEC_GRID], medians[SPEC_GRID][1:]))
    c_desk = all(x <= y for x, y in zip(medians[DESK_GRID], medians[DESK_GRID][1:]))
    total = 3 * 8
    d = all(abs(r["hard_sparsity"] * total - round(r["hard_sparsity"] * total)) < 1e-12 and
            r["hard_sparsity"] * total == r["pruned_heads"] for r in desk["runs"].values())
    elapsed = time.time() - desk["t0"]
    ok = a and b and c_spec and c_desk and d
    record(
        8,
        ok,
        f"(a) baseline bpc {bpc:.3f} < {0.9 * math.log2(V):.3f}: {a}; (b) lambda=0 pruned {r0['pruned_heads']}: {b}; "
        f"(c) medians {dict(zip(SPEC_GRID, medians[SPEC_GRID]))} {dict(zip(DESK_GRID, medians[DESK_GRID]))} "
        f"non-decreasing: {c_spec and c_desk}; (d) multiples of 1/{total}: {d}; "
        f"baseline {desk['base_time']:.0f}s, elapsed {elapsed / 60:.1f} min",
    )
    assert ok


def test_criterion_9_technique_ablation(desk):
    rows, wins = [], 0
    for seed in SEEDS:
        full = prune_run(desk, ABLATION_LAMBDA, seed)
        res, attempts = matched_vanilla(desk["cfg"].replace(steps=PRUNE_STEPS, lambda_=ABLATION_LAMBDA, seed=seed),
                                        desk["splits"], desk["base"].model, full["pruned_heads"])
        van = res.summary
        matched = abs(van["pruned_heads"] - full["pruned_heads"]) <= 2
        win = matched and full["bpc"] <= van["bpc"]
        wins += win
        rows.append(f"seed {seed}: full {full['pruned_heads']}h {full['bpc']:.4f} vs vanilla {van['pruned_heads']}h "
                    f"{van['bpc']:.4f} (lambda {van['lambda']:.3g}, tries {len(attempts)})")
    deltas = []
    ref = prune_run(desk, ABLATION_LAMBDA, 0)
    for v in ("-lambda_warmup", "-gate_init", "-output_scaling"):
        r = prune_run(desk, ABLATION_LAMBDA, 0, v)
        deltas.append(f"{v} {r['bpc'] - ref['bpc']:+.4f} ({r['pruned_heads']}h)")
    ok = wins >= 2
    record(9, ok, f"full <= matched vanilla in {wins}/3 seeds; " + "; ".join(rows) +
           f"; reported deltas at seed 0 vs full ({ref['pruned_heads']}h): " + ", ".join(deltas))
    assert ok


def test_criterion_10_determinism(desk):
    def trace():
        cfg = desk["cfg"]
        # default dropout rates (0.2 / 0.1) and stochastic gates so every RNG path is exercised
        mcfg = dataclasses.replace(desk["base"].model.cfg, dropout_attn=0.2, dropout_hidden=0.1)
        model = AllAttentionLM(mcfg, seed=0, dtype=cfg.np_dtype)
        model.load_arrays(desk["base"].model.state_arrays())
        gates = GateSet(model.cfg.n_layers, model.cfg.n_heads, init=2.0, dtype=cfg.np_dtype)
        state = make_state(model, cfg.replace(steps=100, lambda_=0.2).prune_schedule(), seed=7, gates=gates,
                           gate_lr=cfg.gate_lr)
        with threadpool_limits(1):
            return [m["nll"] for m in run_training(state, desk["splits"]["train"], 100, cfg.lanes)]

    a, b = trace(), trace()
    ok = len(a) == 100 and a == b
    record(10, ok, f"100-step traces identical: {a == b} (final nll {a[-1]:.6f})")
    assert ok
