"""Acceptance suite: losslessness, exactness oracles, gate degeneracy and trend checks on the trained toy model.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion lines
as they are produced; a summary block is printed at the end either way.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
import toymodels
from gatedspec import bench, data, gate, tensor as tn, trainer
from gatedspec.backbone import Backbone, BackboneConfig
from gatedspec.engine import DecodeSession, decode, vanilla_greedy
from gatedspec.gate import GateConfig
from gatedspec.heads import (
    CERBERUS, MEDUSA, HeadConfig, HeadStack, resblock_forward, special_resblock_forward, wavefront_schedule,
)
from gatedspec.tensor import Tensor
from gatedspec.tree import REFERENCE_PATH_COUNTS, TemplateSet, build_tree, full_space_size, select_templates
from treeutil import max_path_deviation, random_templates

BASELINE_FILE = Path(__file__).parent / "baselines" / "acceleration.json"
PARADIGMS = (MEDUSA, CERBERUS)
MAX_NEW_TOKENS = 32
LOSSLESS_BUDGET_S = 300.0
BASELINE_SLACK = 0.98   # frozen tokens-per-forward may not drop by more than 2%


def detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(f"\n  {request.node.get_closest_marker('criterion').args[1]}: {text}")


@pytest.fixture(scope="module")
def toy():
    return toymodels.load()


@pytest.fixture(scope="module")
def templates(toy):
    _, heads = toy
    out = {}
    for par, (stack, meta) in heads.items():
        freq = trainer.rank_frequencies(np.asarray(meta["topk_table"]))
        for budget in REFERENCE_PATH_COUNTS:
            out[f"{par}-{budget}"] = select_templates(budget, freq)
    return out


def bench_prompts():
    return list(data.toy_prompt_suite(per_category=13, seed=7).items())


@pytest.fixture(scope="module")
def bench_run(toy, templates):
    """Every paradigm x tree x {ungated, calibrated gate} setting plus vanilla over 104 prompts."""
    bb, heads = toy
    stacks = {p: s for p, (s, _) in heads.items()}
    calib = list(data.toy_prompt_suite(per_category=2, seed=99).items())
    settings = [bench.BenchSetting(bench.VANILLA, bench.VANILLA)]
    thresholds = {}
    for par in PARADIGMS:
        for budget in REFERENCE_PATH_COUNTS:
            key = f"{par}-{budget}"
            T, _, _ = bench.calibrate_gate(bb, stacks[par], templates[key], calib, MAX_NEW_TOKENS)
            thresholds[key] = T
            settings.append(bench.BenchSetting(key, par, key, GateConfig.disabled()))
            settings.append(bench.BenchSetting(key + "-gated", par, key, GateConfig(T)))
    prompts = bench_prompts()
    t0 = time.perf_counter()
    traces, outputs = bench.run_bench(bb, stacks, templates, prompts, settings, MAX_NEW_TOKENS, check_lossless=True)
    elapsed = time.perf_counter() - t0
    report = bench.analyze(traces, {p: m["topk_table"] for p, (_, m) in heads.items()})
    return {"traces": traces, "outputs": outputs, "report": report, "elapsed": elapsed,
            "thresholds": thresholds, "prompts": prompts, "settings": settings}


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "losslessness")
def test_losslessness(request, bench_run):
    outs = bench_run["outputs"]
    configs = {o["setting"] for o in outs} - {bench.VANILLA}
    bad = sorted({o["setting"] for o in outs if not o["lossless"]})
    detail(request, f"{len(bench_run['prompts'])} prompts x {len(configs)} configs, mismatching configs={bad}, "
                    f"decode time {bench_run['elapsed']:.0f}s")
    assert len(bench_run["prompts"]) >= 100
    assert len(configs) == len(PARADIGMS) * 2 * len(REFERENCE_PATH_COUNTS)
    assert not bad
    assert bench_run["elapsed"] < LOSSLESS_BUDGET_S


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2, "tree-mask oracle")
def test_tree_mask_oracle(request, toy):
    bb, _ = toy
    rng = np.random.default_rng(2024)
    prompts = [data.encode(p) for _, p in bench_prompts()[:20]]
    worst, n_trees = 0.0, 0
    for i in range(200):
        ts = random_templates(rng, 4, 10, int(rng.integers(1, 16)))
        tree = build_tree(ts, rng.integers(0, 256, size=(4, 10)))
        assert len(tree) <= 15
        worst = max(worst, max_path_deviation(bb, prompts[i % len(prompts)], int(rng.integers(256)), tree))
        n_trees += 1
    detail(request, f"{n_trees} trees, max |dlogit| = {worst:.2e}")
    assert n_trees >= 200 and worst <= 1e-4


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "wavefront equivalence")
def test_wavefront_equivalence(request):
    d, V = 16, 32
    cases = mismatches = 0
    for H in range(1, 5):
        for R in range(1, 5):
            for draw in range(50):
                stack = HeadStack.random(HeadConfig.for_blocks(CERBERUS, H, R), d, V, seed=1000 * H + 100 * R + draw)
                h = Tensor(tn.make_rng(draw).normal(size=d).astype(np.float32))
                plan = wavefront_schedule(stack)
                assert plan.n_steps == R
                with tn.no_grad():
                    seq = [t.data for t in stack.forward_sequential(h)]
                    wave = [t.data for t in plan.execute(stack, h, workers=1 + draw % 4)]
                mismatches += not all(np.array_equal(a, b) for a, b in zip(seq, wave))
                cases += 1
    detail(request, f"{cases} stacks (H,R in 1..4 x 50 draws), bitwise mismatches={mismatches}")
    assert cases == 800 and mismatches == 0


# ------------------------------------------------------------------ 4


def _op_cases(rng):
    def T(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b, x, g, beta = T(3, 8), T(8, 16), T(4, 8), T(8), T(8)
    w16 = rng.normal(size=(4, 16))
    mask = rng.random((4, 8)) < 0.7
    mask[:, 0] = True
    table, ids = T(16, 8), np.array([[1, 5, 5], [0, 15, 3]])
    logits, tgt = T(5, 16), rng.integers(0, 16, size=5)
    W8, b8, W16, b16, D = T(8, 8), T(8), T(16, 16), T(16), T(16, 8)
    hp = T(8)
    return {
        "matmul": (lambda: tn.sum_all(tn.mul(tn.matmul(a, b), rng_fixed(w16[:3]))), [a, b]),
        "add (broadcast)": (lambda: tn.sum_all(tn.mul(tn.add(x, g), rng_fixed(w16[:, :8]))), [x, g]),
        "mul": (lambda: tn.sum_all(tn.mul(x, x)), [x]),
        "scale": (lambda: tn.sum_all(tn.mul(tn.scale(x, -1.7), x)), [x]),
        "silu": (lambda: tn.sum_all(tn.mul(tn.silu(x), rng_fixed(w16[:, :8]))), [x]),
        "softmax (masked)": (lambda: tn.sum_all(tn.mul(tn.softmax(x, mask), rng_fixed(w16[:, 8:]))), [x]),
        "layernorm": (lambda: tn.sum_all(tn.mul(tn.layernorm(x, g, beta), rng_fixed(w16[:, :8]))), [x, g, beta]),
        "embedding": (lambda: tn.sum_all(tn.mul(tn.embedding(table, ids), tn.embedding(table, ids))), [table]),
        "cross_entropy": (lambda: tn.cross_entropy(logits, tgt), [logits]),
        "concat/reshape/transpose/getitem": (
            lambda: tn.sum_all(tn.mul(tn.transpose(tn.reshape(tn.concat([x, tn.getitem(x, (slice(None), slice(0, 4)))],
                                                                         -1), (3, 16)), (1, 0)),
                                      rng_fixed(np.resize(w16, (16, 3))))), [x]),
        "resblock": (lambda: tn.sum_all(tn.mul(resblock_forward(W8, b8, hp), hp)), [W8, b8, hp]),
        "resblock canonical": (lambda: tn.sum_all(tn.mul(resblock_forward(W8, b8, hp, "canonical"), hp)), [W8, b8, hp]),
        "special resblock": (lambda: tn.sum_all(tn.mul(special_resblock_forward(W16, b16, D, g, hp), g)),
                             [W16, b16, D, g, hp]),
    }


def rng_fixed(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


@pytest.mark.criterion(4, "gradient checks")
def test_gradient_checks(request):
    worst = {}
    with tn.precision(np.float64):
        rng = np.random.default_rng(8)
        for name, (fn, params) in _op_cases(rng).items():
            worst[name] = max(gradcheck.check(fn, params))
        model = Backbone.init(BackboneConfig(vocab_size=16, d_model=8, n_layers=1, n_attn_heads=2, max_context=16,
                                             d_ff=16), seed=3)
        windows = rng.integers(0, 16, size=(2, 6))
        worst["backbone LM loss"] = max(gradcheck.check(lambda: trainer.lm_loss(model, windows), model.parameters()))
        for par in PARADIGMS:
            stack = HeadStack.random(HeadConfig.for_blocks(par, 3, 3), 8, 16, seed=5)
            h = rng.normal(size=(2, 4, 8))
            tg = [rng.integers(0, 16, size=(2, 4)) for _ in range(3)]
            worst[f"{par} head loss"] = max(gradcheck.check(
                lambda: trainer.head_loss(stack, h, tg, [1.0, 0.8, 0.64])[0], stack.parameters()))
    top = max(worst, key=worst.get)
    detail(request, f"{len(worst)} checks, worst {top} rel err {worst[top]:.1e}")
    assert max(worst.values()) < 1e-3


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "gate degeneracy")
def test_gate_degeneracy(request, toy, templates):
    bb, heads = toy
    prompts = [data.encode(p) for _, p in bench_prompts()[::13]]
    tokens = forwards = blocks = 0
    shape_equal = True
    for par in PARADIGMS:
        stack = heads[par][0]
        ts = templates[f"{par}-63"]
        for p in prompts:
            out, traces = decode(DecodeSession(bb, stack, GateConfig(0.0), ts, MAX_NEW_TOKENS), p)
            assert out == vanilla_greedy(bb, p, MAX_NEW_TOKENS)
            tokens += len(out)
            forwards += sum(t.forward_passes for t in traces)
            blocks += sum(t.head_block_executions for t in traces)
            _, off = decode(DecodeSession(bb, stack, GateConfig.disabled(), ts, MAX_NEW_TOKENS), p)
            _, inf = decode(DecodeSession(bb, stack, GateConfig(math.inf), ts, MAX_NEW_TOKENS), p)
            shape = lambda tr: [(t.route, t.tokens_emitted, t.accepted, t.tree_size, t.head_block_executions)  # noqa
                                for t in tr]
            shape_equal &= shape(off) == shape(inf) and all(t.route == gate.PARALLEL for t in off)
    tpf = tokens / forwards
    detail(request, f"T=0 tokens-per-forward={tpf}, head blocks={blocks}, disabled==always-parallel: {shape_equal}")
    assert tpf == 1.0 and blocks == 0 and shape_equal


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "entropy correctness")
def test_entropy_correctness(request):
    errs = {K: abs(gate.entropy(np.zeros(K)) - math.log2(K)) for K in (2, 4, 16, 256)}
    one_hot = max(gate.entropy(np.eye(K)[0] * 1e4) for K in (2, 4, 16, 256))
    detail(request, f"max |S(uniform) - log2 K| = {max(errs.values()):.1e}, S(one-hot) = {one_hot:.1e}")
    assert max(errs.values()) <= 1e-6 and one_hot <= 1e-6


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "acceleration trend")
def test_acceleration(request, bench_run):
    settings = bench_run["report"]["settings"]
    tpf = {n: s["tokens_per_forward"] for n, s in settings.items() if n != bench.VANILLA}
    key = {"settings": toymodels.settings_digest(), "prompts": len(bench_run["prompts"]),
           "max_new_tokens": MAX_NEW_TOKENS}
    baseline = json.loads(BASELINE_FILE.read_text()) if BASELINE_FILE.exists() else None
    if baseline is None or baseline.get("key") != key:
        if min(tpf.values()) > 1.0:
            BASELINE_FILE.parent.mkdir(exist_ok=True)
            BASELINE_FILE.write_text(json.dumps({"key": key, "tokens_per_forward": tpf}, indent=2, sort_keys=True))
        baseline = {"tokens_per_forward": tpf}
    frozen = baseline["tokens_per_forward"]
    regressions = {n: (v, frozen[n]) for n, v in tpf.items() if v < BASELINE_SLACK * frozen.get(n, 0.0)}
    lo = min(tpf, key=tpf.get)
    hi = max(tpf, key=tpf.get)
    detail(request, f"tokens-per-forward min {tpf[lo]:.3f} ({lo}) max {tpf[hi]:.3f} ({hi}); "
                    f"regressions vs baseline: {regressions or 'none'}")
    assert all(v > 1.0 for v in tpf.values())
    assert not regressions


# ------------------------------------------------------------------ 8


@pytest.mark.criterion(8, "entropy/acceptance trend")
def test_entropy_acceptance(request, bench_run):
    traces = [t for t in bench_run["traces"] if t["paradigm"] != bench.VANILLA and not t["gated"]]
    per_setting = {}
    for name in sorted({t["setting"] for t in traces}):
        ts = [t for t in traces if t["setting"] == name]
        per_setting[name] = {src: bench.entropy_acceptance_analysis(ts, src) for src in (gate.HIDDEN, gate.LOGITS)}
    steps = min(r[gate.HIDDEN]["steps"] for r in per_setting.values())
    rho = {src: max(r[src]["spearman"] for r in per_setting.values()) for src in (gate.HIDDEN, gate.LOGITS)}
    negative = [src for src, v in rho.items() if v < 0]
    detail(request, f">= {steps} parallel steps per setting; least negative rho: hidden {rho[gate.HIDDEN]:+.3f}, "
                    f"logits {rho[gate.LOGITS]:+.3f}; negative under {negative or 'no source'}")
    assert steps >= 500
    assert negative


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9, "head quality trend")
def test_head_quality(request, toy):
    bb, heads = toy
    corpus = toymodels.corpus()
    tables = {}
    for par in PARADIGMS:
        tables[par] = trainer.eval_head_topk(heads[par][0], bb, corpus.eval, **toymodels.TOPK_EVAL)
        np.testing.assert_allclose(tables[par], heads[par][1]["topk_table"])
    print()
    for i in range(4):
        print(f"  head {i}  medusa " + " ".join(f"{v:.3f}" for v in tables[MEDUSA][i])
              + "  | cerberus " + " ".join(f"{v:.3f}" for v in tables[CERBERUS][i]))
    rear = {i: round(float(tables[CERBERUS][i].mean() - tables[MEDUSA][i].mean()), 4) for i in (1, 2, 3)}
    k_ok = all(np.all(np.diff(t, axis=1) >= 0) for t in tables.values())
    head_ok = {p: bool(np.all(np.diff(t, axis=0) <= 0)) for p, t in tables.items()}
    detail(request, f"non-decreasing in k': {k_ok}; non-increasing in head: {head_ok}; "
                    f"cerberus-medusa mean top-k gap on rear heads (reported): {rear}")
    assert k_ok and all(head_ok.values())


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10, "count law")
def test_count_law(request, toy, templates):
    full = TemplateSet.full(4, 10)
    assert len(full) == full_space_size(4, 10) == 10 + 10 ** 2 + 10 ** 3 + 10 ** 4 == 11110
    sizes = {}
    for key, ts in templates.items():
        assert ts.is_prefix_closed()
        ts.validate(4, 10)
        sizes[key] = len(ts)
    detail(request, f"full space {len(full)}; generated sets {sizes}")
    for par in PARADIGMS:
        assert [sizes[f"{par}-{b}"] for b in REFERENCE_PATH_COUNTS] == [63, 120, 150]


# ------------------------------------------------------------------ 11


@pytest.mark.criterion(11, "accounting identities")
def test_accounting(request, bench_run):
    report = bench_run["report"]
    bad = bench.check_accounting(report, bench_run["outputs"])
    van = report["settings"][bench.VANILLA]
    props = [s["zero_accept_proportion"] for s in report["settings"].values() if s["zero_accept_proportion"] is not None]
    gate_ok = all(report["settings"][f"{n}-gated"]["head_block_executions"]
                  <= report["settings"][n]["head_block_executions"]
                  for n in report["settings"] if n != bench.VANILLA and not n.endswith("-gated"))
    detail(request, f"violations={bad or 'none'}; vanilla self-speedup {van['speedup']}, tokens-per-forward "
                    f"{van['tokens_per_forward']}; zero-accept in [{min(props):.3f}, {max(props):.3f}]; "
                    f"gate never adds head work: {gate_ok}")
    assert not bad and van["speedup"] == 1.0 and van["tokens_per_forward"] == 1.0 and gate_ok
    assert all(0.0 <= p <= 1.0 for p in props)
