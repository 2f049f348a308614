import csv
import json
import math

import numpy as np
import pytest

from gatedspec import bench, gate
from gatedspec.backbone import Backbone, BackboneConfig
from gatedspec.bench import BenchSetting
from gatedspec.data import encode
from gatedspec.engine import DecodeSession, decode, probe_trajectory
from gatedspec.gate import GateConfig
from gatedspec.heads import CERBERUS, MEDUSA, HeadConfig, HeadStack
from gatedspec.tree import TemplateSet

CFG = BackboneConfig(vocab_size=256, d_model=32, n_layers=2, n_attn_heads=4, max_context=128, d_ff=64)
PROMPTS = [("math", "1+1="), ("coding", "def f(x):"), ("math", "two"), ("writing", "the river")]


@pytest.fixture(scope="module")
def setup():
    model = Backbone.init(CFG, seed=3)
    heads = {p: HeadStack.random(HeadConfig.for_blocks(p, 3, 2, top_k=3), 32, 256, seed=4) for p in (MEDUSA, CERBERUS)}
    trees = {"small": TemplateSet.full(2, 3), "mixed": TemplateSet(((0,), (1,), (0, 0), (0, 0, 0), (1, 2)))}
    return model, heads, trees


@pytest.fixture(scope="module")
def ran(setup):
    model, heads, trees = setup
    settings = bench.standard_settings([MEDUSA, CERBERUS], ["small", "mixed"], GateConfig(3.0))
    traces, outputs = bench.run_bench(model, heads, trees, PROMPTS, settings, max_new_tokens=12,
                                      check_lossless=True)
    return settings, traces, outputs


def synth(entropies, accepted):
    return [{"setting": "s", "paradigm": MEDUSA, "tree": "t", "gated": False, "category": "c", "prompt": 0,
             "step": i, "route": gate.PARALLEL, "tokens_emitted": 1 + a, "accepted": a, "forward_passes": 1,
             "head_block_executions": 3, "tree_size": 4, "wall_time": 0.01, "entropy": e,
             "entropy_hidden": e, "entropy_logits": e} for i, (e, a) in enumerate(zip(entropies, accepted))]


class TestAnalyses:
    def test_constant_entropy_zero_correlation(self):
        res = bench.entropy_acceptance_analysis(synth([1.5] * 40, [i % 4 for i in range(40)]))
        assert res["spearman"] == 0.0 and not res["insufficient"]

    def test_negated_acceptance_perfect_negative(self):
        acc = [i % 5 for i in range(50)]
        res = bench.entropy_acceptance_analysis(synth([-a for a in acc], acc))
        assert res["spearman"] == pytest.approx(-1.0)
        assert res["buckets"]["3"] == {"count": 10, "mean_entropy": -3.0}

    def test_too_few_steps_flagged(self):
        assert bench.entropy_acceptance_analysis(synth([1, 2], [0, 1]))["insufficient"]

    def test_spearman_matches_scipy(self, rng):
        from scipy.stats import spearmanr
        x, y = rng.normal(size=60), rng.integers(0, 4, size=60)
        assert bench.spearman(x, y) == pytest.approx(spearmanr(x, y)[0])

    def test_zero_accept_proportion(self):
        assert bench.zero_accept_proportion(synth([0] * 4, [0, 0, 1, 3])) == 0.5
        assert bench.zero_accept_proportion([]) is None


class TestRun:
    def test_every_setting_lossless(self, ran):
        _, _, outputs = ran
        assert all(o["lossless"] for o in outputs)

    def test_accounting(self, ran):
        _, traces, outputs = ran
        report = bench.analyze(traces)
        assert bench.check_accounting(report, outputs) == []
        van = report["settings"]["vanilla"]
        assert van["tokens_per_forward"] == 1.0 and van["speedup"] == 1.0 and van["tpf_speedup"] == 1.0
        assert van["zero_accept_proportion"] is None

    def test_gate_only_removes_work(self, ran):
        report = bench.analyze(ran[1])["settings"]
        for par in (MEDUSA, CERBERUS):
            for t in ("small", "mixed"):
                assert report[f"{par}-{t}-gated"]["head_block_executions"] <= report[f"{par}-{t}"]["head_block_executions"]

    def test_random_heads_rarely_accept(self, ran):
        report = bench.analyze(ran[1])["settings"]
        assert report["medusa-small"]["zero_accept_proportion"] > 0.9

    def test_regeneration_from_file_is_identical(self, ran, tmp_path):
        _, traces, _ = ran
        bench.write_jsonl(tmp_path / "traces.jsonl", traces)
        again = bench.read_jsonl(tmp_path / "traces.jsonl")
        a = json.dumps(bench.analyze(traces), sort_keys=True)
        b = json.dumps(bench.analyze(again), sort_keys=True)
        assert a == b

    def test_report_files(self, ran, tmp_path):
        report = bench.analyze(ran[1], topk_tables={MEDUSA: np.full((3, 3), 0.5)})
        paths = bench.write_report(report, tmp_path)
        for name in ("table1.csv", "fig3.csv", "fig5.csv", "table2.csv"):
            with open(paths[name]) as f:
                rows = list(csv.reader(f))
            assert len(rows) > 1
        assert json.loads(paths["report.json"].read_text())["reference"]["speedup"] == 2.12

    def test_missing_heads_rejected(self, setup):
        model, heads, trees = setup
        with pytest.raises(KeyError):
            bench.run_bench(model, {}, trees, PROMPTS, [BenchSetting("x", MEDUSA, "small")])

    def test_threads_do_not_change_tokens(self, setup, ran):
        model, heads, trees = setup
        settings = [s for s in ran[0] if s.name == "cerberus-mixed-gated"]
        _, outs = bench.run_bench(model, heads, trees, PROMPTS, settings, max_new_tokens=12, workers=3)
        ref = [o["tokens"] for o in ran[2] if o["setting"] == "cerberus-mixed-gated"]
        assert [o["tokens"] for o in outs] == ref


class OracleStack:
    """Heads that always propose the true greedy continuation at rank 0."""

    def __init__(self, model, prompt_holder, n_heads=3, k=2):
        from types import SimpleNamespace
        self.model, self.holder = model, prompt_holder
        self.config = SimpleNamespace(n_heads=n_heads, top_k=k)
        self.block_executions = n_heads

    def topk(self, h_last):
        from gatedspec.engine import vanilla_greedy
        cont = vanilla_greedy(self.model, self.holder[0].committed, self.config.n_heads + 1)
        out = np.zeros((self.config.n_heads, self.config.top_k), dtype=int)
        out[:, 0] = cont[1:]
        out[:, 1] = (np.array(cont[1:]) + 7) % 256
        return out


def test_oracle_heads_zero_accept_proportion(setup):
    model = setup[0]
    holder = []
    s = DecodeSession(model, None, GateConfig.disabled(), TemplateSet.full(3, 2), max_new_tokens=30)
    s.heads = OracleStack(model, holder)
    holder.append(s)
    _, traces = decode(s, encode("abc"))
    assert bench.zero_accept_proportion([t.to_dict() for t in traces[:-1]]) == 0.0


class TestCalibration:
    def test_probe_matches_parallel_decode(self, setup):
        model, heads, trees = setup
        stack, ts = heads[CERBERUS], trees["small"]
        probe = probe_trajectory(model, stack, ts, encode("hello"), 20)
        s = DecodeSession(model, stack, GateConfig.disabled(), ts, max_new_tokens=20)
        _, traces = decode(s, encode("hello"))
        pos = 0
        for t in traces:
            assert t.accepted == min(probe["accepted"][pos], t.tokens_emitted - 1)
            assert t.entropy_hidden == probe["entropy_hidden"][pos]
            pos += t.tokens_emitted

    def test_calibrated_threshold_on_grid(self, setup):
        model, heads, trees = setup
        T, table, traj = bench.calibrate_gate(model, heads[MEDUSA], trees["small"], PROMPTS[:2], 8)
        assert len(table) == 32 and T in [t for t, _ in table]
        assert 0.0 <= T <= math.log2(CFG.d_model)
        assert len(traj) == 2 and len(traj[0][0]) == 8
