"""Benchmark harness: run decode settings over a prompt suite and analyse the traces.

Everything in the report is computed by :func:`analyze` from the persisted
per-step trace records, so a report can be regenerated from a traces file
without decoding again.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import gate as gating
from .backbone import Backbone
from .data import encode
from .engine import DecodeSession, decode, probe_trajectory, vanilla_greedy
from .gate import GateConfig
from .heads import HeadStack
from .tree import TemplateSet

log = logging.getLogger(__name__)

VANILLA = "vanilla"
MIN_ANALYSIS_STEPS = 30

# Headline figures of the 7B-scale reference setup; reported for context, never used as targets.
REFERENCE = {
    "speedup": 2.12,
    "tokens_per_second": 80.35,
    "zero_accept_proportion": 0.1838,
    "gate_threshold": gating.REFERENCE_THRESHOLD,
    "tree_paths": [63, 120, 150],
    "top_k": 10,
    "n_heads": 4,
}


@dataclass(frozen=True)
class BenchSetting:
    name: str
    paradigm: str                      # vanilla | medusa | cerberus
    tree: str | None = None            # key into the templates mapping
    gate: GateConfig = field(default_factory=GateConfig.disabled)

    @property
    def gated(self) -> bool:
        return self.paradigm != VANILLA and self.gate.enabled and not math.isinf(self.gate.threshold)


def standard_settings(paradigms, trees, gate_cfg: GateConfig) -> list[BenchSetting]:
    """Vanilla plus every paradigm x tree x {ungated, gated} combination."""
    out = [BenchSetting(VANILLA, VANILLA)]
    for par in paradigms:
        for t in trees:
            out.append(BenchSetting(f"{par}-{t}", par, t, GateConfig.disabled()))
            out.append(BenchSetting(f"{par}-{t}-gated", par, t, gate_cfg))
    return out


def _run_prompt(backbone, heads, templates, setting, prompt, max_new_tokens, stop_token):
    if setting.paradigm == VANILLA:
        session = DecodeSession(backbone, None, GateConfig.disabled(), None, max_new_tokens, stop_token)
    else:
        session = DecodeSession(backbone, heads[setting.paradigm], setting.gate, templates[setting.tree],
                                max_new_tokens, stop_token)
    return decode(session, prompt)


def run_bench(backbone: Backbone, heads: dict[str, HeadStack], templates: dict[str, TemplateSet],
              prompts, settings, max_new_tokens: int = 64, stop_token: int | None = None,
              workers: int = 1, check_lossless: bool = False) -> tuple[list[dict], list[dict]]:
    """Decode every prompt under every setting.

    ``prompts`` is a sequence of (category, text) pairs. Returns (trace
    records, output records); pass the trace records to :func:`analyze`.
    With ``check_lossless`` each output is compared with plain greedy
    decoding and the result stored on the output record.
    """
    for s in settings:
        if s.paradigm != VANILLA:
            if s.paradigm not in heads:
                raise KeyError(f"setting {s.name!r} needs {s.paradigm} heads")
            if s.tree not in templates:
                raise KeyError(f"setting {s.name!r} needs template set {s.tree!r}")
    prompts = list(prompts)
    reference = None
    if check_lossless:
        reference = [vanilla_greedy(backbone, encode(p), max_new_tokens, stop_token) for _, p in prompts]

    traces: list[dict] = []
    outputs: list[dict] = []
    for s in settings:
        def job(i):
            return _run_prompt(backbone, heads, templates, s, encode(prompts[i][1]), max_new_tokens, stop_token)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(job, range(len(prompts))))
        else:
            results = [job(i) for i in range(len(prompts))]
        for i, (tokens, steps) in enumerate(results):
            cat = prompts[i][0]
            rec = {"setting": s.name, "paradigm": s.paradigm, "tree": s.tree, "gated": s.gated,
                   "category": cat, "prompt": i, "tokens": tokens}
            if reference is not None:
                rec["lossless"] = tokens == reference[i]
            outputs.append(rec)
            for j, st in enumerate(steps):
                traces.append({"setting": s.name, "paradigm": s.paradigm, "tree": s.tree, "gated": s.gated,
                               "category": cat, "prompt": i, "step": j, **st.to_dict()})
        log.info("bench setting %s done", s.name)
    return traces, outputs


# ----------------------------------------------------------------- analyses


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; 0.0 when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry / denom) if denom > 0 else 0.0


def parallel_steps(traces) -> list[dict]:
    return [t for t in traces if t["route"] == gating.PARALLEL]


def zero_accept_proportion(traces) -> float | None:
    """Fraction of parallel steps that emitted only one token; None without parallel steps."""
    par = parallel_steps(traces)
    if not par:
        return None
    return sum(t["tokens_emitted"] == 1 for t in par) / len(par)


def entropy_acceptance_analysis(traces, source: str = gating.HIDDEN) -> dict:
    """Mean gate entropy per accepted-token bucket over parallel steps, plus Spearman rho."""
    key = "entropy_hidden" if source == gating.HIDDEN else "entropy_logits"
    par = parallel_steps(traces)
    ent = [t[key] for t in par]
    acc = [t["accepted"] for t in par]
    buckets = {}
    for a in sorted(set(acc)):
        vals = [e for e, b in zip(ent, acc) if b == a]
        buckets[str(a)] = {"count": len(vals), "mean_entropy": sum(vals) / len(vals)}
    return {
        "source": source,
        "steps": len(par),
        "buckets": buckets,
        "spearman": spearman(ent, acc),
        "insufficient": len(par) < MIN_ANALYSIS_STEPS,
    }


def _summary(traces, n_prompts) -> dict:
    tokens = sum(t["tokens_emitted"] for t in traces)
    forwards = sum(t["forward_passes"] for t in traces)
    wall = sum(t["wall_time"] for t in traces)
    routes = {gating.AUTOREGRESSIVE: 0, gating.PARALLEL: 0}
    for t in traces:
        routes[t["route"]] += 1
    return {
        "prompts": n_prompts,
        "tokens": tokens,
        "steps": len(traces),
        "forward_passes": forwards,
        "tokens_per_forward": tokens / forwards if forwards else 0.0,
        "tokens_per_second": tokens / wall if wall > 0 else 0.0,
        "mean_step_latency": wall / len(traces) if traces else 0.0,
        "head_block_executions": sum(t["head_block_executions"] for t in traces),
        "route_counts": routes,
        "zero_accept_proportion": zero_accept_proportion(traces),
    }


def _group(traces, key):
    groups: dict = {}
    for t in traces:
        groups.setdefault(t[key], []).append(t)
    return groups


def analyze(traces, topk_tables: dict | None = None) -> dict:
    """Build the full report from trace records (pure function of its inputs)."""
    by_setting = _group(traces, "setting")
    settings = {}
    for name, ts in by_setting.items():
        first = ts[0]
        prompts = _group(ts, "prompt")
        per_prompt = {str(p): _summary(v, 1) for p, v in sorted(prompts.items())}
        settings[name] = {
            "paradigm": first["paradigm"], "tree": first["tree"], "gated": first["gated"],
            **_summary(ts, len(prompts)),
            "per_category": {c: _summary(v, len(_group(v, "prompt"))) for c, v in _group(ts, "category").items()},
            "per_prompt": per_prompt,
            "entropy_acceptance": {src: entropy_acceptance_analysis(ts, src) for src in (gating.HIDDEN, gating.LOGITS)},
        }
    base = settings.get(VANILLA)
    for s in settings.values():
        if base is None:
            s["speedup"] = s["tpf_speedup"] = None
            continue
        s["speedup"] = (s["tokens_per_second"] / base["tokens_per_second"]) if base["tokens_per_second"] else None
        s["tpf_speedup"] = s["tokens_per_forward"] / base["tokens_per_forward"]
    report = {"reference": REFERENCE, "settings": settings}
    if topk_tables:
        report["head_topk"] = {p: np.asarray(t).tolist() for p, t in topk_tables.items()}
    return report


def check_accounting(report, outputs=None) -> list[str]:
    """Identity violations in a report (empty list when everything holds)."""
    bad = []
    base = report["settings"].get(VANILLA)
    if base is not None:
        if base["speedup"] != 1.0 and base["tokens_per_second"]:
            bad.append("vanilla self-speedup != 1.0")
        if base["tokens_per_forward"] != 1.0 and base["steps"]:
            bad.append("vanilla tokens-per-forward != 1.0")
    for name, s in report["settings"].items():
        if s["forward_passes"] != s["steps"]:
            bad.append(f"{name}: forward passes != steps")
        if s["route_counts"][gating.AUTOREGRESSIVE] + s["route_counts"][gating.PARALLEL] != s["steps"]:
            bad.append(f"{name}: route counts do not sum to steps")
        if sum(p["tokens"] for p in s["per_prompt"].values()) != s["tokens"]:
            bad.append(f"{name}: per-prompt tokens do not sum")
        z = s["zero_accept_proportion"]
        if z is not None and not 0.0 <= z <= 1.0:
            bad.append(f"{name}: zero-accept proportion out of range")
        for ea in s["entropy_acceptance"].values():
            if sum(b["count"] for b in ea["buckets"].values()) != s["route_counts"][gating.PARALLEL]:
                bad.append(f"{name}: entropy buckets do not cover parallel steps")
            if not -1.0 <= ea["spearman"] <= 1.0:
                bad.append(f"{name}: correlation out of range")
        if s["steps"] and s["tokens_per_forward"] < 1.0:
            bad.append(f"{name}: tokens-per-forward below 1")
    if outputs is not None:
        counts: dict = {}
        for o in outputs:
            counts[o["setting"]] = counts.get(o["setting"], 0) + len(o["tokens"])
        for name, n in counts.items():
            if name in report["settings"] and report["settings"][name]["tokens"] != n:
                bad.append(f"{name}: traced tokens != emitted tokens")
    return bad


# ------------------------------------------------------------------- files


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_report(report, out_dir) -> dict[str, Path]:
    """report.json plus the four CSV tables; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("report.json", "table1.csv", "fig3.csv", "fig5.csv", "table2.csv")}
    paths["report.json"].write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    settings = report["settings"]

    rows = []
    for name, s in settings.items():
        if s["paradigm"] == VANILLA:
            continue
        for cat, c in s["per_category"].items():
            rows.append([name, cat, c["route_counts"][gating.PARALLEL], c["zero_accept_proportion"]])
        rows.append([name, "average", s["route_counts"][gating.PARALLEL], s["zero_accept_proportion"]])
    _csv(paths["table1.csv"], ["setting", "category", "parallel_steps", "zero_accept_proportion"], rows)

    rows = []
    for name, s in settings.items():
        for src, ea in s["entropy_acceptance"].items():
            for acc, b in ea["buckets"].items():
                rows.append([name, src, acc, b["count"], b["mean_entropy"], ea["spearman"], ea["insufficient"]])
    _csv(paths["fig3.csv"], ["setting", "source", "accepted", "count", "mean_entropy", "spearman", "insufficient"],
         rows)

    rows = []
    for par, table in report.get("head_topk", {}).items():
        for i, row in enumerate(table):
            for k, acc in enumerate(row, start=1):
                rows.append([par, i, k, acc])
    _csv(paths["fig5.csv"], ["paradigm", "head", "k", "accuracy"], rows)

    rows = [[name, s["paradigm"], s["tree"], s["gated"], s["tokens_per_second"], s["tokens_per_forward"],
             s["speedup"], s["tpf_speedup"], s["mean_step_latency"], s["head_block_executions"],
             s["route_counts"][gating.AUTOREGRESSIVE], s["route_counts"][gating.PARALLEL]]
            for name, s in settings.items()]
    _csv(paths["table2.csv"], ["setting", "paradigm", "tree", "gated", "tokens_per_second", "tokens_per_forward",
                               "speedup", "tpf_speedup", "mean_step_latency", "head_block_executions",
                               "ar_steps", "parallel_steps"], rows)
    return paths


# ------------------------------------------------------------ gate calibration


def calibrate_gate(backbone: Backbone, heads: HeadStack, templates: TemplateSet, prompts,
                   max_new_tokens: int = 64, source: str = gating.HIDDEN, n_grid: int = 32,
                   parallel_overhead: float = 0.0) -> tuple[float, list, list]:
    """Probe every greedy position of every prompt, then grid-search the threshold.

    Returns (threshold, [(threshold, score), ...], trajectories).
    """
    trajectories = []
    for _, p in prompts:
        probe = probe_trajectory(backbone, heads, templates, encode(p), max_new_tokens)
        ent = probe["entropy_hidden"] if source == gating.HIDDEN else probe["entropy_logits"]
        trajectories.append((ent, probe["accepted"]))
    K = backbone.config.d_model if source == gating.HIDDEN else backbone.config.vocab_size
    best, table = gating.calibrate_threshold(trajectories, K, n_grid, parallel_overhead)
    return best, table, trajectories
