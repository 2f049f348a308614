"""Command-line driver.

Usage: ``gatedspec <command> [--config FILE] [--seed N] [--out-dir DIR] [--section.key VALUE ...]``

Exit codes: 0 success, 1 runtime failure, 2 bad configuration, 3 missing file.
Failures print one line ``error: <kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, checkpoint, config, data, gate, trainer
from .backbone import Backbone, BackboneConfig
from .config import ConfigError
from .engine import DecodeSession, decode
from .heads import HeadConfig, HeadStack
from .tree import TemplateError, TemplateSet, full_space_size, select_templates

log = logging.getLogger("gatedspec")

COMMANDS = ("train-backbone", "train-heads", "decode", "bench", "analyze", "calibrate-gate",
            "gen-templates", "inspect-ckpt")


# ------------------------------------------------------------------ helpers


def out_dir(cfg) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} not found")
    return p


def backbone_path(cfg) -> Path:
    return Path(cfg["backbone"]["checkpoint"] or Path(cfg["out_dir"]) / "backbone.crbs")


def heads_path(cfg, paradigm: str) -> Path:
    if cfg["heads"]["checkpoint"] and cfg["heads"]["paradigm"] == paradigm:
        return Path(cfg["heads"]["checkpoint"])
    return Path(cfg["out_dir"]) / f"{paradigm}.crbs"


def load_corpus(cfg) -> data.Corpus:
    c = cfg["corpus"]
    if c["path"]:
        return data.load_corpus(_require(c["path"]), c["eval_fraction"])
    raw = data.toy_corpus(c["toy_bytes"], c["toy_seed"]).encode()
    return data.corpus_from_bytes(raw, c["eval_fraction"])


def train_config(cfg, default_lr: float) -> trainer.TrainConfig:
    t = dict(cfg["train"])
    t["lr"] = t["lr"] if t["lr"] is not None else default_lr
    return trainer.TrainConfig(eval_fraction=cfg["corpus"]["eval_fraction"], seed=cfg["seed"], **t)


def load_backbone(cfg) -> Backbone:
    return Backbone.load(_require(backbone_path(cfg)))


def load_heads(cfg, paradigm: str, backbone: Backbone) -> tuple[HeadStack, dict]:
    stack, meta = HeadStack.load(_require(heads_path(cfg, paradigm)))
    if meta.get("backbone_digest") not in (None, backbone.weights_digest()):
        raise ConfigError(f"{paradigm} heads were trained on a different backbone")
    k = cfg["tree"]["top_k"]
    if k != stack.config.top_k:
        stack = HeadStack(dataclasses.replace(stack.config, top_k=k), stack.d_model, stack.vocab_size, stack.params)
    return stack, meta


def templates_for(cfg, stack: HeadStack, meta: dict, paths: int | None = None) -> TemplateSet:
    """Template file if configured, else best-first selection from the stored top-k table."""
    H, k = stack.config.n_heads, stack.config.top_k
    if cfg["tree"]["template_file"] and paths is None:
        return TemplateSet.load(_require(cfg["tree"]["template_file"])).validate(H, k)
    freq = rank_prior(H, k, meta.get("topk_table"))
    return select_templates(min(paths or cfg["tree"]["paths"], full_space_size(H, k)), freq)


def rank_prior(H: int, k: int, topk_table=None) -> np.ndarray:
    """Per-head per-rank hit frequencies; uniform when no measured table is available."""
    if topk_table is not None:
        table = np.asarray(topk_table, dtype=np.float64)
        if table.shape[0] == H and table.shape[1] >= k:
            return trainer.rank_frequencies(table[:, :k])
    return np.full((H, k), 1.0 / k)


def gate_for(cfg, paradigm: str, backbone: Backbone) -> gate.GateConfig:
    g = cfg["gate"]
    if not g["enabled"]:
        return gate.GateConfig.disabled()
    if g["threshold"] is not None:
        return gate.GateConfig(float(g["threshold"]), g["source"])
    stored = Path(cfg["out_dir"]) / f"gate_{paradigm}_{g['source']}.json"
    if stored.exists():
        return gate.GateConfig(json.loads(stored.read_text())["threshold"], g["source"])
    log.warning("no gate threshold configured or calibrated for %s; running ungated", paradigm)
    return gate.GateConfig(math.inf, g["source"])


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _prompt_list(cfg, calibration: bool = False):
    b = cfg["bench"]
    if calibration:
        suite = data.toy_prompt_suite(per_category=max(1, -(-b["calibration_prompts"] // len(data.CATEGORIES))),
                                      seed=cfg["seed"] + 1000)
        return list(suite.items())[:b["calibration_prompts"]]
    if b["suite"]:
        return list(data.load_prompt_suite(_require(b["suite"])).items())
    return list(data.toy_prompt_suite(per_category=b["per_category"], seed=cfg["seed"] + 1).items())


# ---------------------------------------------------------------- commands


def cmd_train_backbone(cfg) -> int:
    b = {k: v for k, v in cfg["backbone"].items() if k != "checkpoint"}
    try:
        bcfg = BackboneConfig(**b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    corpus = load_corpus(cfg)
    path = backbone_path(cfg)
    out_dir(cfg)
    model, res = trainer.train_backbone(corpus, bcfg, train_config(cfg, 3e-3), path=path)
    emit({"checkpoint": str(path), "init_eval_loss": res.init_eval_loss, "final_eval_loss": res.final_eval_loss,
          "digest": model.weights_digest(), "corpus_sha256": corpus.sha256})
    return 0


def cmd_train_heads(cfg) -> int:
    h = cfg["heads"]
    if h["paradigm"] == "vanilla":
        raise ConfigError("train-heads needs heads.paradigm medusa or cerberus")
    try:
        hcfg = HeadConfig.for_blocks(h["paradigm"], h["n_heads"], h["resblocks"],
                                     special_position=h["special_position"], top_k=cfg["tree"]["top_k"],
                                     resblock_variant=h["resblock_variant"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = load_backbone(cfg)
    corpus = load_corpus(cfg)
    stack, res = trainer.train_heads(model, hcfg, corpus, train_config(cfg, trainer.HEAD_LR))
    table = trainer.eval_head_topk(stack, model, corpus.eval, hcfg.top_k, cfg["train"]["seq_len"],
                                   cfg["eval"]["max_windows"])
    path = heads_path(cfg, h["paradigm"])
    out_dir(cfg)
    stack.save(path, {"backbone_digest": model.weights_digest(), "topk_table": table.tolist()})
    emit({"checkpoint": str(path), "init_eval_loss": res.init_eval_loss, "final_eval_loss": res.final_eval_loss,
          "topk": np.round(table, 4).tolist()})
    return 0


def cmd_decode(cfg) -> int:
    model = load_backbone(cfg)
    par = cfg["heads"]["paradigm"]
    d = cfg["decode"]
    if par == "vanilla":
        session = DecodeSession(model, None, gate.GateConfig.disabled(), None, d["max_new_tokens"], d["stop_token"],
                                seed=cfg["seed"])
    else:
        stack, meta = load_heads(cfg, par, model)
        session = DecodeSession(model, stack, gate_for(cfg, par, model), templates_for(cfg, stack, meta),
                                d["max_new_tokens"], d["stop_token"], seed=cfg["seed"],
                                head_workers=cfg["heads"]["workers"])
    tokens, traces = decode(session, data.encode(d["prompt"]))
    out = out_dir(cfg)
    bench.write_jsonl(out / "decode_traces.jsonl", [t.to_dict() for t in traces])
    sys.stdout.buffer.write(data.decode(tokens))
    sys.stdout.flush()
    return 0


def _bench_gates(cfg, model, stacks, templates) -> dict[str, gate.GateConfig]:
    gates = {}
    for par, (stack, _) in stacks.items():
        g = gate_for(cfg, par, model)
        if cfg["gate"]["enabled"] and math.isinf(g.threshold):
            first = next(iter(templates.values()))
            T, _, _ = bench.calibrate_gate(model, stack, first, _prompt_list(cfg, calibration=True),
                                           cfg["bench"]["max_new_tokens"], cfg["gate"]["source"],
                                           parallel_overhead=cfg["gate"]["parallel_overhead"])
            g = gate.GateConfig(T, cfg["gate"]["source"])
        gates[par] = g
    return gates


def cmd_bench(cfg) -> int:
    model = load_backbone(cfg)
    b = cfg["bench"]
    stacks = {p: load_heads(cfg, p, model) for p in b["paradigms"]}
    settings = [bench.BenchSetting(bench.VANILLA, bench.VANILLA)]
    templates = {}
    gates = None
    for par, (stack, meta) in stacks.items():
        for paths in b["trees"]:
            templates[f"{par}-{paths}"] = templates_for(cfg, stack, meta, int(paths))
    if stacks:
        gates = _bench_gates(cfg, model, stacks, {k: v for k, v in templates.items()})
    for par in stacks:
        for paths in b["trees"]:
            key = f"{par}-{paths}"
            settings.append(bench.BenchSetting(key, par, key, gate.GateConfig.disabled()))
            settings.append(bench.BenchSetting(f"{key}-gated", par, key, gates[par]))
    traces, outputs = bench.run_bench(model, {p: s for p, (s, _) in stacks.items()}, templates, _prompt_list(cfg),
                                      settings, b["max_new_tokens"], cfg["decode"]["stop_token"], b["workers"],
                                      check_lossless=True)
    out = out_dir(cfg)
    bench.write_jsonl(out / "traces.jsonl", traces)
    bench.write_jsonl(out / "outputs.jsonl", outputs)
    tables = {p: m["topk_table"] for p, (_, m) in stacks.items() if "topk_table" in m}
    report = bench.analyze(traces, tables)
    report["gate_thresholds"] = {p: g.threshold for p, g in (gates or {}).items()}
    report["lossless"] = all(o["lossless"] for o in outputs)
    bench.write_report(report, out)
    bad = bench.check_accounting(report, outputs)
    emit({"out_dir": str(out), "lossless": report["lossless"], "accounting_violations": bad,
          "tokens_per_forward": {n: s["tokens_per_forward"] for n, s in report["settings"].items()}})
    return 0 if report["lossless"] and not bad else 1


def cmd_analyze(cfg) -> int:
    src = cfg["bench"]["traces"] or Path(cfg["out_dir"]) / "traces.jsonl"
    traces = bench.read_jsonl(_require(src))
    tables = {}
    for p in cfg["bench"]["paradigms"]:
        hp = heads_path(cfg, p)
        if hp.exists():
            meta = checkpoint.read_header(hp)["metadata"]
            if "topk_table" in meta:
                tables[p] = meta["topk_table"]
    report = bench.analyze(traces, tables)
    paths = bench.write_report(report, out_dir(cfg))
    emit({"report": str(paths["report.json"]), "settings": sorted(report["settings"])})
    return 0


def cmd_calibrate_gate(cfg) -> int:
    par = cfg["heads"]["paradigm"]
    if par == "vanilla":
        raise ConfigError("calibrate-gate needs heads.paradigm medusa or cerberus")
    model = load_backbone(cfg)
    stack, meta = load_heads(cfg, par, model)
    src = cfg["gate"]["source"]
    T, table, _ = bench.calibrate_gate(model, stack, templates_for(cfg, stack, meta),
                                       _prompt_list(cfg, calibration=True), cfg["bench"]["max_new_tokens"], src,
                                       parallel_overhead=cfg["gate"]["parallel_overhead"])
    path = out_dir(cfg) / f"gate_{par}_{src}.json"
    path.write_text(json.dumps({"threshold": T, "source": src, "grid": table}, indent=2))
    emit({"threshold": T, "source": src, "path": str(path), "reference_threshold": gate.REFERENCE_THRESHOLD})
    return 0


def cmd_gen_templates(cfg) -> int:
    H, k, paths = cfg["heads"]["n_heads"], cfg["tree"]["top_k"], cfg["tree"]["paths"]
    if paths < 1 or H < 1 or k < 1:
        raise ConfigError("paths, heads and top_k must be >= 1")
    table = None
    hp = heads_path(cfg, cfg["heads"]["paradigm"]) if cfg["heads"]["paradigm"] != "vanilla" else None
    if hp is not None and hp.exists():
        table = checkpoint.read_header(hp)["metadata"].get("topk_table")
    ts = select_templates(paths, rank_prior(H, k, table))
    path = Path(cfg["tree"]["template_file"] or out_dir(cfg) / f"templates_{paths}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    ts.save(path)
    emit({"path": str(path), "paths": len(ts), "nodes": ts.node_count, "depth": ts.depth,
          "full_space": full_space_size(H, k), "prefix_closed": ts.is_prefix_closed()})
    return 0


def cmd_inspect_ckpt(cfg, target: str | None) -> int:
    path = _require(target or backbone_path(cfg))
    header = checkpoint.read_header(path)
    tensors = header["tensors"]
    n = sum(int(np.prod(t["shape"])) for t in tensors.values())
    meta = {k: v for k, v in header["metadata"].items() if k != "topk_table"}
    emit({"path": str(path), "metadata": meta, "tensors": len(tensors), "parameters": n,
          "shapes": {k: v["shape"] for k, v in tensors.items()}})
    return 0


# -------------------------------------------------------------------- main


def parse(argv) -> tuple[str, dict, str | None]:
    parser = argparse.ArgumentParser(prog="gatedspec", description="Entropy-gated speculative decoding toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("target", nargs="?", help="checkpoint path (inspect-ckpt only)")
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)

    overrides = {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--"):
            raise ConfigError(f"unexpected argument {flag!r}")
        if "=" in flag:
            key, value = flag.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"flag {flag} needs a value")
            key, value = flag, rest[i + 1]
            i += 2
        overrides[config.canonical_key(key)] = config.parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    file_values = config.load_file(args.config) if args.config else {}
    cfg = config.resolve(file_values, overrides)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.command, cfg, args.target


HANDLERS = {
    "train-backbone": cmd_train_backbone,
    "train-heads": cmd_train_heads,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
    "calibrate-gate": cmd_calibrate_gate,
    "gen-templates": cmd_gen_templates,
}


def main(argv=None) -> int:
    try:
        command, cfg, target = parse(sys.argv[1:] if argv is None else argv)
        if command == "inspect-ckpt":
            return cmd_inspect_ckpt(cfg, target)
        if target is not None:
            raise ConfigError(f"{command} takes no positional argument")
        return HANDLERS[command](cfg)
    except SystemExit as exc:
        return 2 if exc.code else 0
    except (ConfigError, TemplateError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: runtime: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
