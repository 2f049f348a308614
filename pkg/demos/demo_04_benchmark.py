"""
Benchmarking settings and reading the report
============================================

``run_bench`` decodes a prompt suite under several settings; ``analyze``
turns the step traces into the report. Random heads are used here so the
script runs in seconds, which is why almost every parallel step accepts
nothing.
"""

import json
import tempfile

from gatedspec import bench, data
from gatedspec.backbone import Backbone, BackboneConfig
from gatedspec.gate import GateConfig
from gatedspec.heads import CERBERUS, HeadConfig, HeadStack
from gatedspec.tree import TemplateSet

model = Backbone.init(BackboneConfig(d_model=32, n_layers=1, n_attn_heads=2, max_context=128, d_ff=64), seed=0)
heads = {CERBERUS: HeadStack.random(HeadConfig(CERBERUS, 3, 2, top_k=3), 32, 256, seed=1)}
templates = {"full": TemplateSet.full(3, 3)}
prompts = list(data.toy_prompt_suite(per_category=2).items())

###############################################################################
# The gated setting uses a threshold calibrated on separate prompts.

calib = list(data.toy_prompt_suite(per_category=1, seed=5).items())
threshold, _, _ = bench.calibrate_gate(model, heads[CERBERUS], templates["full"], calib, max_new_tokens=16)
print(f"calibrated threshold: {threshold:.3f} bits")

settings = [bench.BenchSetting("vanilla", "vanilla"),
            bench.BenchSetting("cerberus", CERBERUS, "full"),
            bench.BenchSetting("cerberus-gated", CERBERUS, "full", GateConfig(threshold))]
traces, outputs = bench.run_bench(model, heads, templates, prompts, settings, max_new_tokens=16, check_lossless=True)
report = bench.analyze(traces)

for name, s in report["settings"].items():
    print(f"{name:>15}: tokens/forward {s['tokens_per_forward']:.3f}  routes {s['route_counts']}  "
          f"zero-accept {s['zero_accept_proportion']}")
print("lossless:", all(o["lossless"] for o in outputs))
print("accounting violations:", bench.check_accounting(report, outputs))

out = tempfile.mkdtemp()
paths = bench.write_report(report, out)
print("wrote", sorted(p.name for p in paths.values()), "to", out)
print(json.dumps(report["reference"]))
