"""
Routing steps with an entropy gate
==================================

When the backbone is unsure, drafted tokens rarely survive verification, so
the step falls back to plain decoding and skips the heads entirely.
"""

import numpy as np

from gatedspec import gate
from gatedspec.gate import GateConfig

confident = np.array([9.0, 0.5, 0.1, 0.0])
unsure = np.array([1.0, 0.9, 1.1, 1.0])
for name, v in [("confident", confident), ("unsure", unsure)]:
    print(f"{name:>9}: {gate.entropy(v):.3f} bits")

cfg = GateConfig(threshold=1.0, source=gate.LOGITS)
print("routes:", gate.decide(cfg, confident, confident).route, gate.decide(cfg, unsure, unsure).route)

###############################################################################
# Thresholds are picked per model. ``simulate_schedule`` replays a greedy
# trajectory where ``accepted[p]`` is what a parallel step at position ``p``
# would accept; acceptance here falls as entropy rises.

rng = np.random.default_rng(0)
ent = rng.uniform(0, 4, size=400)
acc = np.where(ent < 2.0, rng.integers(1, 4, size=400), 0)
for overhead in (0.0, 0.5):
    best, table = gate.calibrate_threshold([(ent, acc)], K=16, parallel_overhead=overhead)
    print(f"overhead {overhead}: best threshold {best:.3f} bits, score {max(s for _, s in table):.3f}")
