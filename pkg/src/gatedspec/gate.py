"""Entropy gate choosing auto-regressive or parallel decoding per step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AUTOREGRESSIVE = "autoregressive"
PARALLEL = "parallel"

HIDDEN = "hidden"
LOGITS = "logits"

# Threshold used for Vicuna-7B in the reference experiments; not a default here.
REFERENCE_THRESHOLD = 0.59


def entropy(v) -> float:
    """Shannon entropy in bits of ``softmax(v)``; lies in [0, log2 K]."""
    x = np.asarray(v, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("entropy of an empty vector")
    x = x - x.max()
    e = np.exp(x)
    z = e.sum()
    p = e / z
    nz = p > 0
    # log p computed from the shifted logits avoids log(0) and keeps precision
    logp = (x[nz] - math.log(z)) / math.log(2.0)
    s = float(-(p[nz] * logp).sum())
    return min(max(s, 0.0), math.log2(x.size)) + 0.0  # no negative zero


@dataclass(frozen=True)
class GateConfig:
    threshold: float = math.inf
    source: str = HIDDEN
    enabled: bool = True

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError("gate threshold must be >= 0")
        if self.source not in (HIDDEN, LOGITS):
            raise ValueError(f"unknown gate source {self.source!r}")

    @classmethod
    def disabled(cls, source: str = HIDDEN) -> "GateConfig":
        return cls(math.inf, source, False)


@dataclass(frozen=True)
class GateDecision:
    entropy: float
    route: str


def route_for(entropy_bits: float, cfg: GateConfig) -> str:
    if cfg.enabled and entropy_bits > cfg.threshold:
        return AUTOREGRESSIVE
    return PARALLEL


def decide(cfg: GateConfig, h_last, logits) -> GateDecision:
    s = entropy(h_last if cfg.source == HIDDEN else logits)
    return GateDecision(s, route_for(s, cfg))


def threshold_grid(K: int, n: int = 32) -> np.ndarray:
    return np.linspace(0.0, math.log2(K), n)


def simulate_schedule(entropies, accepted, threshold: float, parallel_overhead: float = 0.0):
    """Replay a greedy trajectory under a threshold.

    ``entropies[p]`` and ``accepted[p]`` are the gate entropy and the number
    of head tokens a parallel step would accept when the committed prefix
    ends at trajectory position ``p``. Greedy verification is lossless, so
    these do not depend on earlier routing. Returns (tokens, steps, cost).
    """
    n = len(entropies)
    pos = steps = 0
    cost = 0.0
    while pos < n:
        steps += 1
        if entropies[pos] > threshold:
            pos += 1
            cost += 1.0
        else:
            pos += 1 + int(accepted[pos])
            cost += 1.0 + parallel_overhead
    return min(pos, n), steps, cost


def calibrate_threshold(trajectories, K: int, n_grid: int = 32, parallel_overhead: float = 0.0):
    """Grid-search the threshold maximising emitted tokens per unit step cost.

    ``trajectories`` is a list of (entropies, accepted) pairs, one per prompt.
    With zero overhead the score is tokens-per-forward; ties go to the
    smallest threshold. Returns (best threshold, [(threshold, score), ...]).
    """
    table = []
    for T in threshold_grid(K, n_grid):
        tokens = cost = 0.0
        for ent, acc in trajectories:
            t, _, c = simulate_schedule(ent, acc, T, parallel_overhead)
            tokens += t
            cost += c
        table.append((float(T), tokens / cost if cost else 0.0))
    best = max(table, key=lambda r: (r[1], -r[0]))
    return best[0], table
