"""Per-step decode loop: gate, then either one auto-regressive step or draft-and-verify.

Session state between steps is the cache of committed tokens plus the
hidden state and logits at the last committed position. Every step commits
``argmax(logits)`` first (the LM head's candidate, always correct under
greedy decoding) and runs exactly one backbone forward:

* auto-regressive route: forward that single token;
* parallel route: heads read ``h_last``, their top-k lists form a tree under
  that token, and one masked forward verifies the whole tree.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gate as gating
from .backbone import Backbone, ContextOverflow
from .gate import GateConfig
from .heads import HeadStack
from .tree import TemplateSet, build_tree, verify


@dataclass
class StepTrace:
    entropy: float              # entropy used by the gate
    route: str
    tokens_emitted: int
    accepted: int               # head tokens that passed verification
    forward_passes: int
    head_block_executions: int
    tree_size: int
    wall_time: float
    entropy_hidden: float = 0.0
    entropy_logits: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodeSession:
    backbone: Backbone
    heads: HeadStack | None = None
    gate: GateConfig = field(default_factory=GateConfig)
    templates: TemplateSet | None = None
    max_new_tokens: int = 64
    stop_token: int | None = None
    seed: int = 0
    head_workers: int = 1

    def __post_init__(self):
        self.cache = self.backbone.new_cache()
        self.committed: list[int] = []
        self.emitted: list[int] = []
        self.traces: list[StepTrace] = []
        self.h_last: np.ndarray | None = None
        self.logits: np.ndarray | None = None
        self.finished = False
        self.finish_reason: str | None = None
        if self.heads is not None and self.templates is not None:
            self.templates.validate(self.heads.config.n_heads, self.heads.config.top_k)
            if not self.backbone.config.supports_tree(len(self.templates)):
                raise ValueError(
                    f"max_context {self.backbone.config.max_context} too small for a "
                    f"{len(self.templates)}-node tree")

    @property
    def parallel_capable(self) -> bool:
        return self.heads is not None and self.templates is not None

    def prefill(self, prompt) -> None:
        prompt = [int(t) for t in prompt]
        if not prompt:
            prompt = [BEGIN_TOKEN]
        if len(prompt) >= self.backbone.config.max_context:
            raise ContextOverflow("prompt does not fit the context")
        out = self.backbone.forward(prompt, self.cache)
        self.committed = list(prompt)
        self.h_last, self.logits = out.h_last[-1], out.logits[-1]
        self.finished = self.max_new_tokens <= 0
        if self.finished:
            self.finish_reason = "max_tokens"

    def _emit(self, tokens) -> int:
        """Record newly committed tokens, honouring stop token and budget. Returns count emitted."""
        n = 0
        for t in tokens:
            self.emitted.append(int(t))
            n += 1
            if self.stop_token is not None and t == self.stop_token:
                self.finished, self.finish_reason = True, "stop_token"
                break
            if len(self.emitted) >= self.max_new_tokens:
                self.finished, self.finish_reason = True, "max_tokens"
                break
        return n


BEGIN_TOKEN = ord("\n")


def decode_step(session: DecodeSession) -> StepTrace:
    if session.finished or session.h_last is None:
        raise RuntimeError("session is finished or has not been prefilled")
    t0 = time.perf_counter()
    h_last, logits = session.h_last, session.logits
    s_hidden = gating.entropy(h_last)
    s_logits = gating.entropy(logits)
    s = s_hidden if session.gate.source == gating.HIDDEN else s_logits
    route = gating.route_for(s, session.gate) if session.parallel_capable else gating.AUTOREGRESSIVE
    anchor = int(np.argmax(logits))
    cache = session.cache
    cfg = session.backbone.config

    if route == gating.PARALLEL and cache.length + 1 + len(session.templates) > cfg.max_context:
        route = gating.AUTOREGRESSIVE  # tree would not fit; fall back
    if route == gating.AUTOREGRESSIVE and cache.length + 1 > cfg.max_context:
        session.finished, session.finish_reason = True, "context"
        raise ContextOverflow("context exhausted")

    if route == gating.AUTOREGRESSIVE:
        out = session.backbone.forward([anchor], cache)
        session.h_last, session.logits = out.h_last[-1], out.logits[-1]
        new, accepted, blocks, tree_size = [anchor], 0, 0, 0
    else:
        topk = session.heads.topk(h_last)
        tree = build_tree(session.templates, topk)
        res = verify(tree, session.backbone, cache, anchor)
        session.h_last, session.logits = res.h_last, res.logits
        new = [anchor] + res.accepted
        accepted, blocks, tree_size = len(res.accepted), session.heads.block_executions, len(tree)

    session.committed.extend(new)
    emitted = session._emit(new)
    trace = StepTrace(
        entropy=s, route=route, tokens_emitted=emitted, accepted=min(accepted, emitted - 1),
        forward_passes=1, head_block_executions=blocks, tree_size=tree_size,
        wall_time=time.perf_counter() - t0, entropy_hidden=s_hidden, entropy_logits=s_logits,
    )
    session.traces.append(trace)
    return trace


def decode(session: DecodeSession, prompt) -> tuple[list[int], list[StepTrace]]:
    """Prefill ``prompt`` then step until the stop condition. Returns (emitted tokens, traces)."""
    session.prefill(prompt)
    while not session.finished:
        try:
            decode_step(session)
        except ContextOverflow:
            break
    return list(session.emitted), list(session.traces)


def vanilla_greedy(backbone: Backbone, prompt, max_new_tokens: int, stop_token: int | None = None) -> list[int]:
    """Plain one-token-per-forward greedy decoding; the losslessness oracle."""
    prompt = [int(t) for t in prompt] or [BEGIN_TOKEN]
    cache = backbone.new_cache()
    out = backbone.forward(prompt, cache)
    logits = out.logits[-1]
    emitted: list[int] = []
    while len(emitted) < max_new_tokens and cache.length < backbone.config.max_context:
        tok = int(np.argmax(logits))
        emitted.append(tok)
        if tok == stop_token:
            break
        logits = backbone.forward([tok], cache).logits[-1]
    return emitted


def probe_trajectory(backbone: Backbone, heads: HeadStack, templates: TemplateSet, prompt,
                     max_new_tokens: int) -> dict[str, list]:
    """Gate entropies and parallel-step acceptance at every position of the greedy trajectory.

    Each position is verified with a full tree and then the cache is rolled
    back so the trajectory advances by exactly one token. Greedy verification
    is lossless, so these numbers are what a parallel step would see at that
    position under any routing history.
    """
    prompt = [int(t) for t in prompt] or [BEGIN_TOKEN]
    templates.validate(heads.config.n_heads, heads.config.top_k)
    cache = backbone.new_cache()
    out = backbone.forward(prompt, cache)
    h_last, logits = out.h_last[-1], out.logits[-1]
    rec: dict[str, list] = {"entropy_hidden": [], "entropy_logits": [], "accepted": []}
    limit = backbone.config.max_context
    for _ in range(max_new_tokens):
        L = cache.length
        if L + 1 + len(templates) > limit:
            break
        anchor = int(np.argmax(logits))
        res = verify(build_tree(templates, heads.topk(h_last)), backbone, cache, anchor)
        rec["entropy_hidden"].append(gating.entropy(h_last))
        rec["entropy_logits"].append(gating.entropy(logits))
        rec["accepted"].append(len(res.accepted))
        cache.rollback(L)
        out = backbone.forward([anchor], cache)
        h_last, logits = out.h_last[-1], out.logits[-1]
    return rec
