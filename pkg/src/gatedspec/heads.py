"""Decoding heads: independent (Medusa) and sequentially tapped (Cerberus) paradigms.

Head ``i`` predicts the token ``i + 2`` positions ahead of the hidden state it
reads; the LM head covers offset +1. Each head is ``R`` residual blocks
followed by a vocabulary projection. In the Cerberus paradigm, head ``i >= 1``
replaces its block at depth ``s`` with a special block that also reads head
``i - 1``'s depth ``s - 1`` output. All taps point one depth back, so the stack
still runs as ``R`` depth-synchronous waves.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as tn
from .tensor import Tensor

MEDUSA = "medusa"
CERBERUS = "cerberus"
PARADIGMS = (MEDUSA, CERBERUS)
VARIANTS = ("outer", "canonical")


@dataclass(frozen=True)
class HeadConfig:
    paradigm: str = CERBERUS
    n_heads: int = 4
    resblocks_per_head: int = 4
    special_position: int = 1
    top_k: int = 10
    resblock_variant: str = "outer"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.resblock_variant not in VARIANTS:
            raise ValueError(f"unknown resblock variant {self.resblock_variant!r}")
        if self.n_heads < 1 or self.resblocks_per_head < 1 or self.top_k < 1:
            raise ValueError("n_heads, resblocks_per_head and top_k must be >= 1")
        if self.paradigm == CERBERUS:
            s, R = self.special_position, self.resblocks_per_head
            # s == 0 only for single-block heads, where the tap is the shared input.
            if not (1 <= s < R or (R == 1 and s == 0)):
                raise ValueError(f"special_position must satisfy 1 <= s < R (got s={s}, R={R})")

    @classmethod
    def for_blocks(cls, paradigm: str, n_heads: int, resblocks: int, **kw) -> "HeadConfig":
        s = kw.pop("special_position", 1)
        return cls(paradigm, n_heads, resblocks, min(s, resblocks - 1), **kw)

    def is_special(self, head: int, depth: int) -> bool:
        return self.paradigm == CERBERUS and head >= 1 and depth == self.special_position


# -------------------------------------------------------------------- blocks


def resblock_forward(W: Tensor, b: Tensor, h: Tensor, variant: str = "outer") -> Tensor:
    """``silu(h W + b + h)``; the canonical variant is ``h + silu(h W + b)``."""
    z = tn.matmul(h, W) + b
    if variant == "outer":
        return tn.silu(z + h)
    return h + tn.silu(z)


def special_resblock_forward(W: Tensor, b: Tensor, down: Tensor, h_i: Tensor, h_prev: Tensor,
                             variant: str = "outer") -> Tensor:
    """Residual block over ``concat(h_i, h_prev)`` (width 2d), projected back to d."""
    if h_i.shape[-1] != h_prev.shape[-1]:
        raise ValueError("special resblock inputs must share a width")
    h = tn.concat([h_i, h_prev], axis=-1)
    return tn.matmul(resblock_forward(W, b, h, variant), down)


# ---------------------------------------------------------------- head stack


class HeadStack:
    def __init__(self, config: HeadConfig, d_model: int, vocab_size: int, params: dict[str, Tensor]):
        self.config = config
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.params = params

    @classmethod
    def init(cls, config: HeadConfig, lm_head_W: np.ndarray, lm_head_b: np.ndarray,
             seed: int | None = None, scale: float = 0.0) -> "HeadStack":
        """Zero residual blocks and LM-head copies for every FC.

        With ``scale > 0`` block weights are drawn from N(0, scale) instead
        (used by tests that need generic weights).
        """
        d, V = lm_head_W.shape
        rng = tn.make_rng(0 if seed is None else seed)

        def w(shape):
            if scale:
                return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
            return Tensor(np.zeros(shape), requires_grad=True)

        params = {}
        for i in range(config.n_heads):
            for j in range(config.resblocks_per_head):
                pre = f"head.{i}.block.{j}."
                width = 2 * d if config.is_special(i, j) else d
                params[pre + "W"] = w((width, width))
                params[pre + "b"] = w((width,))
                if config.is_special(i, j):
                    down = np.vstack([np.eye(d), np.zeros((d, d))])
                    if scale:
                        down = down + rng.normal(0.0, scale, size=down.shape)
                    params[pre + "down"] = Tensor(down, requires_grad=True)
            params[f"head.{i}.fc.W"] = Tensor(np.array(lm_head_W, copy=True), requires_grad=True)
            params[f"head.{i}.fc.b"] = Tensor(np.array(lm_head_b, copy=True), requires_grad=True)
        return cls(config, d, V, params)

    @classmethod
    def random(cls, config: HeadConfig, d_model: int, vocab_size: int, seed: int = 0,
               scale: float = 0.3) -> "HeadStack":
        rng = tn.make_rng(seed + 10_000)
        W = rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, vocab_size))
        return cls.init(config, W, np.zeros(vocab_size), seed=seed, scale=scale)

    # ------------------------------------------------------------ structure

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def block_params(self, head: int, depth: int) -> list[Tensor]:
        pre = f"head.{head}.block.{depth}."
        return [self.params[k] for k in sorted(self.params) if k.startswith(pre)]

    def run_block(self, head: int, depth: int, own: Tensor, tap: Tensor | None = None) -> Tensor:
        pre = f"head.{head}.block.{depth}."
        p = self.params
        variant = self.config.resblock_variant
        if self.config.is_special(head, depth):
            return special_resblock_forward(p[pre + "W"], p[pre + "b"], p[pre + "down"], own, tap, variant)
        return resblock_forward(p[pre + "W"], p[pre + "b"], own, variant)

    def run_fc(self, head: int, h: Tensor) -> Tensor:
        return tn.matmul(h, self.params[f"head.{head}.fc.W"]) + self.params[f"head.{head}.fc.b"]

    # -------------------------------------------------------------- forward

    def forward_sequential(self, h_last) -> list[Tensor]:
        """Head-by-head evaluation; the reference order for the wavefront plan."""
        h_last = h_last if isinstance(h_last, Tensor) else Tensor(h_last)
        cfg = self.config
        s = cfg.special_position
        outs: dict[tuple[int, int], Tensor] = {}
        logits = []
        for i in range(cfg.n_heads):
            h = h_last
            for j in range(cfg.resblocks_per_head):
                tap = None
                if cfg.is_special(i, j):
                    tap = outs[(i - 1, s - 1)] if s >= 1 else h_last
                h = outs[(i, j)] = self.run_block(i, j, h, tap)
            logits.append(self.run_fc(i, h))
        return logits

    def forward(self, h_last, workers: int = 1) -> list[Tensor]:
        if self.config.paradigm == CERBERUS:
            return wavefront_schedule(self).execute(self, h_last, workers=workers)
        return self.forward_sequential(h_last)

    def logits(self, h_last: np.ndarray) -> np.ndarray:
        """Per-head logits [H, V] for a single hidden vector."""
        with tn.no_grad():
            return np.stack([t.data for t in self.forward(Tensor(h_last))])

    def topk(self, h_last: np.ndarray, k: int | None = None) -> np.ndarray:
        """Per-head candidate tokens [H, k], best first (ties broken by lower token id)."""
        k = self.config.top_k if k is None else k
        lg = self.logits(h_last)
        return np.argsort(-lg, axis=-1, kind="stable")[:, :k]

    @property
    def block_executions(self) -> int:
        return self.config.n_heads * self.config.resblocks_per_head

    # ---------------------------------------------------------- persistence

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "heads", "config": asdict(self.config), "d_model": self.d_model,
                "vocab_size": self.vocab_size}
        meta.update(extra or {})
        checkpoint.save(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> tuple["HeadStack", dict]:
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "heads":
            raise checkpoint.CheckpointError(f"{path}: not a heads checkpoint")
        stack = cls(HeadConfig(**meta["config"]), meta["d_model"], meta["vocab_size"],
                    {k: Tensor(v) for k, v in tensors.items()})
        return stack, meta


def head_stack_forward(stack: HeadStack, h_last: np.ndarray) -> np.ndarray:
    return stack.logits(h_last)


def parameter_delta(d: int, n_heads: int) -> int:
    """Extra parameters of a Cerberus stack over a Medusa stack of the same shape."""
    special = (2 * d) ** 2 + 2 * d + 2 * d * d
    plain = d * d + d
    return (n_heads - 1) * (special - plain)


# ----------------------------------------------------------------- wavefront


@dataclass(frozen=True)
class BlockTask:
    head: int
    depth: int
    deps: tuple[tuple[int, int], ...]


@dataclass
class WavefrontPlan:
    steps: list[list[BlockTask]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def validate(self) -> None:
        done: set[tuple[int, int]] = set()
        for t, step in enumerate(self.steps):
            for task in step:
                if task.depth != t:
                    raise ValueError(f"task {task} scheduled at step {t}")
                for dep in task.deps:
                    if dep not in done or dep[1] >= task.depth:
                        raise ValueError(f"task {task} depends forward on {dep}")
            done.update((task.head, task.depth) for task in step)

    def execute(self, stack: HeadStack, h_last, workers: int = 1) -> list[Tensor]:
        h_last = h_last if isinstance(h_last, Tensor) else Tensor(h_last)
        outs: dict[tuple[int, int], Tensor] = {}
        mode = tn.current_mode()  # workers inherit no_grad/precision from the caller

        def run(task: BlockTask) -> Tensor:
            own = outs[(task.head, task.depth - 1)] if task.depth else h_last
            tap = None
            if stack.config.is_special(task.head, task.depth):
                tap = outs[task.deps[-1]] if task.depth else h_last
            with tn.use_mode(mode):
                return stack.run_block(task.head, task.depth, own, tap)

        pool = ThreadPoolExecutor(workers) if workers > 1 else None
        try:
            for step in self.steps:
                results = list(pool.map(run, step)) if pool else [run(t) for t in step]
                for task, res in zip(step, results):  # barrier between depths
                    outs[(task.head, task.depth)] = res
        finally:
            if pool:
                pool.shutdown()
        R = stack.config.resblocks_per_head
        return [stack.run_fc(i, outs[(i, R - 1)]) for i in range(stack.config.n_heads)]


def wavefront_schedule(stack_or_config) -> WavefrontPlan:
    cfg = stack_or_config.config if isinstance(stack_or_config, HeadStack) else stack_or_config
    s = cfg.special_position
    plan = WavefrontPlan()
    for j in range(cfg.resblocks_per_head):
        step = []
        for i in range(cfg.n_heads):
            deps = ((i, j - 1),) if j else ()
            if cfg.is_special(i, j) and s >= 1:
                deps = deps + ((i - 1, s - 1),)
            step.append(BlockTask(i, j, deps))
        plan.steps.append(step)
    plan.validate()
    return plan


def dependency_depth(cfg: HeadConfig) -> int:
    """Longest chain of block executions in the head dependency graph."""
    longest: dict[tuple[int, int], int] = {}
    for task in (t for step in wavefront_schedule(cfg).steps for t in step):
        longest[(task.head, task.depth)] = 1 + max((longest[d] for d in task.deps), default=0)
    return max(longest.values())


def serial_depth(cfg: HeadConfig) -> int:
    """Chain length if each head had to wait for the whole previous head."""
    return cfg.n_heads * cfg.resblocks_per_head
