"""Toy backbone pretraining and frozen-backbone decoding-head training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .backbone import Backbone, BackboneConfig
from .data import Corpus, DataError
from .heads import HeadConfig, HeadStack
from .tensor import Tensor

log = logging.getLogger(__name__)

HEAD_LR = 4e-4  # head-training learning rate of the reference setup


@dataclass
class TrainConfig:
    lr: float = HEAD_LR
    batch_size: int = 16
    steps: int = 1000
    seq_len: int = 128
    warmup: int = 100
    min_lr_ratio: float = 0.1
    loss_weights: list[float] | None = None  # per head; default 0.8**i
    eval_fraction: float = 0.1
    eval_windows: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.loss_weights is not None and min(self.loss_weights) < 0:
            raise ValueError("loss weights must be non-negative")

    def weights(self, n_heads: int) -> list[float]:
        if self.loss_weights is not None:
            if len(self.loss_weights) != n_heads:
                raise ValueError("need one loss weight per head")
            return list(self.loss_weights)
        return [0.8 ** i for i in range(n_heads)]

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        floor = self.min_lr_ratio
        return self.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainResult:
    init_eval_loss: float
    final_eval_loss: float
    losses: list[float] = field(default_factory=list)


def sample_windows(tokens: np.ndarray, length: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    if len(tokens) < length:
        raise DataError(f"corpus split of {len(tokens)} tokens is smaller than one window ({length})")
    starts = rng.integers(0, len(tokens) - length + 1, size=batch)
    return np.stack([tokens[s:s + length] for s in starts])


def eval_windows(tokens: np.ndarray, length: int, limit: int) -> np.ndarray:
    """Non-overlapping windows from the start of ``tokens`` (deterministic)."""
    n = min(limit, len(tokens) // length)
    if n == 0:
        raise DataError(f"eval split of {len(tokens)} tokens is smaller than one window ({length})")
    return np.stack([tokens[i * length:(i + 1) * length] for i in range(n)])


# ----------------------------------------------------------------- backbone


def lm_loss(model: Backbone, windows: np.ndarray) -> Tensor:
    h = model.hidden(windows[:, :-1])
    return tn.cross_entropy(model.lm_head(h), windows[:, 1:])


def eval_lm_loss(model: Backbone, windows: np.ndarray, batch: int = 16) -> float:
    with tn.no_grad():
        losses = [float(lm_loss(model, windows[i:i + batch]).data) * len(windows[i:i + batch])
                  for i in range(0, len(windows), batch)]
    return sum(losses) / len(windows)


def train_backbone(corpus: Corpus, config: BackboneConfig, train: TrainConfig,
                   path=None) -> tuple[Backbone, TrainResult]:
    seq = min(train.seq_len, config.max_context - 1)
    rng = tn.make_rng(train.seed)
    model = Backbone.init(config, seed=train.seed)
    ev = eval_windows(corpus.eval, seq + 1, train.eval_windows)
    sample_windows(corpus.train, seq + 1, 1, tn.make_rng(0))  # size check before any work
    result = TrainResult(eval_lm_loss(model, ev), math.nan)
    opt = tn.Adam(model.parameters(), lr=train.lr)
    for step in range(train.steps):
        batch = sample_windows(corpus.train, seq + 1, train.batch_size, rng)
        loss = lm_loss(model, batch)
        opt.zero_grad()
        loss.backward()
        opt.step(train.lr_at(step))
        result.losses.append(float(loss.data))
        if step % 100 == 0:
            log.info("backbone step %d loss %.4f", step, result.losses[-1])
    result.final_eval_loss = eval_lm_loss(model, ev)
    model.freeze()
    if path is not None:
        model.save(path)
    return model, result


# -------------------------------------------------------------------- heads


def head_targets(windows: np.ndarray, n_heads: int, n_pos: int) -> list[np.ndarray]:
    """Targets for head i at positions 0..n_pos-1: the token i + 2 ahead."""
    return [windows[:, i + 2:i + 2 + n_pos] for i in range(n_heads)]


def backbone_hidden(backbone: Backbone, windows: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        return backbone.hidden(windows).data


def head_loss(heads: HeadStack, h: np.ndarray, targets: list[np.ndarray], weights) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-head cross-entropies over hidden states ``h`` [B, T, d]."""
    logits = heads.forward_sequential(Tensor(h))
    total = None
    parts = []
    for lg, tgt, w in zip(logits, targets, weights):
        ce = tn.cross_entropy(lg, tgt)
        parts.append(float(ce.data))
        term = tn.scale(ce, w)
        total = term if total is None else total + term
    return total, parts


def _assert_frozen(backbone: Backbone) -> None:
    for name, t in backbone.params.items():
        if t.requires_grad or t.grad is not None:
            raise AssertionError(f"backbone tensor {name} is not frozen")


def train_heads(backbone: Backbone, head_config: HeadConfig, corpus: Corpus, train: TrainConfig,
                path=None) -> tuple[HeadStack, TrainResult]:
    backbone.freeze()
    _assert_frozen(backbone)
    digest = backbone.weights_digest()
    H = head_config.n_heads
    seq = min(train.seq_len, backbone.config.max_context)
    weights = train.weights(H)
    heads = HeadStack.init(head_config, backbone.params["lm_head.W"].data, backbone.params["lm_head.b"].data,
                           seed=train.seed)
    rng = tn.make_rng(train.seed + 1)
    ev = eval_windows(corpus.eval, seq + H + 1, train.eval_windows)
    ev_h = backbone_hidden(backbone, ev[:, :seq])
    ev_t = head_targets(ev, H, seq)

    def evaluate() -> float:
        with tn.no_grad():
            return float(head_loss(heads, ev_h, ev_t, weights)[0].data)

    result = TrainResult(evaluate(), math.nan)
    opt = tn.Adam(heads.parameters(), lr=train.lr)
    for step in range(train.steps):
        batch = sample_windows(corpus.train, seq + H + 1, train.batch_size, rng)
        h = backbone_hidden(backbone, batch[:, :seq])
        loss, _ = head_loss(heads, h, head_targets(batch, H, seq), weights)
        opt.zero_grad()
        loss.backward()
        opt.step(train.lr_at(step))
        result.losses.append(float(loss.data))
        if step % 100 == 0:
            log.info("%s heads step %d loss %.4f", head_config.paradigm, step, result.losses[-1])
    result.final_eval_loss = evaluate()
    _assert_frozen(backbone)
    if backbone.weights_digest() != digest:
        raise AssertionError("backbone weights changed during head training")
    for t in heads.params.values():
        t.grad = None
    if path is not None:
        heads.save(path, {"backbone_digest": digest})
    return heads, result


# ----------------------------------------------------------------- eval


def target_ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Rank of each target under a descending sort with ties broken by lower id."""
    lg = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    tl = lg[np.arange(t.size), t][:, None]
    ids = np.arange(lg.shape[-1])[None, :]
    return ((lg > tl) | ((lg == tl) & (ids < t[:, None]))).sum(axis=1)


def eval_head_topk(heads: HeadStack, backbone: Backbone, tokens: np.ndarray, k: int,
                   seq_len: int = 128, max_windows: int = 32) -> np.ndarray:
    """acc[i, k'-1]: fraction of positions whose token i+2 ahead is in head i's top-k'."""
    H = heads.config.n_heads
    seq = min(seq_len, backbone.config.max_context)
    windows = eval_windows(tokens, seq + H + 1, max_windows)
    h = backbone_hidden(backbone, windows[:, :seq])
    with tn.no_grad():
        logits = [t.data for t in heads.forward_sequential(Tensor(h))]
    table = np.zeros((H, k))
    for i, (lg, tgt) in enumerate(zip(logits, head_targets(windows, H, seq))):
        ranks = target_ranks(lg, tgt)
        table[i] = [(ranks < kk).mean() for kk in range(1, k + 1)]
    return table


def rank_frequencies(topk_table: np.ndarray) -> np.ndarray:
    """Per-head per-rank hit frequencies from a cumulative top-k table."""
    return np.diff(np.concatenate([np.zeros((topk_table.shape[0], 1)), topk_table], axis=1), axis=1)
