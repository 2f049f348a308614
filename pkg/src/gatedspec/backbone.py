"""Decoder-only transformer LM with a KV cache and arbitrary boolean attention masks."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as tn
from .tensor import Tensor


class ContextOverflow(RuntimeError):
    """Raised when a forward would exceed ``max_context``."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_attn_heads: int = 4
    max_context: int = 512
    d_ff: int = 512

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_attn_heads, self.max_context, self.d_ff) < 1:
            raise ValueError("all backbone dimensions must be positive")
        if self.d_model % self.n_attn_heads:
            raise ValueError("d_model must be divisible by n_attn_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_attn_heads

    def supports_tree(self, tree_size: int) -> bool:
        return self.max_context >= 2 * (1 + tree_size)


@dataclass
class ForwardOutput:
    h_last: np.ndarray  # [T, d]
    logits: np.ndarray  # [T, V]


class KvCache:
    """Per-layer key/value storage for one decoding session.

    Slots ``[0, length)`` are committed. A forward writes its new positions
    right after and advances ``length``; callers roll back or compact.
    """

    def __init__(self, config: BackboneConfig):
        shape = (config.n_layers, config.n_attn_heads, config.max_context, config.head_dim)
        self.keys = np.zeros(shape, dtype=np.float32)
        self.values = np.zeros(shape, dtype=np.float32)
        self.length = 0
        self.capacity = config.max_context

    def rollback(self, to_length: int) -> None:
        if not 0 <= to_length <= self.length:
            raise ValueError(f"cannot roll back to {to_length} from {self.length}")
        self.length = to_length

    def compact(self, base: int, slots) -> None:
        """Keep ``[0, base)`` plus ``slots`` (ascending) moved down to follow it."""
        slots = np.asarray(slots, dtype=np.int64)
        if slots.size:
            self.keys[:, :, base:base + slots.size] = self.keys[:, :, slots]
            self.values[:, :, base:base + slots.size] = self.values[:, :, slots]
        self.length = base + slots.size

    def copy(self) -> "KvCache":
        other = object.__new__(KvCache)
        other.keys = self.keys.copy()
        other.values = self.values.copy()
        other.length = self.length
        other.capacity = self.capacity
        return other


def causal_mask(n_new: int, past: int) -> np.ndarray:
    """Mask of shape [n_new, past + n_new]: each new row sees the past and itself causally."""
    cols = np.arange(past + n_new)
    return cols[None, :] <= (past + np.arange(n_new))[:, None]


class Backbone:
    """Pre-norm transformer with learned positional embeddings.

    ``h_last`` is the final-layernorm output and ``logits = h_last @ lm_head.W + lm_head.b``.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        rng = tn.make_rng(seed)
        d, V, F = config.d_model, config.vocab_size, config.d_ff
        std = 0.02
        proj_std = std / math.sqrt(2 * config.n_layers)

        def normal(shape, s=std):
            return Tensor(rng.normal(0.0, s, size=shape).astype(np.float32), requires_grad=True)

        def const(shape, value):
            return Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True)

        p = {
            "tok_emb": normal((V, d)),
            "pos_emb": normal((config.max_context, d)),
        }
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.g"] = const((d,), 1.0)
            p[pre + "ln1.b"] = const((d,), 0.0)
            p[pre + "attn.Wqkv"] = normal((d, 3 * d))
            p[pre + "attn.bqkv"] = const((3 * d,), 0.0)
            p[pre + "attn.Wo"] = normal((d, d), proj_std)
            p[pre + "attn.bo"] = const((d,), 0.0)
            p[pre + "ln2.g"] = const((d,), 1.0)
            p[pre + "ln2.b"] = const((d,), 0.0)
            p[pre + "ff.W1"] = normal((d, F))
            p[pre + "ff.b1"] = const((F,), 0.0)
            p[pre + "ff.W2"] = normal((F, d), proj_std)
            p[pre + "ff.b2"] = const((d,), 0.0)
        p["ln_f.g"] = const((d,), 1.0)
        p["ln_f.b"] = const((d,), 0.0)
        p["lm_head.W"] = normal((d, V))
        p["lm_head.b"] = const((V,), 0.0)
        return cls(config, p)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        checkpoint.save(
            path,
            {k: v.data for k, v in self.params.items()},
            {"kind": "backbone", "config": asdict(self.config), "digest": self.weights_digest()},
        )

    @classmethod
    def load(cls, path) -> "Backbone":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "backbone":
            raise checkpoint.CheckpointError(f"{path}: not a backbone checkpoint")
        config = BackboneConfig(**meta["config"])
        return cls(config, {k: Tensor(v) for k, v in tensors.items()})

    def new_cache(self) -> KvCache:
        return KvCache(self.config)

    # --------------------------------------------------------------- forward

    def lm_head(self, h: Tensor) -> Tensor:
        return tn.matmul(h, self.params["lm_head.W"]) + self.params["lm_head.b"]

    def _block(self, i: int, x: Tensor, mask: np.ndarray, cache: KvCache | None, past: int) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{i}."
        B, T, d = x.shape
        nh, dh = cfg.n_attn_heads, cfg.head_dim

        h = tn.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = tn.matmul(h, p[pre + "attn.Wqkv"]) + p[pre + "attn.bqkv"]
        qkv = tn.transpose(tn.reshape(qkv, (B, T, 3, nh, dh)), (2, 0, 3, 1, 4))  # 3,B,nh,T,dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is not None:
            cache.keys[i, :, past:past + T] = k.data[0]
            cache.values[i, :, past:past + T] = v.data[0]
            k = Tensor(cache.keys[i, :, :past + T][None])
            v = Tensor(cache.values[i, :, :past + T][None])
        scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = tn.softmax(scores, mask=mask[None, None])
        y = tn.matmul(att, v)  # B,nh,T,dh
        y = tn.reshape(tn.transpose(y, (0, 2, 1, 3)), (B, T, d))
        x = x + (tn.matmul(y, p[pre + "attn.Wo"]) + p[pre + "attn.bo"])

        h = tn.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = tn.silu(tn.matmul(h, p[pre + "ff.W1"]) + p[pre + "ff.b1"])
        return x + (tn.matmul(h, p[pre + "ff.W2"]) + p[pre + "ff.b2"])

    def hidden(self, tokens, positions=None, mask=None, cache: KvCache | None = None) -> Tensor:
        """Final-layer (post-norm) hidden states for ``tokens`` of shape [B, T].

        With ``cache`` (B must be 1) the new positions are appended after the
        committed slots and ``mask`` has shape [T, L + T].
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        past = 0 if cache is None else cache.length
        if cache is not None and B != 1:
            raise ValueError("cached forward supports a single sequence")
        if past + T > self.config.max_context:
            raise ContextOverflow(f"context {past + T} exceeds max_context {self.config.max_context}")
        if positions is None:
            positions = np.arange(past, past + T)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.max() >= self.config.max_context:
            raise ContextOverflow("position index exceeds max_context")
        if mask is None:
            mask = causal_mask(T, past)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (T, past + T):
            raise ValueError(f"mask shape {mask.shape} != {(T, past + T)}")
        if not mask[np.arange(T), past + np.arange(T)].all():
            raise ValueError("every new position must attend to itself")

        x = tn.embedding(self.params["tok_emb"], tokens) + tn.embedding(self.params["pos_emb"], positions)
        for i in range(self.config.n_layers):
            x = self._block(i, x, mask, cache, past)
        if cache is not None:
            cache.length = past + T
        return tn.layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"])

    def forward(self, new_tokens, cache: KvCache, mask=None, positions=None) -> ForwardOutput:
        """Inference forward: extends ``cache`` by len(new_tokens) and returns h_last and logits."""
        with tn.no_grad():
            h = self.hidden(np.asarray(new_tokens)[None], positions=positions, mask=mask, cache=cache)
            logits = self.lm_head(h)
        return ForwardOutput(h_last=h.data[0], logits=logits.data[0])

    def logits_full(self, tokens) -> np.ndarray:
        """No-cache causal forward over a whole sequence; returns logits [T, V]."""
        with tn.no_grad():
            h = self.hidden(np.asarray(tokens)[None])
            return self.lm_head(h).data[0]


def rollback(cache: KvCache, to_length: int) -> None:
    cache.rollback(to_length)
