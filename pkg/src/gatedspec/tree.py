"""Candidate token trees: path templates, tree attention masks and greedy verification.

A path template ``(r_1, ..., r_L)`` means "head 1's r_1-th best token, then
head 2's r_2-th best, ...". A prefix-closed set of templates is a tree with
one node per template. Verification runs the tree through the backbone in
one forward, with each node attending to the committed prefix and its own
ancestors only, then walks greedily from the roots.
"""

from __future__ import annotations

import heapq
import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, KvCache

PathTemplate = tuple[int, ...]

# Tree-path budgets of the reference experiments (k = 10, four heads).
REFERENCE_PATH_COUNTS = (63, 120, 150)


class TemplateError(ValueError):
    pass


def _order_key(t: PathTemplate):
    return (len(t), t)


def full_space_size(n_heads: int, k: int) -> int:
    return sum(k ** j for j in range(1, n_heads + 1))


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[PathTemplate, ...]

    def __post_init__(self):
        ordered = tuple(sorted({tuple(int(r) for r in t) for t in self.templates}, key=_order_key))
        object.__setattr__(self, "templates", ordered)

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    @property
    def path_count(self) -> int:
        return len(self.templates)

    @property
    def node_count(self) -> int:
        return len(distinct_prefixes(self.templates))

    @property
    def depth(self) -> int:
        return max((len(t) for t in self.templates), default=0)

    def is_prefix_closed(self) -> bool:
        have = set(self.templates)
        return all(t[:j] in have for t in self.templates for j in range(1, len(t)))

    def validate(self, n_heads: int | None = None, k: int | None = None) -> "TemplateSet":
        if not self.templates:
            raise TemplateError("template set is empty")
        for t in self.templates:
            if not t or min(t) < 0:
                raise TemplateError(f"invalid template {t}")
            if k is not None and max(t) >= k:
                raise TemplateError(f"template {t} uses a rank >= top_k={k}")
            if n_heads is not None and len(t) > n_heads:
                raise TemplateError(f"template {t} is deeper than {n_heads} heads")
        if not self.is_prefix_closed():
            raise TemplateError("template set is not prefix-closed")
        return self

    @classmethod
    def full(cls, n_heads: int, k: int) -> "TemplateSet":
        ts = [t for L in range(1, n_heads + 1) for t in itertools.product(range(k), repeat=L)]
        return cls(tuple(ts))

    @classmethod
    def load(cls, path) -> "TemplateSet":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise TemplateError(f"{path}: malformed JSON ({exc})") from exc
        if not isinstance(raw, list) or not all(isinstance(t, list) and all(isinstance(r, int) for r in t) for t in raw):
            raise TemplateError(f"{path}: expected a JSON array of integer arrays")
        return cls(tuple(tuple(t) for t in raw)).validate()

    def dump(self) -> str:
        return json.dumps([list(t) for t in self.templates])

    def save(self, path) -> None:
        Path(path).write_text(self.dump() + "\n")


def distinct_prefixes(templates) -> list[PathTemplate]:
    seen = {tuple(t[:j]) for t in templates for j in range(1, len(t) + 1)}
    return sorted(seen, key=_order_key)


# ---------------------------------------------------------------- the tree


@dataclass
class CandidateTree:
    tokens: np.ndarray   # [n]
    heads: np.ndarray    # head index == depth
    ranks: np.ndarray
    parents: np.ndarray  # -1 for roots (parent is the committed context)
    paths: list[PathTemplate] = field(default_factory=list)

    def __len__(self):
        return int(self.tokens.size)

    @property
    def depths(self) -> np.ndarray:
        return self.heads

    def ancestor_matrix(self) -> np.ndarray:
        """[n, n] bool: entry (i, j) is True iff j is i or an ancestor of i."""
        n = len(self)
        anc = np.eye(n, dtype=bool)
        for i in range(n):  # parents precede children
            if self.parents[i] >= 0:
                anc[i] |= anc[self.parents[i]]
        return anc

    def attention_mask(self, prefix_len: int) -> np.ndarray:
        n = len(self)
        mask = np.zeros((n, prefix_len + n), dtype=bool)
        mask[:, :prefix_len] = True
        mask[:, prefix_len:] = self.ancestor_matrix()
        return mask

    def positions(self, prefix_len: int) -> np.ndarray:
        return prefix_len + self.depths

    def root_path(self, i: int) -> list[int]:
        path = []
        while i >= 0:
            path.append(i)
            i = int(self.parents[i])
        return path[::-1]

    def children(self) -> dict[int, list[int]]:
        kids: dict[int, list[int]] = {-1: []}
        for i, p in enumerate(self.parents):
            kids.setdefault(int(p), []).append(i)
        return kids


def build_tree(templates, per_head_topk) -> CandidateTree:
    topk = np.asarray(per_head_topk)
    if topk.ndim != 2:
        raise TemplateError("per_head_topk must be [H, k]")
    H, k = topk.shape
    prefixes = distinct_prefixes(templates)
    index = {}
    tokens, heads, ranks, parents = [], [], [], []
    for t in prefixes:
        depth = len(t) - 1
        if depth >= H:
            raise TemplateError(f"template {t} deeper than {H} heads")
        if t[-1] >= k or t[-1] < 0:
            raise TemplateError(f"rank {t[-1]} outside top-{k}")
        index[t] = len(tokens)
        tokens.append(int(topk[depth, t[-1]]))
        heads.append(depth)
        ranks.append(t[-1])
        parents.append(index[t[:-1]] if depth else -1)
    return CandidateTree(np.array(tokens, dtype=np.int64), np.array(heads, dtype=np.int64),
                         np.array(ranks, dtype=np.int64), np.array(parents, dtype=np.int64), prefixes)


# ------------------------------------------------------------ verification


@dataclass
class VerificationResult:
    accepted: list[int]        # head-proposed tokens that passed, root first
    bonus: int                 # backbone argmax at the deepest accepted position
    accepted_nodes: list[int]
    h_last: np.ndarray         # hidden state at the deepest accepted position
    logits: np.ndarray


def tree_forward_inputs(tree: CandidateTree, anchor: int, past: int):
    """Tokens, positions and mask for one forward of ``anchor`` followed by the tree.

    The anchor (the token being committed this step) sits at slot ``past``
    and attends causally; tree nodes see the prefix, the anchor and their
    ancestors.
    """
    n = len(tree)
    prefix = past + 1
    mask = np.zeros((1 + n, prefix + n), dtype=bool)
    mask[0, :prefix] = True
    mask[1:] = tree.attention_mask(prefix)
    positions = np.concatenate([[past], tree.positions(prefix)])
    tokens = np.concatenate([[anchor], tree.tokens])
    return tokens, positions, mask


def verify(tree: CandidateTree, backbone: Backbone, cache: KvCache, anchor: int) -> VerificationResult:
    """Commit ``anchor`` plus the longest greedily-correct root path of ``tree``.

    One backbone forward. A node is accepted iff its token is the argmax of
    the logits at its parent position (the anchor for roots). The cache ends
    holding the prefix, the anchor and the accepted nodes only.
    """
    past = cache.length
    tokens, positions, mask = tree_forward_inputs(tree, anchor, past)
    out = backbone.forward(tokens, cache, mask=mask, positions=positions)
    kids = tree.children()
    row, cur = 0, -1
    accepted_nodes: list[int] = []
    while True:
        target = int(np.argmax(out.logits[row]))
        nxt = next((c for c in kids.get(cur, ()) if tree.tokens[c] == target), None)
        if nxt is None:
            break
        accepted_nodes.append(nxt)
        cur, row = nxt, 1 + nxt
    cache.compact(past + 1, [past + 1 + i for i in accepted_nodes])
    return VerificationResult(
        accepted=[int(tree.tokens[i]) for i in accepted_nodes],
        bonus=int(np.argmax(out.logits[row])),
        accepted_nodes=accepted_nodes,
        h_last=out.h_last[row],
        logits=out.logits[row],
    )


# -------------------------------------------------------- template choice


def select_templates(budget: int, head_calibration) -> TemplateSet:
    """Pick ``budget`` prefix-closed paths with the highest estimated acceptance.

    ``head_calibration[i, r]`` is how often head i's rank-r candidate was the
    right token. A path's score is the product of its per-head frequencies;
    children never outscore parents, so best-first expansion stays
    prefix-closed. Ties go to the lexicographically smaller rank sequence.
    """
    freq = np.asarray(head_calibration, dtype=np.float64)
    H, k = freq.shape
    if budget < 1:
        raise TemplateError("budget must be >= 1")
    total = full_space_size(H, k)
    if budget > total:
        warnings.warn(f"budget {budget} exceeds the full space of {total} paths; clamping", stacklevel=2)
        budget = total
    frontier = [(-freq[0, r], (r,)) for r in range(k)]
    heapq.heapify(frontier)
    chosen: list[PathTemplate] = []
    while frontier and len(chosen) < budget:
        neg, path = heapq.heappop(frontier)
        chosen.append(path)
        depth = len(path)
        if depth < H:
            for r in range(k):
                heapq.heappush(frontier, (neg * freq[depth, r], path + (r,)))
    return TemplateSet(tuple(chosen)).validate(H, k)
