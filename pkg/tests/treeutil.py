"""Random prefix-closed template sets and the per-path sequential oracle."""

import numpy as np

from gatedspec.tree import TemplateSet, tree_forward_inputs


def random_templates(rng, n_heads: int, k: int, n_nodes: int) -> TemplateSet:
    nodes = {(int(rng.integers(k)),)}
    while len(nodes) < n_nodes:
        if rng.random() < 0.3:
            nodes.add((int(rng.integers(k)),))
            continue
        parent = sorted(nodes)[int(rng.integers(len(nodes)))]
        if len(parent) < n_heads:
            nodes.add(parent + (int(rng.integers(k)),))
    return TemplateSet(tuple(nodes)).validate(n_heads, k)


def tree_logits(backbone, prompt, anchor, tree):
    """Logits rows [anchor, node 0, node 1, ...] from one masked forward."""
    cache = backbone.new_cache()
    backbone.forward(prompt, cache)
    tokens, positions, mask = tree_forward_inputs(tree, anchor, cache.length)
    return backbone.forward(tokens, cache, mask=mask, positions=positions).logits


def max_path_deviation(backbone, prompt, anchor, tree) -> float:
    """max |logit difference| between the tree forward and per-node causal forwards."""
    batched = tree_logits(backbone, prompt, anchor, tree)
    worst = 0.0
    for i in range(len(tree)):
        seq = list(prompt) + [anchor] + [int(tree.tokens[j]) for j in tree.root_path(i)]
        ref = backbone.logits_full(seq)[-1]
        worst = max(worst, float(np.abs(batched[1 + i] - ref).max()))
    return worst
