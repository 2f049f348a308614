"""
Verifying a candidate tree in one forward pass
==============================================

Heads propose a few tokens for each future offset. Path templates pick which
combinations to check, and the backbone scores all of them at once through
an ancestor-only attention mask.
"""

import numpy as np

from gatedspec.backbone import Backbone, BackboneConfig
from gatedspec.engine import vanilla_greedy
from gatedspec.tree import TemplateSet, build_tree, verify

model = Backbone.init(BackboneConfig(vocab_size=64, d_model=32, n_layers=2, n_attn_heads=4, max_context=64, d_ff=64),
                      seed=0)
prompt = [3, 14, 15, 9, 26]

###############################################################################
# Templates are rank paths: ``(0, 1)`` means "head 0's best token, then head 1's
# second best". The set must be prefix-closed so every node has its parent.

templates = TemplateSet(((0,), (1,), (0, 0), (0, 1), (1, 0)))
print("templates:", templates.templates)

###############################################################################
# Fake the heads with the true greedy continuation at rank 0 and junk at rank 1.

greedy = vanilla_greedy(model, prompt, 4)
topk = np.array([[greedy[1], 63], [greedy[2], 62]])
tree = build_tree(templates, topk)
print("tree tokens:", tree.tokens.tolist(), "parents:", tree.parents.tolist())
print("attention mask over the tree (rows attend to columns):")
print(tree.attention_mask(prefix_len=0).astype(int))

###############################################################################
# One forward checks every node. The walk accepts the rank-0 path, and the
# backbone's own prediction after it comes free as the bonus token.

cache = model.new_cache()
model.forward(prompt, cache)
res = verify(tree, model, cache, anchor=greedy[0])
print("accepted:", res.accepted, "bonus:", res.bonus)
print("matches greedy:", [greedy[0]] + res.accepted + [res.bonus] == greedy[:4])
