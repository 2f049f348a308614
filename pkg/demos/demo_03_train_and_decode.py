"""
Training heads on a frozen toy model and decoding with them
===========================================================

A small byte-level model learns the synthetic corpus, then two head stacks
(independent and tapped) are trained on top of it. Decoding stays identical
to plain greedy decoding while emitting several tokens per forward pass.

Takes a couple of minutes on one core.
"""

import logging

from gatedspec import data, gate, trainer
from gatedspec.backbone import BackboneConfig
from gatedspec.engine import DecodeSession, decode, vanilla_greedy
from gatedspec.heads import CERBERUS, MEDUSA, HeadConfig
from gatedspec.tree import select_templates

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = data.corpus_from_bytes(data.toy_corpus(100_000).encode(), 0.1)
cfg = BackboneConfig(d_model=48, n_layers=2, n_attn_heads=4, max_context=256, d_ff=192)
model, res = trainer.train_backbone(corpus, cfg, trainer.TrainConfig(lr=3e-3, steps=300, seq_len=96, warmup=30))
print(f"backbone eval loss {res.init_eval_loss:.2f} -> {res.final_eval_loss:.2f}")

prompt = data.encode("the river")
reference = vanilla_greedy(model, prompt, 48)
print("greedy:", repr(data.decode_text(reference)))

for paradigm in (MEDUSA, CERBERUS):
    heads, hres = trainer.train_heads(model, HeadConfig(paradigm, n_heads=3, resblocks_per_head=2), corpus,
                                      trainer.TrainConfig(lr=3e-3, steps=200, seq_len=64, warmup=20))
    table = trainer.eval_head_topk(heads, model, corpus.eval, 10, seq_len=64)
    templates = select_templates(40, trainer.rank_frequencies(table))
    tokens, traces = decode(DecodeSession(model, heads, gate.GateConfig.disabled(), templates, 48), prompt)
    print(f"{paradigm}: head loss {hres.final_eval_loss:.2f}, top-1 per head {table[:, 0].round(3).tolist()}, "
          f"tokens/forward {len(tokens) / len(traces):.2f}, identical to greedy: {tokens == reference}")
