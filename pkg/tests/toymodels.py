"""The trained toy model used by the acceptance suite.

Training takes several minutes on one core, so the checkpoints live in
``tests/fixtures/toy`` together with a manifest of the settings that
produced them. When the settings change (or the files are missing) the
models are retrained and the fixture is rewritten.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from gatedspec import data, trainer
from gatedspec.backbone import Backbone, BackboneConfig
from gatedspec.heads import CERBERUS, MEDUSA, HeadConfig, HeadStack

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "toy"

CORPUS_BYTES = 300_000
EVAL_FRACTION = 0.1
BACKBONE = BackboneConfig(vocab_size=256, d_model=64, n_layers=2, n_attn_heads=4, max_context=512, d_ff=256)
BACKBONE_TRAIN = trainer.TrainConfig(lr=3e-3, steps=800, seq_len=128, warmup=50)
HEAD_TRAIN = trainer.TrainConfig(lr=3e-3, steps=1500, seq_len=64, warmup=50)
TOPK_EVAL = {"k": 10, "seq_len": 64, "max_windows": 200}


def head_config(paradigm: str) -> HeadConfig:
    return HeadConfig(paradigm=paradigm, n_heads=4, resblocks_per_head=4, special_position=1, top_k=10)


def settings_digest() -> str:
    spec = {
        "corpus": [CORPUS_BYTES, EVAL_FRACTION],
        "backbone": asdict(BACKBONE),
        "backbone_train": asdict(BACKBONE_TRAIN),
        "head_train": asdict(HEAD_TRAIN),
        "heads": {p: asdict(head_config(p)) for p in (MEDUSA, CERBERUS)},
        "topk": TOPK_EVAL,
    }
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def corpus() -> data.Corpus:
    return data.corpus_from_bytes(data.toy_corpus(CORPUS_BYTES).encode(), EVAL_FRACTION)


def _fresh(directory: Path) -> bool:
    manifest = directory / "manifest.json"
    if not manifest.exists():
        return False
    files = ["backbone.crbs", f"{MEDUSA}.crbs", f"{CERBERUS}.crbs"]
    return (json.loads(manifest.read_text()).get("settings") == settings_digest()
            and all((directory / f).exists() for f in files))


def build(directory: Path = FIXTURE_DIR) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    c = corpus()
    bb, bres = trainer.train_backbone(c, BACKBONE, BACKBONE_TRAIN, path=directory / "backbone.crbs")
    summary = {"settings": settings_digest(), "corpus_sha256": c.sha256, "backbone_digest": bb.weights_digest(),
               "backbone_eval_loss": [bres.init_eval_loss, bres.final_eval_loss]}
    for par in (MEDUSA, CERBERUS):
        stack, hres = trainer.train_heads(bb, head_config(par), c, HEAD_TRAIN)
        table = trainer.eval_head_topk(stack, bb, c.eval, **TOPK_EVAL)
        stack.save(directory / f"{par}.crbs", {"backbone_digest": bb.weights_digest(), "topk_table": table.tolist()})
        summary[f"{par}_eval_loss"] = [hres.init_eval_loss, hres.final_eval_loss]
    (directory / "manifest.json").write_text(json.dumps(summary, indent=2))


def load(directory: Path = FIXTURE_DIR):
    """(backbone, {paradigm: (heads, metadata)}), training first if the fixture is stale."""
    if not _fresh(directory):
        build(directory)
    bb = Backbone.load(directory / "backbone.crbs")
    bb.freeze()
    heads = {p: HeadStack.load(directory / f"{p}.crbs") for p in (MEDUSA, CERBERUS)}
    return bb, heads


if __name__ == "__main__":
    build()
