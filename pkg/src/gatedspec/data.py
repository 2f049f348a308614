"""Byte-level corpus handling, prompt suites and the built-in toy corpus."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng

VOCAB_SIZE = 256


class DataError(ValueError):
    pass


def encode(data) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    return bytes(int(i) for i in ids)


def decode_text(ids) -> str:
    return decode(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    split: int          # tokens[:split] train, tokens[split:] eval
    sha256: str

    @property
    def train(self) -> np.ndarray:
        return self.tokens[:self.split]

    @property
    def eval(self) -> np.ndarray:
        return self.tokens[self.split:]


def corpus_from_bytes(raw: bytes, eval_fraction: float = 0.1) -> Corpus:
    if not raw:
        raise DataError("corpus is empty")
    if not 0.0 <= eval_fraction < 1.0:
        raise DataError("eval_fraction must be in [0, 1)")
    tokens = encode(raw)
    n_eval = int(round(len(tokens) * eval_fraction))
    return Corpus(tokens, len(tokens) - n_eval, hashlib.sha256(raw).hexdigest())


def load_corpus(path, eval_fraction: float = 0.1) -> Corpus:
    """Read a UTF-8 text file; the eval split is the contiguous tail."""
    raw = Path(path).read_bytes()
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc})") from exc
    return corpus_from_bytes(raw, eval_fraction)


# -------------------------------------------------------------- prompt suite


@dataclass(frozen=True)
class PromptSuite:
    categories: dict[str, list[str]]

    def __post_init__(self):
        if not self.categories:
            raise DataError("prompt suite has no categories")
        for name, prompts in self.categories.items():
            if not isinstance(name, str) or not name:
                raise DataError("category names must be non-empty strings")
            if not prompts or not all(isinstance(p, str) for p in prompts):
                raise DataError(f"category {name!r} needs a non-empty list of strings")

    def items(self):
        for cat, prompts in self.categories.items():
            for p in prompts:
                yield cat, p

    def __len__(self):
        return sum(len(p) for p in self.categories.values())


def load_prompt_suite(path) -> PromptSuite:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{path}: expected an object of category -> prompts")
    return PromptSuite({str(k): v for k, v in raw.items()})


# ----------------------------------------------------------- toy corpus


_NAMES = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"]
_CITIES = ["paris", "oslo", "lima", "cairo", "tokyo", "quito", "delhi", "perth"]
_ADJS = ["quiet", "bright", "old", "small", "green", "brave", "cold", "tall"]
_NOUNS = ["river", "garden", "tower", "forest", "house", "bridge", "market", "harbor"]
_VERBS = ["watches", "crosses", "follows", "guards", "paints", "visits"]
_ROLES = ["mayor", "baker", "captain", "teacher", "doctor", "guard"]
_PLANETS = ["mercury", "venus", "earth", "mars", "jupiter", "saturn"]
_FUNCS = ["scale", "shift", "clamp", "total", "count"]
_ARGS = ["x", "n", "value", "items"]

CATEGORIES = ("writing", "roleplay", "extraction", "reasoning", "math", "coding", "stem", "humanities")


def _sentence(cat: str, rng: np.random.Generator) -> str:
    c = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    n = int(rng.integers(2, 60))
    if cat == "writing":
        return f"the {c(_ADJS)} {c(_NOUNS)} {c(_VERBS)} the {c(_ADJS)} {c(_NOUNS)} near {c(_CITIES)}.\n"
    if cat == "roleplay":
        return f'{c(_NAMES)} said: "i am the {c(_ROLES)} of {c(_CITIES)}, and i guard the {c(_NOUNS)}."\n'
    if cat == "extraction":
        return f"name: {c(_NAMES)}; age: {n}; city: {c(_CITIES)}; role: {c(_ROLES)}.\n"
    if cat == "reasoning":
        a, b = c(_NAMES), c(_NAMES)
        return f"if {a} is taller than {b}, then {b} is shorter than {a}.\n"
    if cat == "math":
        a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
        return f"{a} plus {b} equals {a + b}. {b} plus {a} equals {a + b}.\n"
    if cat == "coding":
        f, x = c(_FUNCS), c(_ARGS)
        return f"def {f}({x}):\n    return {x} * {n}\n"
    if cat == "stem":
        return f"the planet {c(_PLANETS)} orbits the sun, and water boils at one hundred degrees.\n"
    return f"in {1500 + n * 7}, the {c(_ADJS)} {c(_NOUNS)} of {c(_CITIES)} was described by {c(_NAMES)}.\n"


def toy_corpus(n_bytes: int = 300_000, seed: int = 0) -> str:
    """Deterministic synthetic text mixing predictable phrases with choice points."""
    rng = make_rng(seed)
    parts, size = [], 0
    while size < n_bytes:
        s = _sentence(CATEGORIES[int(rng.integers(len(CATEGORIES)))], rng)
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


def toy_prompt_suite(per_category: int = 10, seed: int = 1) -> PromptSuite:
    """Eight categories of prompts cut from fresh toy sentences."""
    rng = make_rng(seed)
    cats = {}
    for cat in CATEGORIES:
        prompts = []
        for _ in range(per_category):
            s = _sentence(cat, rng)
            cut = int(rng.integers(4, max(5, len(s) // 2)))
            prompts.append(s[:cut])
        cats[cat] = prompts
    return PromptSuite(cats)
