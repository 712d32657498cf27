"""Text prompts and their embeddings.

Every prompt (a vocabulary term like "girl" or a full sentence like "the
big chinchilla") is encoded independently: the embedding of prompt i never
depends on any other prompt in the set.  Word-level embeddings come from a
deterministic seeded hash codebook, so two processes with the same encoder
slot produce bitwise-identical arrays; the trainable part of text encoding
is a projection owned by the model, not by this module.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

VOCABULARY = "vocabulary"
SENTENCE = "sentence"

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DEFAULT_MAX_TOKENS = 16


@dataclass(frozen=True)
class Prompt:
    """A single text query with a stable integer id."""

    text: str
    kind: str
    id: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("empty prompt")
        if self.kind not in (VOCABULARY, SENTENCE):
            raise ValueError(f"unknown prompt kind: {self.kind!r}")


@dataclass(frozen=True)
class TextEncoderSlot:
    """Identity of a pluggable text encoder.

    Identical (name, seed, d) gives bitwise-identical embeddings for
    identical text; changing the seed swaps in a different "encoder".
    """

    name: str = "hash-v1"
    seed: int = 1234
    d: int = 128


@dataclass
class WordEmbeddings:
    """Per-prompt padded token embeddings, shape (n, l, d)."""

    values: np.ndarray
    lengths: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError("word embeddings must be (n, l, d)")
        n, l, _ = self.values.shape
        if self.lengths.shape != (n,):
            raise ValueError("lengths must have one entry per prompt")
        if n and (self.lengths.min() < 1 or self.lengths.max() > l):
            raise ValueError("token lengths out of range")


@dataclass
class SentenceEmbeddings:
    """One pooled vector per prompt, shape (n, d)."""

    values: np.ndarray
    kinds: tuple = ()

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("sentence embeddings must be (n, d)")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite sentence embedding")


def tokenize(text: str) -> list:
    """Lowercase and split on anything that is not a letter or digit."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise ValueError(f"empty prompt: {text!r}")
    return tokens


@lru_cache(maxsize=65536)
def _token_vector(name: str, seed: int, d: int, token: str) -> np.ndarray:
    # blake2b keyed by (name, seed) -> stable across processes, unlike hash().
    digest = hashlib.blake2b(
        token.encode("utf-8"), key=f"{name}:{seed}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def encode_words(
    prompts, slot: TextEncoderSlot, max_tokens: int = DEFAULT_MAX_TOKENS
) -> WordEmbeddings:
    """Encode each prompt alone; padded tail positions are exactly zero.

    Raises if any prompt tokenizes to more than ``max_tokens`` tokens:
    overflow is a loud error, never silent truncation.
    """
    n = len(prompts)
    values = np.zeros((n, max_tokens, slot.d), dtype=np.float64)
    lengths = np.ones(n, dtype=np.int64)
    for i, prompt in enumerate(prompts):
        tokens = tokenize(prompt.text)
        if len(tokens) > max_tokens:
            raise ValueError(
                f"prompt {prompt.id} ({prompt.text!r}) has {len(tokens)} tokens, "
                f"limit is {max_tokens}"
            )
        for j, token in enumerate(tokens):
            values[i, j] = _token_vector(slot.name, slot.seed, slot.d, token)
        lengths[i] = len(tokens)
    return WordEmbeddings(values=values, lengths=lengths)


def aggregate(we: WordEmbeddings, kinds: tuple = ()) -> SentenceEmbeddings:
    """Pool word vectors to one sentence vector per prompt.

    The mean runs over the true token count of each prompt, not the padded
    length, so short prompts are not dragged toward zero by padding.
    """
    n, _, d = we.values.shape
    out = np.zeros((n, d), dtype=we.values.dtype)
    for i in range(n):
        out[i] = we.values[i, : we.lengths[i]].mean(axis=0)
    return SentenceEmbeddings(values=out, kinds=kinds)


def zero_token(d: int) -> SentenceEmbeddings:
    """The all-zero text row injected for vocabulary-only fusion passes."""
    if d <= 0:
        raise ValueError("embedding width must be positive")
    return SentenceEmbeddings(values=np.zeros((1, d), dtype=np.float64))


def encode_prompts(prompts, slot: TextEncoderSlot, max_tokens: int = DEFAULT_MAX_TOKENS):
    """encode_words + aggregate in one step, keeping per-prompt kinds."""
    we = encode_words(prompts, slot, max_tokens)
    return aggregate(we, kinds=tuple(p.kind for p in prompts))


def make_prompts(texts, kind: str = VOCABULARY, start_id: int = 0) -> list:
    return [Prompt(text=t, kind=kind, id=start_id + i) for i, t in enumerate(texts)]


def load_prompt_file(path) -> list:
    """Read prompts from disk.

    Accepts either a UTF-8 JSON array of {"text", "kind"} objects or plain
    text with one vocabulary term per line.
    """
    raw = Path(path).read_text(encoding="utf-8")
    stripped = raw.lstrip()
    if stripped.startswith("["):
        entries = json.loads(raw)
        prompts = []
        for i, entry in enumerate(entries):
            prompts.append(Prompt(text=entry["text"], kind=entry["kind"], id=i))
        return prompts
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    return make_prompts(lines, kind=VOCABULARY)
