"""Byte-level corpus handling.

Vocabulary is the 256 byte values plus one document separator (id 256).
Batch slicing is a pure function of (corpus bytes, seed, batch index,
seq_len), so runs are reproducible and resumable by construction.

A deterministic synthetic text generator is included so the lab is
self-contained: template sentences over a small word vocabulary give the
byte model real structure to learn.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import RngStream

SEP_ID = 256
VOCAB_SIZE = 257


@dataclass
class Corpus:
    tokens: np.ndarray  # uint16, values in [0, VOCAB_SIZE)
    source: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint16)
        if self.tokens.size and self.tokens.max() >= VOCAB_SIZE:
            raise ValueError("corpus token out of range")

    def __len__(self):
        return int(self.tokens.size)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Corpus":
        return cls(np.frombuffer(data, dtype=np.uint8).astype(np.uint16), source)

    @classmethod
    def from_file(cls, path) -> "Corpus":
        return cls.from_bytes(Path(path).read_bytes(), str(path))

    @classmethod
    def from_files(cls, paths) -> "Corpus":
        parts = []
        for p in paths:
            parts.append(np.frombuffer(Path(p).read_bytes(), dtype=np.uint8).astype(np.uint16))
            parts.append(np.array([SEP_ID], dtype=np.uint16))
        return cls(np.concatenate(parts[:-1]), ";".join(str(p) for p in paths))

    def batch(self, seed: int, b: int, batch_size: int, seq_len: int):
        """Inputs and next-token targets for batch index b of stream `seed`."""
        n = len(self)
        if n < seq_len + 2:
            raise ValueError(f"corpus of {n} tokens cannot cover seq_len {seq_len}")
        starts = RngStream(seed, f"data/batch{b}").integers(0, n - seq_len, batch_size)
        window = starts[:, None] + np.arange(seq_len + 1)
        chunk = self.tokens[window]
        return chunk[:, :-1].astype(np.int64), chunk[:, 1:].astype(np.int64)


_DET = ["the", "a", "one", "this", "that", "every", "no", "some"]
_ADJ = [
    "quick", "amber", "silent", "brisk", "heavy", "pale", "sharp", "round",
    "narrow", "gentle", "broken", "coarse", "tidy", "plain", "deep", "faint",
]
_NOUN = [
    "otter", "ledger", "harbor", "lantern", "meadow", "signal", "copper", "valley",
    "window", "anchor", "marble", "thicket", "furnace", "ribbon", "saddle", "barrel",
    "needle", "shadow", "tunnel", "basket", "mirror", "timber", "garden", "puzzle",
]
_VERB = [
    "guards", "follows", "carries", "repairs", "measures", "collects", "divides",
    "signals", "observes", "balances", "sketches", "polishes", "records", "shelters",
]
_ADV = ["slowly", "twice", "again", "alone", "nearby", "quietly", "daily", "often"]


def synthesize_text(seed: int, n_chars: int) -> bytes:
    """Deterministic word-template prose of roughly n_chars bytes."""
    rng = RngStream(seed, "synth").generator()
    pieces = []
    total = 0
    while total < n_chars:
        words = [rng.choice(_DET)]
        if rng.random() < 0.6:
            words.append(rng.choice(_ADJ))
        words.append(rng.choice(_NOUN))
        words.append(rng.choice(_VERB))
        words.append(rng.choice(_DET))
        if rng.random() < 0.3:
            words.append(rng.choice(_ADJ))
        words.append(rng.choice(_NOUN))
        if rng.random() < 0.4:
            words.append(rng.choice(_ADV))
        sentence = " ".join(words)
        if rng.random() < 0.1:
            sentence += f" {rng.integers(0, 100)} times"
        end = ".\n" if rng.random() < 0.25 else ". "
        pieces.append(sentence + end)
        total += len(sentence) + 2
    return "".join(pieces)[:n_chars].encode()


def synthetic_corpus(seed: int, n_tokens: int) -> Corpus:
    return Corpus.from_bytes(synthesize_text(seed, n_tokens), f"<synthetic seed={seed}>")


def load_corpus(spec: str, synth_seed: int = 0, synth_tokens: int = 4_000_000) -> Corpus:
    """Resolve a corpus spec: 'synthetic' or a path to a raw byte file."""
    if spec in ("", "synthetic"):
        return synthetic_corpus(synth_seed, synth_tokens)
    return Corpus.from_file(spec)
