"""Byte-level corpora: tokenization, file I/O, mixture sampling, generators.

Tokens are raw byte values (0..255) plus BOS/EOS specials, so round-tripping
is exact on arbitrary byte strings and no tokenizer artifact is needed. A
corpus is a named list of documents; sampling draws one corpus per sequence
with probability proportional to token_count x mixture_weight, then a
contiguous window from a document chosen proportionally to its length.

The two synthetic generators keep the forgetting experiments self-contained:
"general" produces pseudo-natural word streams from a seeded syllable
vocabulary with Zipf-weighted frequencies; "domain" produces integer
arithmetic lines, whose formats are easy to learn and whose answers are hard
enough that model capacity shows.
"""

from __future__ import annotations

import re
import zlib
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256
BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258  # bytes + BOS + EOS


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent generator for one component, stable across runs.

    The label hashes (crc32) extend the root seed's entropy, so every
    component stream is a pure function of (seed, labels).
    """
    entropy = [int(seed)] + [zlib.crc32(str(l).encode("utf-8")) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def tokenize(text: str | bytes) -> np.ndarray:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= BYTE_VOCAB):
        raise ValueError(
            f"detokenize: id outside byte range [0, {BYTE_VOCAB}): "
            f"min {ids.min()} max {ids.max()}")
    return ids.astype(np.uint8).tobytes()


@dataclass
class Corpus:
    name: str
    documents: list[np.ndarray] = field(default_factory=list)
    mixture_weight: float = 1.0

    def __post_init__(self):
        if self.mixture_weight <= 0:
            raise ValueError(f"corpus {self.name!r}: mixture_weight must be > 0")
        if not self.documents:
            raise ValueError(f"corpus {self.name!r}: no documents")
        self.documents = [np.asarray(d, dtype=np.int64) for d in self.documents]

    @property
    def token_count(self) -> int:
        return int(sum(len(d) for d in self.documents))

    @classmethod
    def from_texts(cls, name: str, texts: list[str],
                   mixture_weight: float = 1.0) -> "Corpus":
        return cls(name, [tokenize(t) for t in texts], mixture_weight)


def load_corpus(path: str | Path, name: str | None = None,
                mixture_weight: float = 1.0) -> Corpus:
    """One document per blank-line-separated block of a UTF-8 text file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    blocks = [b for b in re.split(r"\n\s*\n", text) if b.strip()]
    if not blocks:
        raise ValueError(f"{path}: no documents")
    return Corpus.from_texts(name or path.stem, blocks, mixture_weight)


def save_corpus_text(documents: list[str], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n\n".join(documents) + "\n", encoding="utf-8")
    return path


def selection_probabilities(corpora: list[Corpus]) -> np.ndarray:
    """Per-corpus pick probability: token_count x weight, normalized."""
    raw = np.array([c.token_count * c.mixture_weight for c in corpora], dtype=np.float64)
    return raw / raw.sum()


def mixture_sampler(corpora: list[Corpus], batch_size: int, seq_len: int,
                    seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of (tokens, targets) batches, shapes (batch, seq_len).

    Targets are the next-token shift of the same window, so each draw takes a
    contiguous window of seq_len + 1 tokens from one document.
    """
    if not corpora:
        raise ValueError("mixture_sampler: no corpora")
    if batch_size < 1 or seq_len < 1:
        raise ValueError("mixture_sampler: batch_size and seq_len must be >= 1")
    window = seq_len + 1
    eligible: list[list[np.ndarray]] = []
    doc_probs: list[np.ndarray] = []
    for c in corpora:
        docs = [d for d in c.documents if len(d) >= window]
        if not docs:
            raise ValueError(
                f"corpus {c.name!r}: seq_len {seq_len} is longer than every document")
        lengths = np.array([len(d) for d in docs], dtype=np.float64)
        eligible.append(docs)
        doc_probs.append(lengths / lengths.sum())
    probs = selection_probabilities(corpora)
    rng = derive_rng(seed, "mixture_sampler")

    def batches() -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            tokens = np.empty((batch_size, seq_len), dtype=np.int64)
            targets = np.empty((batch_size, seq_len), dtype=np.int64)
            for row in range(batch_size):
                ci = int(rng.choice(len(corpora), p=probs))
                docs = eligible[ci]
                di = int(rng.choice(len(docs), p=doc_probs[ci]))
                doc = docs[di]
                start = int(rng.integers(0, len(doc) - window + 1))
                chunk = doc[start:start + window]
                tokens[row] = chunk[:-1]
                targets[row] = chunk[1:]
            yield tokens, targets

    return batches()


# ---------------------------------------------------------------------------
# synthetic corpora

_VOWELS = "aeiou"
_CONSONANTS = "bcdfghjklmnpqrstvwz"


def _make_word(rng: np.random.Generator) -> str:
    syllables = int(rng.integers(1, 4))
    parts = []
    for _ in range(syllables):
        c = _CONSONANTS[int(rng.integers(0, len(_CONSONANTS)))]
        v = _VOWELS[int(rng.integers(0, len(_VOWELS)))]
        parts.append(c + v)
        if rng.random() < 0.3:
            parts.append(_CONSONANTS[int(rng.integers(0, len(_CONSONANTS)))])
    return "".join(parts)


def general_documents(total_chars: int, seed: int = 0,
                      vocab_size: int = 160, doc_chars: int = 2000) -> list[str]:
    """Pseudo-natural prose: Zipf-weighted words over a seeded vocabulary."""
    rng = derive_rng(seed, "general_corpus")
    vocab = sorted({_make_word(rng) for _ in range(vocab_size * 2)})[:vocab_size]
    ranks = np.arange(1, len(vocab) + 1, dtype=np.float64)
    probs = (1.0 / ranks) / (1.0 / ranks).sum()
    docs: list[str] = []
    produced = 0
    while produced < total_chars:
        lines: list[str] = []
        chars = 0
        while chars < doc_chars:
            n_words = int(rng.integers(5, 12))
            words = [vocab[int(i)] for i in rng.choice(len(vocab), size=n_words, p=probs)]
            line = " ".join(words)
            lines.append(line)
            chars += len(line) + 1
        doc = "\n".join(lines)
        docs.append(doc)
        produced += len(doc)
    return docs


def domain_documents(total_chars: int, seed: int = 0,
                     doc_lines: int = 60, max_operand: int = 99) -> list[str]:
    """Arithmetic expressions with results, one per line: `a op b = c`."""
    rng = derive_rng(seed, "domain_corpus")
    ops = ("+", "-", "*")
    docs: list[str] = []
    produced = 0
    while produced < total_chars:
        lines = []
        for _ in range(doc_lines):
            a = int(rng.integers(0, max_operand + 1))
            b = int(rng.integers(0, max_operand + 1))
            op = ops[int(rng.integers(0, len(ops)))]
            c = a + b if op == "+" else a - b if op == "-" else a * b
            lines.append(f"{a} {op} {b} = {c}")
        doc = "\n".join(lines)
        docs.append(doc)
        produced += len(doc)
    return docs


def build_general_corpus(total_chars: int, seed: int = 0,
                         mixture_weight: float = 1.0) -> Corpus:
    return Corpus.from_texts("general", general_documents(total_chars, seed),
                             mixture_weight)


def synthetic_suite(seed: int = 0, general_chars: int = 440_000,
                    domain_chars: int = 260_000,
                    eval_fraction: float = 0.1) -> dict[str, Corpus]:
    """Train/eval splits for both synthetic corpora, from single pools.

    Splitting one generated pool keeps the eval documents in-distribution
    (same word vocabulary, same operand ranges) while staying held out.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    suite: dict[str, Corpus] = {}
    for family, texts in (("general", general_documents(general_chars, seed)),
                          ("domain", domain_documents(domain_chars, seed))):
        n_eval = max(1, round(eval_fraction * len(texts)))
        if n_eval >= len(texts):
            raise ValueError(f"{family}: pool too small to hold out {n_eval} "
                             f"of {len(texts)} documents")
        suite[f"{family}_train"] = Corpus.from_texts(
            f"{family}_train", texts[:-n_eval])
        suite[f"{family}_eval"] = Corpus.from_texts(
            f"{family}_eval", texts[-n_eval:])
    return suite


def build_domain_corpus(total_chars: int, seed: int = 0,
                        mixture_weight: float = 1.0) -> Corpus:
    return Corpus.from_texts("domain", domain_documents(total_chars, seed),
                             mixture_weight)
