"""Corpus ingestion, pretrained embeddings, vectorization and splits.

Corpus files are UTF-8 TSV, one example per line::

    id<TAB>label<TAB>space separated tokens[<TAB>context]

Lines starting with ``#`` are comments.  Labels are ``neutral``,
``positive``, ``negative`` (any case) or ``0``/``1``/``2``.  Tokens must
already be segmented; the context column is kept but no model reads it.

Embedding files use the word2vec text format: a ``count dim`` header line
followed by ``word v1 ... vdim`` lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .models import vocab_fingerprint

LABELS = ("neutral", "positive", "negative")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}

EMBEDDING_DIM = 300

# Training conventions of the pretrained vectors the loader expects.  The
# vectors are loaded, never trained here.
WORD2VEC_CONVENTIONS = {
    "window": 5,
    "dynamic_window": True,
    "sub_sampling": 1e-5,
    "min_count": 10,
    "iterations": 5,
    "negative_samples": 5,
}


@dataclass(frozen=True)
class Example:
    id: str
    label: int
    tokens: tuple[str, ...]
    context: str | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ContractError(f"example {self.id}: no tokens")
        if self.label not in (0, 1, 2):
            raise ContractError(f"example {self.id}: label {self.label} not in {{0, 1, 2}}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class LineError:
    lineno: int
    message: str
    line: str

    def __str__(self):
        return f"line {self.lineno}: {self.message}"


def parse_label(raw: str) -> int:
    key = raw.strip().lower()
    if key in LABEL_IDS:
        return LABEL_IDS[key]
    if key in ("0", "1", "2"):
        return int(key)
    raise ParseError(f"unknown label {raw!r}")


def parse_corpus_line(line: str, lineno: int = 0) -> Example:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) < 3:
        raise ParseError(f"expected at least 3 tab-separated fields, got {len(fields)}", lineno)
    if len(fields) > 4:
        raise ParseError(f"expected at most 4 tab-separated fields, got {len(fields)}", lineno)
    ex_id = fields[0].strip()
    if not ex_id:
        raise ParseError("empty id", lineno)
    try:
        label = parse_label(fields[1])
    except ParseError as exc:
        raise ParseError(str(exc), lineno) from None
    tokens = tuple(fields[2].split())
    if not tokens:
        raise ParseError("empty token field", lineno)
    context = fields[3] if len(fields) == 4 else None
    return Example(ex_id, label, tokens, context)


def load_corpus(path, format: str = "tsv") -> tuple[list[Example], list[LineError]]:
    """Parse a corpus file, returning ``(examples, errors)``.

    Malformed lines are reported in ``errors`` and skipped; an unreadable
    file raises ``OSError``.
    """
    if format != "tsv":
        raise ConfigError(f"unsupported corpus format {format!r}")
    examples, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                examples.append(parse_corpus_line(line, lineno))
            except ParseError as exc:
                errors.append(LineError(lineno, str(exc).split(": ", 1)[-1], line.rstrip("\n")))
    return examples, errors


def write_corpus(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fields = [ex.id, LABELS[ex.label], " ".join(ex.tokens)]
            if ex.context is not None:
                fields.append(ex.context)
            fh.write("\t".join(fields) + "\n")


class Vocabulary:
    """Word to id map with id 0 reserved for out-of-vocabulary tokens and padding."""

    OOV = "<oov>"

    def __init__(self, words: Sequence[str] = ()):
        self.words = [self.OOV]
        self.index = {}
        for w in words:
            if w in self.index or w == self.OOV:
                raise ContractError(f"duplicate vocabulary entry {w!r}")
            self.index[w] = len(self.words)
            self.words.append(w)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, 0)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]

    def fingerprint(self, dim: int = EMBEDDING_DIM) -> str:
        return vocab_fingerprint(self.words, dim)


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def load_embeddings(path, dim: int = EMBEDDING_DIM) -> tuple[Vocabulary, EmbeddingTable]:
    """Read word2vec text vectors; row 0 of the result is the all-zero OOV row."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError("header must be 'count dim'", 1)
        try:
            count, file_dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("header must be 'count dim'", 1) from None
        if file_dim != dim:
            raise ConfigError(f"embedding dimension {file_dim} != required {dim}")
        words, rows = [], []
        seen = set()
        n_vectors = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\r\n").split(" ")
            if parts and parts[-1] == "":
                parts.pop()
            if not parts or parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"expected word and {dim} values, got {len(parts) - 1} values", lineno)
            word = parts[0]
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric vector component", lineno) from None
            if not np.isfinite(vec).all():
                raise ParseError("non-finite vector component", lineno)
            n_vectors += 1
            if word in seen or word == Vocabulary.OOV:
                continue
            seen.add(word)
            words.append(word)
            rows.append(vec)
    if n_vectors != count:
        raise ParseError(f"header declares {count} vectors, file has {n_vectors}")
    matrix = np.zeros((len(words) + 1, dim), dtype=np.float64)
    if rows:
        matrix[1:] = np.stack(rows)
    source = {"path": str(path), "count": count, "dim": dim, **WORD2VEC_CONVENTIONS}
    return Vocabulary(words), EmbeddingTable(matrix, source)


def write_embeddings(path, words: Sequence[str], matrix: np.ndarray) -> None:
    """Write vectors in word2vec text format using round-trippable floats."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(words)} {matrix.shape[1]}\n")
        for w, row in zip(words, matrix):
            fh.write(w + " " + " ".join(repr(float(v)) for v in row) + "\n")


def vectorize(examples: Sequence[Example], vocab: Vocabulary, max_len: int):
    """Right-pad/truncate to ``max_len``; returns ``(ids, mask, labels)``."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    n = len(examples)
    ids = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        toks = ex.tokens[:max_len]
        ids[i, : len(toks)] = vocab.ids(toks)
        mask[i, : len(toks)] = True
        labels[i] = ex.label
    return ids, mask, labels


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Example, ...]
    validation: tuple[Example, ...]
    test: tuple[Example, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        a, b = {e.id for e in self.train}, {e.id for e in self.validation}
        c = {e.id for e in self.test}
        if a & b or a & c or b & c:
            raise ContractError("train, validation and test must be disjoint by id")


def split_train_valid(examples: Sequence[Example], seed: int = 0, ratio: float = 0.8, test: Sequence[Example] = ()) -> DatasetSplit:
    """Seeded shuffle, then the first ``floor(ratio * N)`` examples train."""
    n = len(examples)
    if n < 5:
        raise ContractError(f"need at least 5 examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = math.floor(ratio * n)
    shuffled = [examples[i] for i in order]
    return DatasetSplit(tuple(shuffled[:cut]), tuple(shuffled[cut:]), tuple(test), seed)


def overlap_key(ex: Example) -> str:
    return " ".join(" ".join(ex.tokens).split())


def dedupe_overlap(train: Iterable[Example], test: Sequence[Example]) -> tuple[list[Example], list[Example]]:
    """Drop test examples whose sentence also occurs in ``train``.

    Returns ``(kept, removed)``.
    """
    seen = {overlap_key(ex) for ex in train}
    kept, removed = [], []
    for ex in test:
        (removed if overlap_key(ex) in seen else kept).append(ex)
    return kept, removed
