"""Generated corpora for sanity checks and the order-sensitivity experiment."""

from __future__ import annotations

import numpy as np

from .data import EMBEDDING_DIM, EmbeddingTable, Example, Vocabulary

MARKER = "mk"
PIVOT = "pv"


def filler_words(n: int = 40) -> list[str]:
    return [f"w{i:02d}" for i in range(n)]


def random_embeddings(words, dim: int = EMBEDDING_DIM, seed: int = 0, scale: float = 0.5) -> tuple[Vocabulary, EmbeddingTable]:
    """Gaussian vectors for ``words`` with the zero OOV row prepended."""
    vocab = Vocabulary(words)
    rng = np.random.default_rng(seed)
    matrix = np.zeros((len(vocab), dim))
    matrix[1:] = rng.normal(0.0, scale, size=(len(vocab) - 1, dim))
    return vocab, EmbeddingTable(matrix, {"source": "synthetic", "seed": seed})


def separable_corpus(n: int = 60, seed: int = 0, n_filler: int = 20, length=(4, 8)) -> list[Example]:
    """Each class owns a keyword; the rest of the sentence is shared filler."""
    rng = np.random.default_rng(seed)
    fillers = filler_words(n_filler)
    keywords = ("kw_neutral", "kw_positive", "kw_negative")
    out = []
    for i in range(n):
        label = i % 3
        L = int(rng.integers(length[0], length[1] + 1))
        toks = list(rng.choice(fillers, size=L - 1))
        toks.insert(int(rng.integers(0, L)), keywords[label])
        out.append(Example(f"s{i}", label, tuple(toks)))
    return out


def order_corpus(n: int, seed: int = 0, n_filler: int = 40, length=(6, 12), prefix: str = "o") -> list[Example]:
    """Labels that depend only on token order.

    Every sentence holds the marker and the pivot once plus filler words, so
    all classes share the same bag of words.  Class 1: marker immediately
    before the pivot.  Class 2: marker immediately after the pivot.  Class 0:
    the two are separated by at least one filler word.
    """
    rng = np.random.default_rng(seed)
    fillers = filler_words(n_filler)
    out = []
    for i in range(n):
        label = int(rng.integers(0, 3))
        L = int(rng.integers(length[0], length[1] + 1))
        toks = list(rng.choice(fillers, size=L - 2))
        if label == 0:
            a, b = sorted(rng.choice(L, size=2, replace=False))
            while b - a < 2:
                a, b = sorted(rng.choice(L, size=2, replace=False))
            first, second = (MARKER, PIVOT) if rng.random() < 0.5 else (PIVOT, MARKER)
            toks.insert(a, first)
            toks.insert(b, second)
        else:
            pos = int(rng.integers(0, L - 1))
            pair = [MARKER, PIVOT] if label == 1 else [PIVOT, MARKER]
            toks[pos:pos] = pair
        out.append(Example(f"{prefix}{i}", label, tuple(toks)))
    return out


def order_vocabulary(n_filler: int = 40, seed: int = 0):
    return random_embeddings(filler_words(n_filler) + [MARKER, PIVOT], seed=seed)
