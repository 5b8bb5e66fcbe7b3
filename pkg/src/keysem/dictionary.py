"""Key-semantic dictionary: per-token top-k most similar tokens in a window.

Similarity is the raw dot product between stage-input tokens. Each row of
the dictionary lists neighbor indices by descending similarity, ties broken
by ascending index; a token never lists itself unless ``include_self``.
The dictionary is built once per stage and reused by every layer.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .patching import TokenSet, WindowSet
from .tensor_core import Matrix, matmul

_local = threading.local()


class ConstructionCounter:
    def __init__(self):
        self.events = 0


@contextmanager
def count_constructions():
    """Count dictionary constructions made on this thread inside the block."""
    prev = getattr(_local, "counter", None)
    c = ConstructionCounter()
    _local.counter = c
    try:
        yield c
    finally:
        _local.counter = prev


@dataclass(frozen=True)
class SimilarityMatrix:
    values: Matrix

    @property
    def N(self) -> int:
        return self.values.rows


@dataclass(frozen=True)
class KeySemanticDictionary:
    neighbors: np.ndarray  # (N, k) int
    include_self: bool = False

    def __post_init__(self):
        nb = np.array(self.neighbors, dtype=np.intp)
        if nb.ndim != 2:
            raise ValueError(f"neighbor table must be 2-D, got shape {nb.shape}")
        nb.flags.writeable = False
        object.__setattr__(self, "neighbors", nb)

    @property
    def N(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.neighbors[i]

    def allowed_mask(self) -> np.ndarray:
        """Boolean ``N x N`` matrix, True where token i may attend to j."""
        m = np.zeros((self.N, self.N), dtype=bool)
        m[np.arange(self.N)[:, None], self.neighbors] = True
        return m

    def permuted(self, perm) -> "KeySemanticDictionary":
        """Dictionary of the permuted token set ``tokens[perm]``: rows are
        reordered and stored indices remapped; in-row order is kept."""
        perm = np.asarray(perm, dtype=np.intp)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return KeySemanticDictionary(inv[self.neighbors[perm]], self.include_self)

    def dumps(self) -> str:
        return "".join(f"{i}: {' '.join(map(str, row))}\n"
                       for i, row in enumerate(self.neighbors.tolist()))

    @classmethod
    def loads(cls, text: str, include_self: bool = False) -> "KeySemanticDictionary":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            head, _, rest = line.partition(":")
            if int(head) != len(rows):
                raise ValueError(f"line {lineno}: expected token {len(rows)}, got {head}")
            rows.append([int(t) for t in rest.split()])
        return cls(np.array(rows, dtype=np.intp), include_self)


def similarity(tokens, cosine: bool = False) -> SimilarityMatrix:
    t = tokens.tokens if isinstance(tokens, TokenSet) else tokens
    if t.rows < 2:
        raise ValueError(f"similarity needs at least 2 tokens, got {t.rows}")
    if cosine:
        norms = np.sqrt((t.data ** 2).sum(axis=1, keepdims=True))
        t = Matrix.wrap(t.data / np.where(norms > 0, norms, 1.0))
    # Fixed-order products make sim[i, j] and sim[j, i] identical bit for bit.
    return SimilarityMatrix(matmul(t, t.T))


def knn_select(sim: SimilarityMatrix, k: int, include_self: bool = False) -> KeySemanticDictionary:
    N = sim.N
    hi = N if include_self else N - 1
    if not 1 <= k <= hi:
        raise ValueError(f"k={k} out of range [1, {hi}] for N={N} (include_self={include_self})")
    v = np.array(sim.values.data)
    if not include_self:
        np.fill_diagonal(v, -np.inf)
    # stable sort on negated values: descending similarity, ascending index on ties
    order = np.argsort(-v, axis=1, kind="stable")[:, :k]
    return KeySemanticDictionary(order, include_self)


def build_dictionary(tokens, k: int, include_self: bool = False,
                     cosine: bool = False) -> KeySemanticDictionary:
    c = getattr(_local, "counter", None)
    if c is not None:
        c.events += 1
    return knn_select(similarity(tokens, cosine=cosine), k, include_self)


def dictionary_for_stage(ws: WindowSet, k: int, include_self: bool = False,
                         cosine: bool = False) -> list[KeySemanticDictionary]:
    """One dictionary per window, from the raw stage-input tokens."""
    n = ws.tokens_per_window
    hi = n if include_self else n - 1
    if not 1 <= k <= hi:
        raise ValueError(f"k={k} out of range [1, {hi}] for windows of {n} tokens")
    return [build_dictionary(w, k, include_self, cosine) for w in ws.windows]
