"""Domain types and distance kernels shared by every index and scorer.

Values are validated once, at construction, and are immutable afterwards: arrays are
copied, converted to float64 and flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import (
    Iterable,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .errors import (
    ArityError,
    DegenerateVectorError,
    DimensionError,
    ValidationError,
    WeightError,
)

Numeric = Union[int, float]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _finite_matrix(values, what: str) -> np.ndarray:
    matrix = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise ValidationError(f"{what} contains NaN or Inf")
    return matrix


@dataclass(frozen=True, eq=False)
class DenseVector:
    """A point of R^dim stored as a read-only float64 array"""

    values: np.ndarray

    def __post_init__(self):
        values = _finite_matrix(self.values, "vector")
        if values.ndim != 1 or values.size == 0:
            raise ValidationError(f"vector must be 1-D and non-empty, got shape {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __len__(self) -> int:
        return self.dim

    def __iter__(self) -> Iterator[float]:
        return iter(self.values.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"DenseVector(dim={self.dim}, values={np.array2string(self.values, threshold=6)})"


VectorLike = Union[DenseVector, np.ndarray, Sequence[float]]


def as_vector(value: VectorLike) -> np.ndarray:
    """Validated float64 view of anything vector shaped"""
    if isinstance(value, DenseVector):
        return value.values
    return DenseVector(value).values


class EmbeddingSet:
    """n document vectors of equal dimension, keyed by unique unsigned ids.

    Vectors are held as one ``(n, dim)`` matrix; ``vectors`` materialises them as
    :class:`DenseVector` on demand.
    """

    __slots__ = ("ids", "matrix", "_positions")

    def __init__(self, ids: Iterable[int], matrix):
        ids = np.array(list(ids) if not isinstance(ids, np.ndarray) else ids)
        if ids.size and (ids.dtype.kind not in "iu" or np.any(ids < 0)):
            raise ValidationError("document ids must be unsigned integers")
        ids = ids.astype(np.uint64)
        matrix = _finite_matrix(matrix, "embedding matrix")
        if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
            raise ValidationError(f"expected a non-empty (n, dim) matrix, got {matrix.shape}")
        if ids.ndim != 1 or ids.shape[0] != matrix.shape[0]:
            raise ValidationError(f"{ids.shape[0]} ids for {matrix.shape[0]} vectors")
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise ValidationError("document ids must be unique")
        self.ids = _frozen(ids)
        self.matrix = _frozen(matrix)
        self._positions = None

    @classmethod
    def from_vectors(cls, ids: Iterable[int], vectors: Sequence[VectorLike]) -> "EmbeddingSet":
        rows = [as_vector(v) for v in vectors]
        if rows and len({r.shape[0] for r in rows}) != 1:
            raise DimensionError("all vectors of a set must share the same dimension")
        return cls(ids, np.vstack(rows) if rows else np.empty((0, 0)))

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def vectors(self) -> List[DenseVector]:
        return [DenseVector(row) for row in self.matrix]

    def __len__(self) -> int:
        return int(self.matrix.shape[0])

    def position(self, doc_id: int) -> int:
        if self._positions is None:
            self._positions = {int(i): p for p, i in enumerate(self.ids.tolist())}
        return self._positions[int(doc_id)]

    def vector(self, doc_id: int) -> DenseVector:
        return DenseVector(self.matrix[self.position(doc_id)])

    def subset(self, positions) -> "EmbeddingSet":
        positions = np.asarray(positions, dtype=np.int64)
        return EmbeddingSet(self.ids[positions], self.matrix[positions])

    def __repr__(self) -> str:
        return f"EmbeddingSet(n={len(self)}, dim={self.dim})"


class MultiEmbedding:
    """Per-token vectors of one text, optionally aligned with vocabulary token ids"""

    __slots__ = ("id", "matrix", "token_ids")

    def __init__(self, id: int, matrix, token_ids: Optional[Iterable[int]] = None):
        matrix = _finite_matrix(matrix, "token embeddings")
        if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
            raise ValidationError(f"expected a non-empty (tokens, dim) matrix, got {matrix.shape}")
        if token_ids is not None:
            token_ids = np.array(list(token_ids), dtype=np.int64)
            if token_ids.shape != (matrix.shape[0],):
                raise ValidationError(
                    f"{token_ids.shape[0]} token ids for {matrix.shape[0]} token vectors"
                )
            if np.any(token_ids < 0):
                raise ValidationError("token ids must be unsigned")
            token_ids = _frozen(token_ids.astype(np.uint32))
        self.id = int(id)
        self.matrix = _frozen(matrix)
        self.token_ids = token_ids

    @property
    def vectors(self) -> List[DenseVector]:
        return [DenseVector(row) for row in self.matrix]

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return int(self.matrix.shape[0])

    def __repr__(self) -> str:
        lexical = "" if self.token_ids is None else ", lexical"
        return f"MultiEmbedding(id={self.id}, tokens={len(self)}, dim={self.dim}{lexical})"


class SparseVector(Mapping):
    """Term id to non-negative weight map; zero weights are never stored.

    ``doc_id`` is optional: corpora read from JSON Lines carry it, query vectors do not.
    """

    __slots__ = ("entries", "doc_id")

    def __init__(self, entries: Mapping[int, float] = None, doc_id: Optional[int] = None):
        cleaned = {}
        for term, weight in (entries or {}).items():
            term, weight = int(term), float(weight)
            if term < 0:
                raise ValidationError(f"term id {term} is negative")
            if not np.isfinite(weight):
                raise ValidationError(f"weight of term {term} is not finite")
            if weight < 0:
                raise WeightError(f"weight of term {term} is negative: {weight}")
            if weight > 0:
                cleaned[term] = weight
        self.entries = MappingProxyType(cleaned)
        self.doc_id = None if doc_id is None else int(doc_id)

    @classmethod
    def from_pairs(
        cls, pairs: Iterable[Tuple[int, float]], doc_id: Optional[int] = None
    ) -> "SparseVector":
        """Build from (term, weight) pairs, keeping the highest weight of repeated terms"""
        best = {}
        for term, weight in pairs:
            term = int(term)
            best[term] = max(best.get(term, float("-inf")), float(weight))
        return cls(best, doc_id=doc_id)

    def __getitem__(self, term: int) -> float:
        return self.entries[term]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        if isinstance(other, SparseVector):
            return dict(self.entries) == dict(other.entries) and self.doc_id == other.doc_id
        return NotImplemented

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseVector(doc_id={self.doc_id}, nnz={len(self)})"


class ScoredHit(NamedTuple):

    doc_id: int
    score: float
    rank: int


class SearchResult(NamedTuple):
    """Hits of one query plus the number of documents scored to produce them"""

    hits: List[ScoredHit]
    candidates: int


class SearchIndex(Protocol):
    """What the harness and the late-interaction pipeline expect from an index"""

    MAGIC: bytes

    @property
    def dim(self) -> int: ...

    def __len__(self) -> int: ...

    def search(self, q: VectorLike, k: int) -> SearchResult: ...

    def size_bytes(self) -> int: ...


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> List[ScoredHit]:
    """Best ``k`` of ``scores`` (higher is better), ties broken by ascending id.

    A partition selects the pool when k is small against n; otherwise everything is sorted.
    Both paths return the same list.
    """
    if k < 1:
        raise ArityError(f"k must be >= 1, got {k}")
    n = scores.shape[0]
    if n == 0:
        return []
    k = min(k, n)
    if k <= n // 4:
        kth = np.partition(scores, n - k)[n - k]
        pool = np.flatnonzero(scores >= kth)
    else:
        pool = np.arange(n)
    order = pool[np.lexsort((ids[pool], -scores[pool]))][:k]
    return [
        ScoredHit(int(ids[i]), float(scores[i]), rank) for rank, i in enumerate(order.tolist(), 1)
    ]


def neg_sq_distances(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``-||row - q||^2`` for every row; the one formula all exact Euclidean scans share"""
    diff = matrix - q
    return -np.sum(diff * diff, axis=1)


def _pair(a: VectorLike, b: VectorLike) -> Tuple[np.ndarray, np.ndarray]:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} != {b.shape[0]}")
    return a, b


def dot(a: VectorLike, b: VectorLike) -> float:
    a, b = _pair(a, b)
    return float(np.dot(a, b))


def norm(a: VectorLike) -> float:
    return float(np.linalg.norm(as_vector(a)))


def euclidean_sq(a: VectorLike, b: VectorLike) -> float:
    a, b = _pair(a, b)
    diff = a - b
    return float(np.dot(diff, diff))


def cosine(a: VectorLike, b: VectorLike) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(z: Sequence[Numeric]) -> np.ndarray:
    """Probability distribution over ``len(z) >= 2`` logits, shifted by their maximum"""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ArityError(f"softmax needs at least 2 logits, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def interaction_matrix(q: MultiEmbedding, d: MultiEmbedding) -> np.ndarray:
    """Cosine similarity of every query token against every document token, ``(|q|, |d|)``"""
    if q.dim != d.dim:
        raise DimensionError(f"dimension mismatch: {q.dim} != {d.dim}")
    qn = np.linalg.norm(q.matrix, axis=1)
    dn = np.linalg.norm(d.matrix, axis=1)
    if np.any(qn == 0) or np.any(dn == 0):
        raise DegenerateVectorError("interaction matrix over a zero-norm token embedding")
    return np.clip((q.matrix / qn[:, None]) @ (d.matrix / dn[:, None]).T, -1.0, 1.0)
