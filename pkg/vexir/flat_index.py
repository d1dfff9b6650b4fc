"""Exhaustive exact search, the reference every approximate index is measured against."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from .artifacts import register
from .core import (
    EmbeddingSet,
    ScoredHit,
    SearchResult,
    VectorLike,
    as_vector,
    neg_sq_distances,
    top_k,
)
from .errors import DimensionError, FormatError
from .formats import ByteReader, ByteWriter, dense_from_bytes, dense_to_bytes


class Metric(str, Enum):

    euclidean = "euclidean"
    inner_product = "inner_product"

    @property
    def code(self) -> int:
        return list(Metric).index(self)


def query_vector(q: VectorLike, dim: int) -> np.ndarray:
    q = as_vector(q)
    if q.shape[0] != dim:
        raise DimensionError(f"query has dim {q.shape[0]}, index has dim {dim}")
    return q


def exact_scores(matrix: np.ndarray, q: np.ndarray, metric: Metric) -> np.ndarray:
    """Higher is better: inner products, or negated squared Euclidean distances"""
    if metric is Metric.inner_product:
        return matrix @ q
    return neg_sq_distances(matrix, q)


@register
class FlatIndex:
    """All vectors kept verbatim; search scores every one of them"""

    MAGIC = b"VXF1"

    def __init__(self, docs: EmbeddingSet, metric: Metric = Metric.euclidean):
        self.docs = docs
        self.metric = Metric(metric)

    @property
    def dim(self) -> int:
        return self.docs.dim

    def __len__(self) -> int:
        return len(self.docs)

    def scores(self, q: VectorLike) -> np.ndarray:
        return exact_scores(self.docs.matrix, query_vector(q, self.dim), self.metric)

    def search(self, q: VectorLike, k: int) -> SearchResult:
        return SearchResult(top_k(self.docs.ids, self.scores(q), k), len(self))

    def size_bytes(self) -> int:
        # float32 vectors plus u64 ids, as stored on disk
        return len(self) * (self.dim * 4 + 8)

    def to_bytes(self) -> bytes:
        writer = ByteWriter(self.MAGIC).pack("BII", self.metric.code, len(self), self.dim)
        return writer.blob(dense_to_bytes(self.docs)).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "FlatIndex":
        reader = ByteReader(payload, cls.MAGIC, "flat index")
        code, n, dim = reader.unpack("BII")
        if code >= len(Metric):
            raise FormatError(f"flat index: unknown metric code {code}")
        docs = dense_from_bytes(reader.blob())
        if (len(docs), docs.dim) != (n, dim):
            raise FormatError(f"flat index: header says {n}x{dim}, payload {len(docs)}x{docs.dim}")
        return cls(docs, list(Metric)[code])

    def __repr__(self) -> str:
        return f"FlatIndex(n={len(self)}, dim={self.dim}, metric={self.metric.value})"


def build_flat(docs: EmbeddingSet, metric: Metric = Metric.euclidean) -> FlatIndex:
    index = FlatIndex(docs, metric)
    logger.debug(f"built {index!r}")
    return index


def search_flat(ix: FlatIndex, q: VectorLike, k: int) -> List[ScoredHit]:
    return ix.search(q, k).hits


def batch_search_flat(
    ix: FlatIndex, queries: Sequence[VectorLike], k: int, workers: Optional[int] = None
) -> List[List[ScoredHit]]:
    """Search many queries; results keep the order of ``queries``"""
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda q: search_flat(ix, q, k), queries))
    return [search_flat(ix, q, k) for q in queries]
