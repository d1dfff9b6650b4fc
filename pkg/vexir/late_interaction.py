"""Multi-representation scoring and the two-stage late-interaction pipeline.

Scorers work on :class:`~vexir.core.MultiEmbedding` values whose row 0 is the classification
token. The pipeline retrieves candidate documents with an ANN index over every document token
row, then re-scores the union exactly with sum-maxsim.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .core import (
    EmbeddingSet,
    MultiEmbedding,
    ScoredHit,
    SearchIndex,
    SearchResult,
    VectorLike,
    as_vector,
    softmax,
    top_k,
)
from .errors import (
    ArityError,
    ConsistencyError,
    DimensionError,
    LexicalInfoError,
    ValidationError,
)
from .formats import read_matrix

Scorer = Callable[[MultiEmbedding, MultiEmbedding], float]


class MultiDocStore:
    """Token rows of a whole collection stacked into one matrix.

    Global row ``r`` belongs to document ``row_doc[r]`` (a position in ``docs``) and is its
    token ``row_token[r]``.
    """

    def __init__(self, docs: Sequence[MultiEmbedding]):
        docs = list(docs)
        if not docs:
            raise ValidationError("a multi-embedding store needs at least one document")
        if len({d.dim for d in docs}) != 1:
            raise DimensionError("all documents of a store must share one dimension")
        ids = [d.id for d in docs]
        if len(set(ids)) != len(ids):
            raise ValidationError("document ids must be unique")
        self.docs = docs
        self.doc_ids = np.array(ids, dtype=np.uint64)
        lengths = np.array([len(d) for d in docs], dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(lengths)))
        self.row_doc = np.repeat(np.arange(len(docs)), lengths)
        self.row_token = np.arange(self.offsets[-1]) - self.offsets[self.row_doc]
        self.rows = np.vstack([d.matrix for d in docs])
        self._positions = {doc_id: p for p, doc_id in enumerate(ids)}

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    @property
    def row_count(self) -> int:
        return int(self.rows.shape[0])

    def __len__(self) -> int:
        return len(self.docs)

    def doc(self, doc_id: int) -> MultiEmbedding:
        return self.docs[self._positions[int(doc_id)]]

    def owner(self, row: int):
        """``(doc id, token position)`` of a global row"""
        return int(self.doc_ids[self.row_doc[row]]), int(self.row_token[row])

    def as_embedding_set(self) -> EmbeddingSet:
        """Every token row as a vector whose id is its global row number"""
        return EmbeddingSet(np.arange(self.row_count, dtype=np.uint64), self.rows)

    def __repr__(self) -> str:
        return f"MultiDocStore(docs={len(self)}, rows={self.row_count}, dim={self.dim})"


class CoilProjections:
    """Classification projection ``W_C`` (dim x dim) and token projection ``W_T`` (tok_dim x dim)"""

    def __init__(self, cls_matrix, tok_matrix):
        cls_matrix = np.array(cls_matrix, dtype=np.float64)
        tok_matrix = np.array(tok_matrix, dtype=np.float64)
        if not (np.all(np.isfinite(cls_matrix)) and np.all(np.isfinite(tok_matrix))):
            raise ValidationError("projection matrices must be finite")
        if cls_matrix.ndim != 2 or cls_matrix.shape[0] != cls_matrix.shape[1]:
            raise ValidationError(f"W_C must be square, got {cls_matrix.shape}")
        dim = cls_matrix.shape[0]
        if tok_matrix.ndim != 2 or tok_matrix.shape[1] != dim:
            raise ValidationError(f"W_T must have {dim} columns, got {tok_matrix.shape}")
        if not 1 <= tok_matrix.shape[0] < dim:
            raise ValidationError(
                f"token dimension must lie in [1, {dim}), got {tok_matrix.shape[0]}"
            )
        cls_matrix.setflags(write=False)
        tok_matrix.setflags(write=False)
        self.cls_matrix = cls_matrix
        self.tok_matrix = tok_matrix

    @classmethod
    def from_files(
        cls, cls_path: Union[str, Path], tok_path: Union[str, Path]
    ) -> "CoilProjections":
        return cls(read_matrix(cls_path), read_matrix(tok_path))

    @property
    def cls_dim(self) -> int:
        return int(self.cls_matrix.shape[0])

    @property
    def tok_dim(self) -> int:
        return int(self.tok_matrix.shape[0])


def _first_rows(phi0: VectorLike, doc: MultiEmbedding, m: int):
    phi0 = as_vector(phi0)
    if phi0.shape[0] != doc.dim:
        raise DimensionError(f"query has dim {phi0.shape[0]}, document has dim {doc.dim}")
    if not 1 <= m <= len(doc):
        raise ArityError(f"m={m} needs between 1 and {len(doc)} vectors of document {doc.id}")
    return phi0, doc.matrix[:m]


def poly_score(phi0: VectorLike, doc: MultiEmbedding, m: int) -> float:
    """Attend over the first ``m`` document vectors with ``phi0`` and score the blend"""
    phi0, psi = _first_rows(phi0, doc, m)
    if m == 1:
        return float(psi[0] @ phi0)
    weights = softmax(psi @ phi0)
    return float((weights @ psi) @ phi0)


def maxsim_score(phi0: VectorLike, doc: MultiEmbedding, m: int) -> float:
    phi0, psi = _first_rows(phi0, doc, m)
    return float(np.max(psi @ phi0))


def sum_maxsim_score(q: MultiEmbedding, d: MultiEmbedding, include_cls: bool = True) -> float:
    """Sum over query rows of the best dot product with any document row.

    ``include_cls=False`` leaves the query classification row out of the sum.
    """
    if q.dim != d.dim:
        raise DimensionError(f"dimension mismatch: {q.dim} != {d.dim}")
    rows = q.matrix if include_cls else q.matrix[1:]
    if rows.shape[0] == 0:
        return 0.0
    return float(np.sum(np.max(rows @ d.matrix.T, axis=1)))


def coil_score(q: MultiEmbedding, d: MultiEmbedding, proj: CoilProjections) -> float:
    """Projected classification match plus lexically gated token maxima.

    A query token only interacts with document tokens carrying the same token id; without
    any such token it contributes 0.
    """
    if q.token_ids is None or d.token_ids is None:
        raise LexicalInfoError("COIL scoring needs token ids on query and document")
    if q.dim != d.dim or q.dim != proj.cls_dim:
        raise DimensionError(
            f"dims differ: query {q.dim}, doc {d.dim}, projections {proj.cls_dim}"
        )
    score = float((proj.cls_matrix @ q.matrix[0]) @ (proj.cls_matrix @ d.matrix[0]))
    if len(q) < 2 or len(d) < 2:
        return score
    q_tok = q.matrix[1:] @ proj.tok_matrix.T
    d_tok = d.matrix[1:] @ proj.tok_matrix.T
    match = q.token_ids[1:, None] == d.token_ids[None, 1:]
    sims = np.where(match, q_tok @ d_tok.T, -np.inf)
    best = sims.max(axis=1)
    return score + float(np.sum(best[np.isfinite(best)]))


class ScorerKind(str, Enum):

    poly = "poly"
    maxsim = "maxsim"
    summaxsim = "summaxsim"
    coil = "coil"


def make_scorer(
    kind: ScorerKind,
    m: int = 1,
    projections: Optional[CoilProjections] = None,
    include_cls: bool = True,
) -> Scorer:
    """Uniform ``(query, doc) -> score`` callable; poly and maxsim use the query's row 0.

    Poly and maxsim raise :class:`ArityError` on a document with fewer than ``m`` vectors.
    """
    kind = ScorerKind(kind)
    if m < 1:
        raise ArityError(f"m must be at least 1, got {m}")
    if kind is ScorerKind.coil:
        if projections is None:
            raise ValidationError("the coil scorer needs projection matrices")
        return partial(coil_score, proj=projections)
    if kind is ScorerKind.summaxsim:
        return partial(sum_maxsim_score, include_cls=include_cls)
    single = poly_score if kind is ScorerKind.poly else maxsim_score

    def score(q: MultiEmbedding, d: MultiEmbedding) -> float:
        return single(q.matrix[0], d, m)

    return score


def rerank(doc_ids: Iterable[int], scorer: Callable[[int], float], k: int) -> List[ScoredHit]:
    """Re-score a candidate list with any per-document scorer and keep the best ``k``"""
    ids = np.fromiter((int(i) for i in doc_ids), dtype=np.uint64)
    scores = np.array([scorer(int(i)) for i in ids.tolist()], dtype=np.float64)
    return top_k(ids, scores, k)


def candidate_docs(
    store: MultiDocStore,
    ann: SearchIndex,
    q: MultiEmbedding,
    k_prime: int,
    workers: Optional[int] = None,
) -> List[int]:
    """Owners of the ``k_prime`` nearest token rows of every query row, first seen first"""
    if len(ann) != store.row_count:
        raise ConsistencyError(f"index holds {len(ann)} rows, store has {store.row_count}")
    if q.dim != store.dim:
        raise DimensionError(f"query has dim {q.dim}, store has dim {store.dim}")
    probe = partial(_probe_rows, ann, k_prime)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            found = list(pool.map(probe, q.matrix))
    else:
        found = [probe(row) for row in q.matrix]
    seen = {}
    for rows in found:
        for row in rows:
            seen.setdefault(int(store.doc_ids[store.row_doc[row]]), None)
    return list(seen)


def _probe_rows(ann: SearchIndex, k_prime: int, row: np.ndarray) -> List[int]:
    return [hit.doc_id for hit in ann.search(row, k_prime).hits]


def two_stage_result(
    store: MultiDocStore,
    ann: SearchIndex,
    q: MultiEmbedding,
    k_prime: int,
    k: int,
    workers: Optional[int] = None,
    scorer: Optional[Scorer] = None,
) -> SearchResult:
    scorer = scorer or sum_maxsim_score
    candidates = candidate_docs(store, ann, q, k_prime, workers)
    logger.debug(f"stage one: {len(candidates)} candidate docs from {len(q)} query rows")
    hits = rerank(candidates, lambda doc_id: scorer(q, store.doc(doc_id)), k)
    return SearchResult(hits, len(candidates))


def two_stage_search(
    store: MultiDocStore,
    ann: SearchIndex,
    q: MultiEmbedding,
    k_prime: int,
    k: int,
    workers: Optional[int] = None,
) -> List[ScoredHit]:
    return two_stage_result(store, ann, q, k_prime, k, workers).hits


def brute_force_search(
    store: MultiDocStore, q: MultiEmbedding, k: int, scorer: Optional[Scorer] = None
) -> List[ScoredHit]:
    """Score every document of the store; the reference for the two-stage pipeline"""
    scorer = scorer or sum_maxsim_score
    return rerank(store.doc_ids.tolist(), lambda doc_id: scorer(q, store.doc(doc_id)), k)


class PassageMode(str, Enum):

    first = "FirstP"
    max = "MaxP"
    sum = "SumP"


def aggregate_passages(scores: Sequence[float], mode: PassageMode) -> float:
    """Document score from its passage scores"""
    if len(scores) == 0:
        raise ArityError("no passage scores to aggregate")
    mode = PassageMode(mode)
    if mode is PassageMode.first:
        return float(scores[0])
    if mode is PassageMode.max:
        return float(max(scores))
    return float(sum(float(s) for s in scores))

