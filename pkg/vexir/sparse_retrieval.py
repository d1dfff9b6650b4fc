"""Learned sparse retrieval over an impact-quantised inverted index.

Term weights are linearly quantised to 8 bit impacts with one global scale. A posting list
holds the doc ids containing a term (ascending) and the matching impacts; zero impacts are
never stored. Queries accumulate impacts term at a time by default.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .artifacts import register
from .core import (
    MultiEmbedding,
    ScoredHit,
    SearchResult,
    SparseVector,
    VectorLike,
    as_vector,
    top_k,
)
from .errors import (
    ArityError,
    DegenerateCollectionError,
    DimensionError,
    FormatError,
    IngestError,
    LexicalInfoError,
    ValidationError,
    WeightError,
)
from .formats import ByteReader, ByteWriter

LEVELS = 255

Postings = Tuple[np.ndarray, np.ndarray]
Heads = Union[np.ndarray, Sequence[Mapping[int, float]]]


@dataclass(frozen=True)
class ImpactQuantiser:
    """Maps ``[0, max_weight]`` linearly onto ``{0..levels}``; larger weights saturate"""

    max_weight: float
    levels: int = LEVELS

    def __post_init__(self):
        if not (math.isfinite(self.max_weight) and self.max_weight > 0):
            raise ValidationError(f"max_weight must be positive, got {self.max_weight}")
        if not 1 <= self.levels <= 255:
            raise ValidationError(f"levels must fit in 8 bits, got {self.levels}")

    def quantise_array(self, weights) -> np.ndarray:
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0):
            raise WeightError("impact weights must be non-negative")
        # round half away from zero; weights are non-negative so floor(x + 0.5) does it
        codes = np.floor(self.levels * weights / self.max_weight + 0.5)
        return np.minimum(codes, self.levels).astype(np.uint8)

    def quantise(self, weight: float) -> int:
        return int(self.quantise_array([weight])[0])

    def dequantise(self, code: int) -> float:
        if not 0 <= code <= self.levels:
            raise ValidationError(f"impact code {code} outside 0..{self.levels}")
        return code * self.max_weight / self.levels


def fit_quantiser(docs: Iterable[Mapping[int, float]]) -> ImpactQuantiser:
    """Global-max scaling over every weight of the corpus"""
    peak = 0.0
    for doc in docs:
        if len(doc):
            peak = max(peak, max(doc.values()))
    if peak <= 0:
        raise DegenerateCollectionError("sparse corpus has no positive weight")
    return ImpactQuantiser(float(peak))


def _doc_ids(docs: Sequence[SparseVector]) -> List[int]:
    ids = [i if d.doc_id is None else d.doc_id for i, d in enumerate(docs)]
    seen = set()
    for doc_id in ids:
        if doc_id in seen:
            raise IngestError(f"document id {doc_id} ingested twice")
        seen.add(doc_id)
    return ids


def encode_varints(values: Iterable[int]) -> bytes:
    """7 bits per byte, low bits first; the high bit marks a continuation"""
    out = bytearray()
    for value in values:
        value = int(value)
        while True:
            byte = value & 0x7F
            value >>= 7
            out.append(byte | (0x80 if value else 0))
            if not value:
                break
    return bytes(out)


def decode_varints(payload: bytes, count: int) -> Tuple[np.ndarray, int]:
    """First ``count`` varints of ``payload`` and the number of bytes they took"""
    values = np.empty(count, dtype=np.uint64)
    value = shift = read = used = 0
    for byte in payload:
        if read == count:
            break
        used += 1
        value |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
            continue
        values[read] = value
        read += 1
        value = shift = 0
    if read != count:
        raise FormatError(f"varint stream ended after {read} of {count} values")
    return values, used


class Traversal(str, Enum):

    term_at_a_time = "taat"
    doc_at_a_time = "daat"


@register
class ImpactIndex:

    MAGIC = b"VXS1"

    def __init__(
        self, postings: Dict[int, Postings], quantiser: ImpactQuantiser, doc_count: int
    ):
        self.postings = postings
        self.quantiser = quantiser
        self.doc_count = doc_count

    def __len__(self) -> int:
        return self.doc_count

    @property
    def posting_count(self) -> int:
        return sum(ids.shape[0] for ids, _ in self.postings.values())

    def search(self, q: Mapping[int, float], k: int) -> SearchResult:
        """UniCOIL scoring with the query's weights; candidates are the docs touched"""
        ids, scores = score_term_at_a_time(self, _query_weights(q))
        return SearchResult(top_k(ids, scores, k), int(ids.shape[0]))

    def size_bytes(self) -> int:
        return len(self.to_bytes())

    def to_bytes(self) -> bytes:
        """Quantiser, term directory ``(term, offset, length)``, then each list as varint
        doc id gaps followed by its impacts"""
        terms = sorted(self.postings)
        lists, directory, offset = [], [], 0
        for term in terms:
            ids, impacts = self.postings[term]
            gaps = np.diff(ids, prepend=np.uint64(0))
            chunk = encode_varints(gaps.tolist()) + impacts.astype(np.uint8).tobytes()
            directory.append((term, offset, ids.shape[0]))
            lists.append(chunk)
            offset += len(chunk)
        q = self.quantiser
        writer = ByteWriter(self.MAGIC)
        writer.pack("dBQI", q.max_weight, q.levels, self.doc_count, len(terms))
        for entry in directory:
            writer.pack("QQI", *entry)
        return writer.blob(b"".join(lists)).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ImpactIndex":
        reader = ByteReader(payload, cls.MAGIC, "impact index")
        max_weight, levels, doc_count, term_count = reader.unpack("dBQI")
        directory = [reader.unpack("QQI") for _ in range(term_count)]
        body = memoryview(reader.blob())
        if not reader.exhausted:
            raise FormatError("impact index: trailing bytes")
        postings = {}
        for term, offset, length in directory:
            ids, used = decode_varints(body[offset:], length)
            start = offset + used
            impacts = np.frombuffer(body[start:start + length], dtype=np.uint8)
            if impacts.shape[0] != length:
                raise FormatError(f"impact index: truncated impacts of term {term}")
            postings[term] = (np.cumsum(ids, dtype=np.uint64), impacts.copy())
        return cls(postings, ImpactQuantiser(max_weight, levels), doc_count)

    def __repr__(self) -> str:
        return (
            f"ImpactIndex(docs={self.doc_count}, terms={len(self.postings)}, "
            f"postings={self.posting_count})"
        )


def build_impact_index(
    docs: Sequence[SparseVector], quantiser: Optional[ImpactQuantiser] = None
) -> ImpactIndex:
    """One posting per (term, doc) whose quantised impact is positive.

    Docs without an id are numbered by position.
    """
    docs = list(docs)
    ids = _doc_ids(docs)
    quantiser = quantiser or fit_quantiser(docs)
    terms, owners, weights = [], [], []
    for doc_id, doc in zip(ids, docs):
        terms.extend(doc.keys())
        owners.extend([doc_id] * len(doc))
        weights.extend(doc.values())
    terms = np.array(terms, dtype=np.uint64)
    owners = np.array(owners, dtype=np.uint64)
    impacts = quantiser.quantise_array(weights)
    keep = impacts > 0
    terms, owners, impacts = terms[keep], owners[keep], impacts[keep]
    order = np.lexsort((owners, terms))
    terms, owners, impacts = terms[order], owners[order], impacts[order]
    cuts = np.flatnonzero(np.diff(terms)) + 1
    starts = np.concatenate(([0], cuts)).astype(np.int64) if terms.size else np.empty(0, int)
    postings = {
        int(terms[s]): (run_ids, run_impacts)
        for s, run_ids, run_impacts in zip(
            starts.tolist(), np.split(owners, cuts), np.split(impacts, cuts)
        )
    }
    index = ImpactIndex(postings, quantiser, len(docs))
    dropped = int((~keep).sum())
    if dropped:
        logger.debug(f"{dropped} weights quantised to zero and dropped")
    logger.debug(f"built {index!r}")
    return index


def _query_weights(q: Union[Mapping[int, float], Iterable[int]]) -> Dict[int, float]:
    if isinstance(q, Mapping):
        weights = {int(t): float(v) for t, v in q.items()}
        negative = [t for t, v in weights.items() if v < 0]
        if negative:
            raise WeightError(f"negative query weight on terms {negative}")
        return weights
    return {int(t): 1.0 for t in q}


def score_term_at_a_time(
    ix: ImpactIndex, weights: Mapping[int, float]
) -> Tuple[np.ndarray, np.ndarray]:
    """Accumulate ``weight * impact`` list by list; returns touched doc ids and their scores"""
    runs = [(ix.postings[t], v) for t, v in weights.items() if t in ix.postings and v > 0]
    if not runs:
        return np.empty(0, dtype=np.uint64), np.empty(0)
    ids = np.concatenate([p[0] for p, _ in runs])
    contributions = np.concatenate([p[1] * v for p, v in runs])
    touched, slot = np.unique(ids, return_inverse=True)
    return touched, np.bincount(slot, weights=contributions, minlength=touched.shape[0])


def score_doc_at_a_time(
    ix: ImpactIndex, weights: Mapping[int, float]
) -> Tuple[np.ndarray, np.ndarray]:
    """Same scores as :func:`score_term_at_a_time`, merging the lists by doc id"""
    runs = [(ix.postings[t], v) for t, v in weights.items() if t in ix.postings and v > 0]
    # the run index keeps equal doc ids in list order, the order the term-at-a-time sum uses
    streams = [
        ((doc, r, impact * v) for doc, impact in zip(p[0].tolist(), p[1].tolist()))
        for r, (p, v) in enumerate(runs)
    ]
    ids, scores = [], []
    for doc, _, contribution in heapq.merge(*streams):
        if ids and ids[-1] == doc:
            scores[-1] += contribution
        else:
            ids.append(doc)
            scores.append(contribution)
    return np.array(ids, dtype=np.uint64), np.array(scores, dtype=np.float64)


_TRAVERSALS = {
    Traversal.term_at_a_time: score_term_at_a_time,
    Traversal.doc_at_a_time: score_doc_at_a_time,
}


def score_sum_impacts(
    ix: ImpactIndex,
    q: Iterable[int],
    k: int,
    traversal: Traversal = Traversal.term_at_a_time,
) -> List[ScoredHit]:
    """Rank docs by the sum of their impacts over the query terms; repeated terms count once"""
    weights = {int(t): 1.0 for t in set(q)}
    ids, scores = _TRAVERSALS[Traversal(traversal)](ix, weights)
    return top_k(ids, scores, k)


def score_unicoil(
    ix: ImpactIndex,
    q: Mapping[int, float],
    k: int,
    traversal: Traversal = Traversal.term_at_a_time,
) -> List[ScoredHit]:
    """Rank docs by ``sum_t v_t * impact(t, d)`` for query weights ``v``"""
    ids, scores = _TRAVERSALS[Traversal(traversal)](ix, _query_weights(q))
    return top_k(ids, scores, k)


def brute_force_sparse(
    docs: Sequence[SparseVector], q: Mapping[int, float], k: int
) -> List[ScoredHit]:
    """Unquantised ``sum_t v_t * w(t, d)`` over every doc, the reference for the index"""
    docs = list(docs)
    ids = np.array(_doc_ids(docs), dtype=np.uint64)
    weights = _query_weights(q)
    scores = np.array(
        [sum(v * doc.get(t, 0.0) for t, v in weights.items()) for doc in docs], dtype=np.float64
    )
    touched = scores > 0
    return top_k(ids[touched], scores[touched], k)


def impact_scores(
    doc: MultiEmbedding,
    w: VectorLike,
    first_subword: Optional[Sequence[bool]] = None,
    skip_cls: bool = True,
) -> SparseVector:
    """Project each token embedding onto ``w``, clip at 0 and keep the best score per token id.

    ``first_subword`` masks out continuation pieces of split words; row 0 (the classification
    token) is skipped unless ``skip_cls`` is false.
    """
    if doc.token_ids is None:
        raise LexicalInfoError(f"document {doc.id} has no token ids")
    w = as_vector(w)
    if w.shape[0] != doc.dim:
        raise DimensionError(f"projection has dim {w.shape[0]}, tokens have dim {doc.dim}")
    keep = np.ones(len(doc), dtype=bool)
    if first_subword is not None:
        mask = np.asarray(first_subword, dtype=bool)
        if mask.shape != keep.shape:
            raise ValidationError(f"{mask.shape[0]} sub-word flags for {len(doc)} tokens")
        keep &= mask
    if skip_cls:
        keep[0] = False
    z = np.maximum(doc.matrix @ w, 0.0)
    pairs = zip(doc.token_ids[keep].tolist(), z[keep].tolist())
    return SparseVector.from_pairs(pairs, doc_id=doc.id)


def splade_aggregate(heads: Heads, doc_id: Optional[int] = None) -> SparseVector:
    """``gamma_t = sum_i log(1 + relu(chi_it))`` over the per-token vocabulary heads.

    ``heads`` is a ``(tokens, vocab)`` matrix or one term to logit mapping per token;
    logits may be negative.
    """
    if isinstance(heads, np.ndarray):
        if heads.ndim != 2 or heads.shape[0] == 0:
            raise ArityError(f"expected a non-empty (tokens, vocab) matrix, got {heads.shape}")
        gamma = np.log1p(np.maximum(heads, 0.0)).sum(axis=0)
        terms = np.flatnonzero(gamma > 0)
        return SparseVector(dict(zip(terms.tolist(), gamma[terms].tolist())), doc_id=doc_id)
    if len(heads) == 0:
        raise ArityError("no heads to aggregate")
    gamma: Dict[int, float] = {}
    for head in heads:
        for term, logit in head.items():
            if logit > 0:
                gamma[int(term)] = gamma.get(int(term), 0.0) + math.log1p(logit)
    return SparseVector(gamma, doc_id=doc_id)


def _mean_weights(batch: Sequence[Mapping[int, float]], vocab_size: int) -> np.ndarray:
    if len(batch) == 0:
        raise ArityError("FLOPS over an empty batch")
    if vocab_size < 1:
        raise ValidationError(f"vocab_size must be positive, got {vocab_size}")
    totals = np.zeros(vocab_size)
    for doc in batch:
        if not len(doc):
            continue
        terms = np.fromiter(doc.keys(), dtype=np.int64, count=len(doc))
        if terms.max() >= vocab_size:
            raise ValidationError(f"term {terms.max()} outside a vocabulary of {vocab_size}")
        np.add.at(totals, terms, np.fromiter(doc.values(), dtype=np.float64, count=len(doc)))
    return totals / len(batch)


def flops_metric(batch: Sequence[Mapping[int, float]], vocab_size: int) -> float:
    """Sum over the vocabulary of the squared mean weight across the batch"""
    mean = _mean_weights(batch, vocab_size)
    return float(np.dot(mean, mean))


class FlopsPenalty(NamedTuple):

    documents: float
    queries: float

    @property
    def total(self) -> float:
        return self.documents + self.queries


def flops_regularisers(
    doc_batch: Sequence[Mapping[int, float]],
    query_batch: Sequence[Mapping[int, float]],
    vocab_size: int,
    lambda_d: float,
    lambda_q: float,
) -> FlopsPenalty:
    """Separately weighted FLOPS penalties of a document batch and a query batch"""
    if lambda_d < 0 or lambda_q < 0:
        raise ValidationError("FLOPS weights must be non-negative")
    return FlopsPenalty(
        lambda_d * flops_metric(doc_batch, vocab_size),
        lambda_q * flops_metric(query_batch, vocab_size),
    )
