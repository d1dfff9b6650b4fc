"""Fine-tuning objectives as plain numeric functions.

Nothing here holds parameters or computes gradients: the functions score externally produced
logits and similarities, and the samplers pick negatives for the losses to contrast against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .core import ScoredHit, SearchResult, VectorLike, softmax
from .errors import (
    ArityError,
    BatchError,
    CardinalityError,
    DomainError,
    ShortfallError,
    ValidationError,
)

# whole-corpus partition functions above this many docs are logged as expensive
FULL_SOFTMAX_WARN = 100_000

Retriever = Callable[[VectorLike, int], Union[SearchResult, Sequence[ScoredHit]]]


@dataclass(frozen=True)
class Triple:

    query_id: int
    pos_doc_id: int
    neg_doc_id: int

    def __post_init__(self):
        if self.pos_doc_id == self.neg_doc_id:
            raise ValidationError(f"query {self.query_id}: positive doubles as negative")


@dataclass(frozen=True)
class NceGroup:
    """One query with ``k >= 2`` unique docs, the positive first"""

    query_id: int
    doc_ids: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "doc_ids", tuple(int(i) for i in self.doc_ids))
        if len(self.doc_ids) < 2:
            raise ArityError(f"query {self.query_id}: a group needs k >= 2 docs")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValidationError(f"query {self.query_id}: group doc ids must be unique")

    @property
    def positive(self) -> int:
        return self.doc_ids[0]

    @property
    def negatives(self) -> Tuple[int, ...]:
        return self.doc_ids[1:]


def _finite(*values: float):
    if not all(math.isfinite(v) for v in values):
        raise ValidationError(f"logits must be finite, got {values}")


def head_binary(z0: float, z1: float) -> float:
    """Probability of class 1 under a softmax over two logits"""
    _finite(z0, z1)
    return float(softmax([z0, z1])[1])


def head_scalar(z: float) -> float:
    """A single-logit head scores with the logit itself"""
    _finite(z)
    return float(z)


def head_two_token(z_false: float, z_true: float) -> float:
    """Probability of the "true" token when only the two answer tokens compete"""
    return head_binary(z_false, z_true)


def ce_triple_loss(scores: Iterable[Tuple[float, float]]) -> float:
    """Binary cross-entropy averaged over the ``2|T|`` judgements of the triples.

    Each pair holds the relevance probability of the positive and of the negative doc.
    """
    pairs = np.asarray(list(scores), dtype=np.float64)
    if pairs.size == 0:
        raise ArityError("no triples to average over")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValidationError(f"expected (s_pos, s_neg) pairs, got shape {pairs.shape}")
    if np.any(pairs <= 0) or np.any(pairs >= 1) or not np.all(np.isfinite(pairs)):
        raise DomainError("triple scores must be probabilities strictly inside (0, 1)")
    total = -np.sum(np.log(pairs[:, 0])) - np.sum(np.log1p(-pairs[:, 1]))
    return float(total / (2 * pairs.shape[0]))


def _logsumexp(row: np.ndarray) -> float:
    top = row.max()
    return float(top + np.log(np.sum(np.exp(row - top))))


def nce_loss(score_rows: Iterable[Sequence[float]]) -> float:
    """Mean over rows of ``-log softmax(row)[0]``; position 0 holds the positive"""
    losses = []
    for row in score_rows:
        row = np.asarray(row, dtype=np.float64)
        if row.ndim != 1 or row.shape[0] < 2:
            raise ArityError(f"every row needs k >= 2 scores, got {row.size}")
        if not np.all(np.isfinite(row)):
            raise ValidationError("scores must be finite")
        losses.append(_logsumexp(row) - row[0])
    if not losses:
        raise ArityError("no score rows")
    return float(np.mean(losses))


def full_softmax_probability(scores: Sequence[float], positive_index: int) -> float:
    """Probability of one doc against every scored doc of the corpus.

    The partition function touches the whole corpus, which is what the sampled losses avoid.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= positive_index < scores.shape[0]:
        raise ValidationError(f"positive index {positive_index} outside {scores.shape[0]} scores")
    if scores.shape[0] > FULL_SOFTMAX_WARN:
        logger.warning(f"full softmax over {scores.shape[0]} docs")
    return float(softmax(scores)[positive_index])


def sample_random(
    corpus_ids: Iterable[int], count: int, seed: int, exclude: Iterable[int] = ()
) -> List[int]:
    """``count`` distinct ids drawn uniformly from the corpus minus ``exclude``"""
    pool = np.setdiff1d(
        np.fromiter((int(i) for i in corpus_ids), dtype=np.int64),
        np.fromiter((int(i) for i in exclude), dtype=np.int64),
    )
    if count < 0 or count > pool.shape[0]:
        raise CardinalityError(f"cannot draw {count} negatives from {pool.shape[0]} candidates")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    return rng.choice(pool, size=count, replace=False).tolist()


def sample_in_batch(batch: Sequence[Tuple[int, int]]) -> List[NceGroup]:
    """The other rows' positives serve as each query's negatives"""
    if len(batch) < 2:
        raise BatchError(f"in-batch negatives need at least 2 rows, got {len(batch)}")
    positives = [int(pos) for _, pos in batch]
    if len(set(positives)) != len(positives):
        raise BatchError("batch positives must be unique")
    return [
        NceGroup(int(query_id), [positives[i]] + positives[:i] + positives[i + 1:])
        for i, (query_id, _) in enumerate(batch)
    ]


def sample_hard_negatives(
    retriever: Retriever, query_vec: VectorLike, pos_ids: Iterable[int], count: int
) -> List[int]:
    """Best-ranked retrieved docs that are not positives, in rank order"""
    if count < 0:
        raise CardinalityError(f"cannot sample {count} hard negatives")
    if count == 0:
        return []
    positives = {int(i) for i in pos_ids}
    found = retriever(query_vec, count + len(positives))
    hits = found.hits if isinstance(found, SearchResult) else found
    negatives = [hit.doc_id for hit in hits if hit.doc_id not in positives][:count]
    if len(negatives) < count:
        raise ShortfallError(f"retriever gave {len(negatives)} of {count} negatives", negatives)
    return negatives
