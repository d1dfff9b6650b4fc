"""Maximum inner product search reduced to Euclidean nearest neighbour search.

Documents are scaled by the largest document norm ``M`` and lifted onto the unit sphere of
R^(dim+1) with an extra coordinate ``sqrt(1 - |psi|^2 / M^2)``; queries are normalised and
padded with 0. The Euclidean nearest transformed document is then the document with the
largest inner product with the query.

The transform is bound to the collection it was fitted on: a document longer than ``M``
needs a refit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from .core import DenseVector, EmbeddingSet, VectorLike, as_vector
from .errors import (
    DegenerateCollectionError,
    DegenerateVectorError,
    DimensionError,
    OutOfFitError,
    ValidationError,
)
from .formats import ByteReader, ByteWriter

SLACK = 1e-9


@dataclass(frozen=True)
class MipTransform:

    big_m: float
    source_dim: int

    def __post_init__(self):
        if not (np.isfinite(self.big_m) and self.big_m > 0):
            raise ValidationError(f"M must be a positive finite norm, got {self.big_m}")
        if self.source_dim < 1:
            raise ValidationError(f"source dimension must be positive, got {self.source_dim}")

    @property
    def target_dim(self) -> int:
        return self.source_dim + 1

    def to_bytes(self) -> bytes:
        return ByteWriter(b"MIPT").pack("dI", self.big_m, self.source_dim).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "MipTransform":
        reader = ByteReader(payload, b"MIPT", "MIP transform")
        big_m, source_dim = reader.unpack("dI")
        return cls(big_m, source_dim)


def fit(docs: EmbeddingSet) -> MipTransform:
    """Exact maximum norm over the collection, no slack factor"""
    big_m = float(np.max(np.linalg.norm(docs.matrix, axis=1)))
    if big_m == 0:
        raise DegenerateCollectionError("every document vector is zero, M is undefined")
    logger.debug(f"MIP transform fitted on {len(docs)} docs, M={big_m:.6g}")
    return MipTransform(big_m, docs.dim)


def _check_dim(t: MipTransform, dim: int):
    if dim != t.source_dim:
        raise DimensionError(f"transform fitted on dim {t.source_dim}, got {dim}")


def _lift(t: MipTransform, matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    worst = float(norms.max())
    if worst > t.big_m * (1 + SLACK):
        raise OutOfFitError(f"document norm {worst:.9g} exceeds M={t.big_m:.9g}, refit needed")
    if worst > t.big_m:
        logger.warning(f"clamping document norm {worst:.17g} to M={t.big_m:.17g}")
    scaled = matrix / t.big_m
    rest = 1.0 - np.sum(scaled * scaled, axis=1)
    # rounding at |psi| ~ M leaves a few ulps either side of zero
    rest[rest <= 4 * np.finfo(np.float64).eps] = 0.0
    last = np.sqrt(rest)
    return np.hstack((scaled, last[:, None]))


def transform_doc(t: MipTransform, psi: VectorLike) -> DenseVector:
    psi = as_vector(psi)
    _check_dim(t, psi.shape[0])
    return DenseVector(_lift(t, psi[None, :])[0])


def transform_query(t: MipTransform, phi: VectorLike) -> DenseVector:
    phi = as_vector(phi)
    _check_dim(t, phi.shape[0])
    length = np.linalg.norm(phi)
    if length == 0:
        raise DegenerateVectorError("zero query has no direction")
    return DenseVector(np.append(phi / length, 0.0))


def apply(t: MipTransform, docs: EmbeddingSet) -> EmbeddingSet:
    """Transform a whole collection at once; ids are kept"""
    _check_dim(t, docs.dim)
    return EmbeddingSet(docs.ids, _lift(t, docs.matrix))


def prepare(docs: EmbeddingSet, mip: bool) -> Tuple[Optional[MipTransform], EmbeddingSet]:
    """Collection an approximate index is built on: lifted when ``mip``, raw otherwise"""
    if not mip:
        return None, docs
    t = fit(docs)
    return t, apply(t, docs)


def lift_query(t: Optional[MipTransform], q: VectorLike) -> np.ndarray:
    return as_vector(q) if t is None else transform_query(t, q).values


def transform_blob(t: Optional[MipTransform]) -> bytes:
    return b"" if t is None else t.to_bytes()


def transform_from_blob(payload: bytes) -> Optional[MipTransform]:
    return MipTransform.from_bytes(payload) if payload else None
