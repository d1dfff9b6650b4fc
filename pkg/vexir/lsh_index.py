"""Euclidean locality-sensitive hashing.

Each of the ``r`` tables hashes a vector with ``m`` concatenated random projections
``floor((<a_j, x> + b_j) / w)``. A query collects the union of its ``r`` buckets and the
candidates are re-ranked exactly, in the (possibly MIP-lifted) Euclidean space of the index.

Projections come from a Philox generator keyed by ``(seed, table, j)``: the same parameters
always rebuild the same index.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from . import mips
from .artifacts import register
from .core import EmbeddingSet, SearchResult, VectorLike, as_vector, neg_sq_distances, top_k
from .errors import FormatError, ValidationError
from .flat_index import FlatIndex, query_vector
from .formats import ByteReader, ByteWriter

DEFAULT_WIDTH = 4.0
MEDIAN_SAMPLE = 1000

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_MIX_MULT = np.uint64(0x9E3779B97F4A7C15)
_MIX_SHIFT = np.uint64(29)


@dataclass(frozen=True)
class LshParams:

    r: int = 16
    m: int = 8
    w: float = DEFAULT_WIDTH
    seed: int = 0

    def __post_init__(self):
        if self.r < 1 or self.m < 1:
            raise ValidationError(f"need r >= 1 and m >= 1, got r={self.r}, m={self.m}")
        if not (np.isfinite(self.w) and self.w > 0):
            raise ValidationError(f"bucket width must be positive, got {self.w}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@lru_cache(maxsize=4096)
def _projections(seed: int, table_index: int, m: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """``(m, dim)`` standard normal directions and ``m`` offsets in units of the width"""
    directions = np.empty((m, dim))
    offsets = np.empty(m)
    for j in range(m):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, table_index, j])))
        directions[j] = rng.standard_normal(dim)
        offsets[j] = rng.random()
    directions.setflags(write=False)
    offsets.setflags(write=False)
    return directions, offsets


def _keys(params: LshParams, table_index: int, matrix: np.ndarray) -> np.ndarray:
    directions, offsets = _projections(params.seed, table_index, params.m, matrix.shape[1])
    return np.floor((matrix @ directions.T) / params.w + offsets).astype(np.int64)


def mix_keys(keys: np.ndarray) -> np.ndarray:
    """Fold each row of m int64 keys into one u64; mixer collisions only widen buckets"""
    words = np.ascontiguousarray(keys, dtype=np.int64).view(np.uint64)
    mixed = np.full(words.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for column in words.T:
        mixed ^= column
        mixed *= _MIX_MULT
        mixed ^= mixed >> _MIX_SHIFT
    return mixed


def hash_point(params: LshParams, table_index: int, psi: VectorLike) -> Tuple[int, ...]:
    if not 0 <= table_index < params.r:
        raise ValidationError(f"table {table_index} out of range for r={params.r}")
    psi = as_vector(psi)
    return tuple(_keys(params, table_index, psi[None, :])[0].tolist())


def median_pair_distance(docs: EmbeddingSet, seed: int) -> float:
    n = len(docs)
    if n < 2:
        return 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2**32])))
    first = rng.integers(0, n, MEDIAN_SAMPLE)
    second = (first + rng.integers(1, n, MEDIAN_SAMPLE)) % n
    diff = docs.matrix[first] - docs.matrix[second]
    median = float(np.median(np.sqrt(np.sum(diff * diff, axis=1))))
    return median if median > 0 else 1.0


Table = Dict[int, np.ndarray]


def _group(mixed: np.ndarray) -> Table:
    order = np.argsort(mixed, kind="stable")
    ordered = mixed[order]
    cuts = np.flatnonzero(np.diff(ordered)) + 1
    starts = np.concatenate(([0], cuts))
    return dict(zip(ordered[starts].tolist(), np.split(order, cuts)))


@register
class LshIndex:

    MAGIC = b"VXL1"

    def __init__(
        self,
        params: LshParams,
        docs: EmbeddingSet,
        tables: List[Table],
        transform: Optional[mips.MipTransform] = None,
        width_units: Optional[float] = None,
    ):
        self.params = params
        self.docs = docs
        self.tables = tables
        self.transform = transform
        self.width_units = params.w if width_units is None else width_units

    @property
    def dim(self) -> int:
        return self.docs.dim if self.transform is None else self.transform.source_dim

    def __len__(self) -> int:
        return len(self.docs)

    def candidates(self, q: np.ndarray) -> np.ndarray:
        """Sorted positions of every doc sharing at least one bucket with ``q``"""
        runs = []
        for table_index, table in enumerate(self.tables):
            key = int(mix_keys(_keys(self.params, table_index, q[None, :]))[0])
            if key in table:
                runs.append(table[key])
        if not runs:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(runs))

    def search(self, q: VectorLike, k: int) -> SearchResult:
        q = mips.lift_query(self.transform, query_vector(q, self.dim))
        positions = self.candidates(q)
        scores = neg_sq_distances(self.docs.matrix[positions], q)
        hits = top_k(self.docs.ids[positions], scores, k)
        return SearchResult(hits, int(positions.shape[0]))

    def bucket_sizes(self, table_index: int) -> List[int]:
        return [len(run) for run in self.tables[table_index].values()]

    def size_bytes(self) -> int:
        buckets = sum(len(table) for table in self.tables)
        return FlatIndex(self.docs).size_bytes() + 4 * len(self) * self.params.r + 12 * buckets

    def to_bytes(self) -> bytes:
        p = self.params
        writer = ByteWriter(self.MAGIC).pack("IIddQ", p.r, p.m, p.w, self.width_units, p.seed)
        writer.blob(mips.transform_blob(self.transform))
        for table in self.tables:
            writer.pack("I", len(table))
            for key in sorted(table):
                run = table[key]
                writer.pack("QI", key, len(run)).array(run, "u4")
        return writer.blob(FlatIndex(self.docs).to_bytes()).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "LshIndex":
        reader = ByteReader(payload, cls.MAGIC, "LSH index")
        r, m, w, width_units, seed = reader.unpack("IIddQ")
        transform = mips.transform_from_blob(reader.blob())
        tables = []
        for _ in range(r):
            table = {}
            for _ in range(reader.one("I")):
                key, count = reader.unpack("QI")
                table[key] = reader.array(count, "u4").astype(np.int64)
            tables.append(table)
        docs = FlatIndex.from_bytes(reader.blob()).docs
        if not reader.exhausted:
            raise FormatError("LSH index: trailing bytes")
        return cls(LshParams(r, m, w, seed), docs, tables, transform, width_units)

    def __repr__(self) -> str:
        p = self.params
        mip = self.transform is not None
        return f"LshIndex(n={len(self)}, r={p.r}, m={p.m}, w={p.w:.4g}, mip={mip})"


def build_lsh(
    docs: EmbeddingSet,
    params: LshParams = LshParams(),
    relative_width: bool = True,
    mip: bool = False,
) -> LshIndex:
    """Insert every doc in every table.

    With ``relative_width`` the bucket width ``params.w`` is read in units of the median
    pairwise distance of the (lifted) collection, estimated from a seeded sample.
    """
    transform, space = mips.prepare(docs, mip)
    effective = params
    if relative_width:
        effective = replace(params, w=params.w * median_pair_distance(space, params.seed))
    tables = [
        _group(mix_keys(_keys(effective, table_index, space.matrix)))
        for table_index in range(params.r)
    ]
    index = LshIndex(effective, space, tables, transform, width_units=params.w)
    logger.debug(f"built {index!r}, {sum(len(t) for t in tables)} buckets")
    return index


def search_lsh(ix: LshIndex, q: VectorLike, k: int) -> SearchResult:
    """Top ``k`` within the candidate union; also reports how many candidates were scored"""
    return ix.search(q, k)

