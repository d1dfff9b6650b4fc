"""Vector quantisation: k-means codebooks, IVF partitions, product quantisation and IVFPQ.

All squared distances to centroids go through :func:`centroid_distances`, so k-means, list
membership, probing, :func:`quantise` and PQ tables agree on every tie (lowest centroid index
wins).

PQ codes take one byte per sub-index when ``k <= 256`` and are bit-packed to
``ceil(log2 k)`` bits per sub-index above that.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, log2
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from . import mips
from .artifacts import register
from .core import (
    DenseVector,
    EmbeddingSet,
    ScoredHit,
    SearchResult,
    VectorLike,
    as_vector,
    neg_sq_distances,
    top_k,
)
from .errors import (
    CardinalityError,
    CodeError,
    DimensionError,
    FormatError,
    ProbeError,
    SubspaceError,
    ValidationError,
)
from .flat_index import FlatIndex, query_vector
from .formats import ByteReader, ByteWriter

# float64 entries per broadcast block of centroid_distances
DISTANCE_BLOCK = 1 << 22
BYTE_CODES = 256


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


@dataclass(frozen=True, eq=False)
class Codebook:
    """``k`` centroids; ``objective`` keeps the k-means trace that produced them"""

    centroids: np.ndarray
    objective: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] < 1 or centroids.shape[1] < 1:
            raise ValidationError(f"codebook needs a (k, dim) matrix, got {centroids.shape}")
        if not np.all(np.isfinite(centroids)):
            raise ValidationError("codebook centroids must be finite")
        centroids.setflags(write=False)
        object.__setattr__(self, "centroids", centroids)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def centroid_distances(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared distance of every row to every centroid as an ``(n, k)`` matrix.

    Direct differences, blocked over rows; a row gets the same values alone or in a batch.
    """
    rows = np.atleast_2d(rows)
    k, dim = centroids.shape
    step = max(1, DISTANCE_BLOCK // (k * dim))
    out = np.empty((rows.shape[0], k))
    for start in range(0, rows.shape[0], step):
        diff = rows[start:start + step, None, :] - centroids[None, :, :]
        out[start:start + step] = np.sum(diff * diff, axis=2)
    return out


def assign(matrix: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid of every row and the squared distance to it"""
    dists = centroid_distances(matrix, centroids)
    labels = np.argmin(dists, axis=1)
    return labels, dists[np.arange(dists.shape[0]), labels]


def _kmeans_pp(matrix: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = matrix.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((matrix - matrix[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            # every point already coincides with a centre
            pick = int(rng.integers(n))
        chosen.append(pick)
        closest = np.minimum(closest, np.sum((matrix - matrix[pick]) ** 2, axis=1))
    return matrix[chosen].copy()


def lloyd(matrix: np.ndarray, k: int, iters: int, seed: int, stream: int = 0) -> Codebook:
    """k-means++ seeding followed by ``iters`` Lloyd rounds on a raw ``(n, dim)`` matrix"""
    n = matrix.shape[0]
    if k < 1 or k > n:
        raise CardinalityError(f"cannot train {k} centroids on {n} points")
    if iters < 1:
        raise ValidationError(f"k-means needs at least one iteration, got {iters}")
    centroids = _kmeans_pp(matrix, k, _rng(seed, stream))
    trace = []
    for iteration in range(iters):
        labels, dists = assign(matrix, centroids)
        trace.append(float(dists.sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, matrix)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        for empty in np.flatnonzero(~filled).tolist():
            largest = int(np.argmax(counts))
            members = np.flatnonzero(labels == largest)
            far = members[int(np.argmax(dists[members]))]
            logger.warning(
                f"k-means iteration {iteration}: centroid {empty} empty, "
                f"re-seeded from cluster {largest}"
            )
            centroids[empty] = matrix[far]
            counts[largest] -= 1
            counts[empty] = 1
            dists[far] = 0.0
        logger.debug(f"k-means iteration {iteration}: objective {trace[-1]:.6g}")
    return Codebook(centroids, tuple(trace))


def kmeans(data: Union[EmbeddingSet, np.ndarray], k: int, iters: int, seed: int) -> Codebook:
    matrix = data.matrix if isinstance(data, EmbeddingSet) else np.asarray(data, dtype=np.float64)
    return lloyd(matrix, k, iters, seed)


def quantise(cb: Codebook, psi: VectorLike) -> Tuple[int, DenseVector]:
    psi = as_vector(psi)
    if psi.shape[0] != cb.dim:
        raise DimensionError(f"vector has dim {psi.shape[0]}, codebook has dim {cb.dim}")
    labels, _ = assign(psi[None, :], cb.centroids)
    index = int(labels[0])
    return index, DenseVector(cb.centroids[index])


def _probe(cb: Codebook, q: np.ndarray, p: int) -> np.ndarray:
    if not 1 <= p <= cb.k:
        raise ProbeError(f"probe count must be in [1, {cb.k}], got {p}")
    dists = centroid_distances(q, cb.centroids)[0]
    return np.argsort(dists, kind="stable")[:p]


def _write_codebook(writer: ByteWriter, cb: Codebook):
    writer.pack("II", cb.k, cb.dim).array(cb.centroids, "f4")


def _read_codebook(reader: ByteReader) -> Codebook:
    k, dim = reader.unpack("II")
    return Codebook(reader.array(k * dim, "f4").reshape(k, dim).astype(np.float64))


def _write_lists(writer: ByteWriter, lists: Sequence[np.ndarray]):
    for members in lists:
        writer.pack("I", len(members)).array(members, "u4")


def _read_lists(reader: ByteReader, k: int) -> List[np.ndarray]:
    return [reader.array(reader.one("I"), "u4").astype(np.int64) for _ in range(k)]


def _partition(labels: np.ndarray, k: int) -> List[np.ndarray]:
    order = np.argsort(labels, kind="stable")
    cuts = np.searchsorted(labels[order], np.arange(1, k))
    return np.split(order, cuts)


# -- IVF ---------------------------------------------------------------------------------


@register
class IvfIndex:
    """Docs partitioned by their nearest coarse centroid; ``lists`` hold doc positions"""

    MAGIC = b"VXI1"

    def __init__(self, codebook, docs, lists, transform=None, iters=0, seed=0):
        self.codebook: Codebook = codebook
        self.docs: EmbeddingSet = docs
        self.lists: List[np.ndarray] = lists
        self.transform: Optional[mips.MipTransform] = transform
        self.iters = iters
        self.seed = seed

    @property
    def dim(self) -> int:
        return self.docs.dim if self.transform is None else self.transform.source_dim

    def __len__(self) -> int:
        return len(self.docs)

    def search(self, q: VectorLike, k: int, p: int = 1) -> SearchResult:
        q = mips.lift_query(self.transform, query_vector(q, self.dim))
        probed = _probe(self.codebook, q, p)
        positions = np.concatenate([self.lists[i] for i in probed.tolist()])
        scores = neg_sq_distances(self.docs.matrix[positions], q)
        return SearchResult(top_k(self.docs.ids[positions], scores, k), int(positions.shape[0]))

    def size_bytes(self) -> int:
        return FlatIndex(self.docs).size_bytes() + self.codebook.centroids.size * 4 + 4 * len(self)

    def to_bytes(self) -> bytes:
        writer = ByteWriter(self.MAGIC).pack("IIIQ", self.codebook.k, 0, self.iters, self.seed)
        writer.blob(mips.transform_blob(self.transform))
        _write_codebook(writer, self.codebook)
        _write_lists(writer, self.lists)
        return writer.blob(FlatIndex(self.docs).to_bytes()).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "IvfIndex":
        reader = ByteReader(payload, cls.MAGIC, "IVF index")
        k, _, iters, seed = reader.unpack("IIIQ")
        transform = mips.transform_from_blob(reader.blob())
        codebook = _read_codebook(reader)
        if codebook.k != k:
            raise FormatError(f"IVF index: header says k={k}, codebook has {codebook.k}")
        lists = _read_lists(reader, k)
        docs = FlatIndex.from_bytes(reader.blob()).docs
        return cls(codebook, docs, lists, transform, iters, seed)

    def __repr__(self) -> str:
        return f"IvfIndex(n={len(self)}, k={self.codebook.k}, mip={self.transform is not None})"


def build_ivf(
    docs: EmbeddingSet, k: int, iters: int = 20, seed: int = 0, mip: bool = False
) -> IvfIndex:
    transform, space = mips.prepare(docs, mip)
    codebook = lloyd(space.matrix, k, iters, seed)
    labels, _ = assign(space.matrix, codebook.centroids)
    index = IvfIndex(codebook, space, _partition(labels, k), transform, iters, seed)
    logger.debug(f"built {index!r}")
    return index


def search_ivf(ix: IvfIndex, q: VectorLike, p: int, k: int) -> List[ScoredHit]:
    """Exact search inside the ``p`` lists whose centroids are nearest to ``q``"""
    return ix.search(q, k, p).hits


# -- PQ ----------------------------------------------------------------------------------


def code_bits(k: int) -> int:
    return ceil(log2(k)) if k > 1 else 0


def pack_codes(codes: np.ndarray, k: int) -> bytes:
    """One byte per sub-index up to 256 centroids, ``ceil(log2 k)`` bits each beyond"""
    codes = np.ascontiguousarray(codes).reshape(-1)
    if k <= BYTE_CODES:
        return codes.astype(np.uint8).tobytes()
    bits = code_bits(k)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    planes = (codes.astype(np.uint32)[:, None] >> shifts) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1)).tobytes()


def unpack_codes(payload: bytes, count: int, m: int, k: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size != packed_size(count, m, k):
        raise FormatError(f"{raw.size} code bytes for {count} vectors of {m} sub-indices")
    if k <= BYTE_CODES:
        return raw[: count * m].astype(np.int64).reshape(count, m)
    bits = code_bits(k)
    planes = np.unpackbits(raw, count=count * m * bits).reshape(-1, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return (planes @ weights).reshape(count, m)


def packed_size(count: int, m: int, k: int) -> int:
    if k <= BYTE_CODES:
        return count * m
    return ceil(count * m * code_bits(k) / 8)


@dataclass(frozen=True, eq=False)
class PqCodec:

    m: int
    k: int
    sub_codebooks: Tuple[Codebook, ...]

    def __post_init__(self):
        if len(self.sub_codebooks) != self.m:
            raise ValidationError(f"{len(self.sub_codebooks)} sub-codebooks for m={self.m}")
        if any(cb.k != self.k for cb in self.sub_codebooks):
            raise ValidationError(f"every sub-codebook must hold k={self.k} centroids")
        if len({cb.dim for cb in self.sub_codebooks}) != 1:
            raise ValidationError("sub-codebooks must share one sub-dimension")

    @property
    def sub_dim(self) -> int:
        return self.sub_codebooks[0].dim

    @property
    def dim(self) -> int:
        return self.m * self.sub_dim

    def split(self, matrix: np.ndarray) -> List[np.ndarray]:
        step = self.sub_dim
        return [matrix[..., j * step:(j + 1) * step] for j in range(self.m)]

    def encode_matrix(self, matrix: np.ndarray) -> np.ndarray:
        codes = np.empty((matrix.shape[0], self.m), dtype=np.int64)
        for j, sub in enumerate(self.split(matrix)):
            codes[:, j], _ = assign(sub, self.sub_codebooks[j].centroids)
        return codes

    def decode_matrix(self, codes: np.ndarray) -> np.ndarray:
        return np.hstack([self.sub_codebooks[j].centroids[codes[:, j]] for j in range(self.m)])

    def check(self, code: np.ndarray) -> np.ndarray:
        code = np.asarray(code, dtype=np.int64)
        if code.shape[-1] != self.m:
            raise CodeError(f"code has {code.shape[-1]} sub-indices, codec has m={self.m}")
        if np.any(code < 0) or np.any(code >= self.k):
            raise CodeError(f"sub-index outside [0, {self.k})")
        return code

    def write(self, writer: ByteWriter):
        writer.pack("II", self.m, self.k)
        for cb in self.sub_codebooks:
            _write_codebook(writer, cb)

    @classmethod
    def read(cls, reader: ByteReader) -> "PqCodec":
        m, k = reader.unpack("II")
        return cls(m, k, tuple(_read_codebook(reader) for _ in range(m)))


def pq_train(
    data: Union[EmbeddingSet, np.ndarray], m: int, k: int, iters: int, seed: int
) -> PqCodec:
    matrix = data.matrix if isinstance(data, EmbeddingSet) else np.asarray(data, dtype=np.float64)
    dim = matrix.shape[1]
    if m < 1 or dim % m:
        raise SubspaceError(f"{m} sub-vectors do not divide dimension {dim}")
    step = dim // m
    books = tuple(
        lloyd(matrix[:, j * step:(j + 1) * step], k, iters, seed, stream=j + 1) for j in range(m)
    )
    return PqCodec(m, k, books)


def pq_encode(codec: PqCodec, psi: VectorLike) -> np.ndarray:
    psi = as_vector(psi)
    if psi.shape[0] != codec.dim:
        raise DimensionError(f"vector has dim {psi.shape[0]}, codec has dim {codec.dim}")
    return codec.encode_matrix(psi[None, :])[0]


def pq_decode(codec: PqCodec, code: Sequence[int]) -> DenseVector:
    return DenseVector(codec.decode_matrix(codec.check(code)[None, :])[0])


def adc_tables(codec: PqCodec, q: VectorLike) -> np.ndarray:
    """``(m, k)`` table of squared distances from each query sub-vector to each centroid"""
    q = as_vector(q)
    if q.shape[0] != codec.dim:
        raise DimensionError(f"query has dim {q.shape[0]}, codec has dim {codec.dim}")
    tables = np.empty((codec.m, codec.k))
    for j, sub in enumerate(codec.split(q)):
        tables[j] = centroid_distances(sub, codec.sub_codebooks[j].centroids)[0]
    return tables


def adc_distance(tables: np.ndarray, code: Sequence[int]) -> float:
    code = np.asarray(code, dtype=np.int64)
    m, k = tables.shape
    if code.shape != (m,) or np.any(code < 0) or np.any(code >= k):
        raise CodeError(f"code {code.tolist()} does not fit {m} tables of {k} entries")
    return float(tables[np.arange(m), code].sum())


def _adc_scan(tables: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return tables[np.arange(tables.shape[0]), codes].sum(axis=1)


@register
class PqIndex:

    MAGIC = b"VXP1"

    def __init__(self, codec, codes, ids, transform=None, iters=0, seed=0):
        self.codec: PqCodec = codec
        self.codes: np.ndarray = codes
        self.ids: np.ndarray = np.asarray(ids, dtype=np.uint64)
        self.transform: Optional[mips.MipTransform] = transform
        self.iters = iters
        self.seed = seed

    @property
    def dim(self) -> int:
        return self.codec.dim if self.transform is None else self.transform.source_dim

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    def search(self, q: VectorLike, k: int) -> SearchResult:
        q = mips.lift_query(self.transform, query_vector(q, self.dim))
        scores = -_adc_scan(adc_tables(self.codec, q), self.codes)
        return SearchResult(top_k(self.ids, scores, k), len(self))

    def code_bytes(self) -> bytes:
        return pack_codes(self.codes, self.codec.k)

    def size_bytes(self) -> int:
        centroids = sum(cb.centroids.size for cb in self.codec.sub_codebooks) * 4
        return packed_size(len(self), self.codec.m, self.codec.k) + 8 * len(self) + centroids

    def to_bytes(self) -> bytes:
        c = self.codec
        writer = ByteWriter(self.MAGIC).pack("IIIQI", c.k, c.m, self.iters, self.seed, len(self))
        writer.blob(mips.transform_blob(self.transform))
        c.write(writer)
        writer.array(self.ids, "u8")
        return writer.blob(self.code_bytes()).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "PqIndex":
        reader = ByteReader(payload, cls.MAGIC, "PQ index")
        k, m, iters, seed, n = reader.unpack("IIIQI")
        transform = mips.transform_from_blob(reader.blob())
        codec = PqCodec.read(reader)
        if (codec.k, codec.m) != (k, m):
            raise FormatError("PQ index: header and codec disagree")
        ids = reader.array(n, "u8")
        codes = unpack_codes(reader.blob(), n, m, k)
        return cls(codec, codes, ids, transform, iters, seed)

    def __repr__(self) -> str:
        return f"PqIndex(n={len(self)}, m={self.codec.m}, k={self.codec.k})"


def build_pq(
    docs: EmbeddingSet, m: int, k: int, iters: int = 20, seed: int = 0, mip: bool = False
) -> PqIndex:
    transform, space = mips.prepare(docs, mip)
    codec = pq_train(space.matrix, m, k, iters, seed)
    index = PqIndex(codec, codec.encode_matrix(space.matrix), space.ids, transform, iters, seed)
    logger.debug(f"built {index!r}")
    return index


def search_pq(ix: PqIndex, q: VectorLike, k: int) -> List[ScoredHit]:
    """Exhaustive ADC scan over every stored code"""
    return ix.search(q, k).hits


# -- IVFPQ -------------------------------------------------------------------------------


@register
class IvfPqIndex:
    """Coarse partitions whose residuals ``psi - mu_list`` share one product quantiser"""

    MAGIC = b"VXQ1"

    def __init__(self, coarse, codec, lists, codes, ids, transform=None, iters=0, seed=0):
        self.coarse: Codebook = coarse
        self.codec: PqCodec = codec
        self.lists: List[np.ndarray] = lists
        self.codes: List[np.ndarray] = codes
        self.ids: np.ndarray = np.asarray(ids, dtype=np.uint64)
        self.transform: Optional[mips.MipTransform] = transform
        self.iters = iters
        self.seed = seed

    @property
    def dim(self) -> int:
        return self.coarse.dim if self.transform is None else self.transform.source_dim

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def search(self, q: VectorLike, k: int, p: int = 1) -> SearchResult:
        q = mips.lift_query(self.transform, query_vector(q, self.dim))
        positions, scores = [], []
        for list_index in _probe(self.coarse, q, p).tolist():
            if not len(self.lists[list_index]):
                continue
            # the query residual is taken against each probed list's own centroid
            tables = adc_tables(self.codec, q - self.coarse.centroids[list_index])
            positions.append(self.lists[list_index])
            scores.append(-_adc_scan(tables, self.codes[list_index]))
        if not positions:
            return SearchResult([], 0)
        positions = np.concatenate(positions)
        hits = top_k(self.ids[positions], np.concatenate(scores), k)
        return SearchResult(hits, int(positions.shape[0]))

    def size_bytes(self) -> int:
        c = self.codec
        centroids = (self.coarse.centroids.size + sum(cb.centroids.size for cb in c.sub_codebooks))
        return packed_size(len(self), c.m, c.k) + 12 * len(self) + 4 * centroids

    def to_bytes(self) -> bytes:
        c = self.codec
        header = (self.coarse.k, c.m, c.k, self.iters, self.seed, len(self))
        writer = ByteWriter(self.MAGIC).pack("IIIIQI", *header)
        writer.blob(mips.transform_blob(self.transform))
        _write_codebook(writer, self.coarse)
        c.write(writer)
        writer.array(self.ids, "u8")
        _write_lists(writer, self.lists)
        for codes in self.codes:
            writer.blob(pack_codes(codes, c.k))
        return writer.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "IvfPqIndex":
        reader = ByteReader(payload, cls.MAGIC, "IVFPQ index")
        k_coarse, m, k_pq, iters, seed, n = reader.unpack("IIIIQI")
        transform = mips.transform_from_blob(reader.blob())
        coarse = _read_codebook(reader)
        codec = PqCodec.read(reader)
        if (coarse.k, codec.m, codec.k) != (k_coarse, m, k_pq):
            raise FormatError("IVFPQ index: header and codebooks disagree")
        ids = reader.array(n, "u8")
        lists = _read_lists(reader, k_coarse)
        codes = [unpack_codes(reader.blob(), len(members), m, k_pq) for members in lists]
        return cls(coarse, codec, lists, codes, ids, transform, iters, seed)

    def __repr__(self) -> str:
        c = self.codec
        return f"IvfPqIndex(n={len(self)}, k_coarse={self.coarse.k}, m={c.m}, k_pq={c.k})"


def build_ivfpq(
    docs: EmbeddingSet,
    k_coarse: int,
    m: int,
    k_pq: int,
    iters: int = 20,
    seed: int = 0,
    mip: bool = False,
) -> IvfPqIndex:
    transform, space = mips.prepare(docs, mip)
    coarse = lloyd(space.matrix, k_coarse, iters, seed)
    labels, _ = assign(space.matrix, coarse.centroids)
    residuals = space.matrix - coarse.centroids[labels]
    codec = pq_train(residuals, m, k_pq, iters, seed)
    all_codes = codec.encode_matrix(residuals)
    lists = _partition(labels, k_coarse)
    codes = [all_codes[members] for members in lists]
    index = IvfPqIndex(coarse, codec, lists, codes, space.ids, transform, iters, seed)
    logger.debug(f"built {index!r}")
    return index


def search_ivfpq(ix: IvfPqIndex, q: VectorLike, p: int, k: int) -> List[ScoredHit]:
    return ix.search(q, k, p).hits
