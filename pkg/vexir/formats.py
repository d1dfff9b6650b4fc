"""On-disk formats: dense (VXE1), multi-embedding (VXM1) and matrix (VXW1) binaries,
sparse and dense JSON Lines, plus the little-endian record helpers index artifacts use.

Every binary starts with a 4 byte magic; readers reject anything else. Reals are stored
as float32 and widened to float64 when read.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .core import EmbeddingSet, MultiEmbedding, SparseVector
from .errors import DataError, FormatError

PathLike = Union[str, Path]

DENSE_MAGIC = b"VXE1"
MULTI_MAGIC = b"VXM1"
MATRIX_MAGIC = b"VXW1"


class ByteWriter:
    """Append-only little-endian record builder"""

    def __init__(self, magic: bytes):
        self._buffer = io.BytesIO()
        self._buffer.write(magic)

    def pack(self, fmt: str, *values) -> "ByteWriter":
        self._buffer.write(struct.pack("<" + fmt, *values))
        return self

    def array(self, values, dtype: str) -> "ByteWriter":
        little = np.dtype(dtype).newbyteorder("<")
        self._buffer.write(np.ascontiguousarray(values, dtype=little).tobytes())
        return self

    def raw(self, payload: bytes) -> "ByteWriter":
        self._buffer.write(payload)
        return self

    def blob(self, payload: bytes) -> "ByteWriter":
        """Length-prefixed (u64) byte string"""
        return self.pack("Q", len(payload)).raw(payload)

    def getvalue(self) -> bytes:
        return self._buffer.getvalue()


class ByteReader:
    """Cursor over a payload; running past the end raises :class:`FormatError`"""

    def __init__(self, payload: bytes, magic: bytes = None, what: str = "artifact"):
        self._view = memoryview(payload)
        self._offset = 0
        self.what = what
        if magic is not None:
            found = self.raw(4)
            if found != magic:
                raise FormatError(f"{what}: expected magic {magic!r}, found {found!r}")

    def _take(self, size: int) -> memoryview:
        end = self._offset + size
        if size < 0 or end > len(self._view):
            raise FormatError(f"{self.what}: truncated at byte {self._offset}")
        chunk = self._view[self._offset:end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))

    def one(self, fmt: str):
        return self.unpack(fmt)[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self._take(count * dt.itemsize), dtype=dt).copy()

    def raw(self, size: int) -> bytes:
        return bytes(self._take(size))

    def blob(self) -> bytes:
        return self.raw(self.one("Q"))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._view)


def peek_magic(path: PathLike) -> bytes:
    with open(path, "rb") as stream:
        return stream.read(4)


def _dense_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def dense_to_bytes(docs: EmbeddingSet) -> bytes:
    records = np.empty(len(docs), dtype=_dense_dtype(docs.dim))
    records["id"] = docs.ids
    records["v"] = docs.matrix
    return ByteWriter(DENSE_MAGIC).pack("II", len(docs), docs.dim).raw(records.tobytes()).getvalue()


def dense_from_bytes(payload: bytes) -> EmbeddingSet:
    reader = ByteReader(payload, DENSE_MAGIC, "dense embedding file")
    n, dim = reader.unpack("II")
    dt = _dense_dtype(dim)
    records = np.frombuffer(reader.raw(n * dt.itemsize), dtype=dt)
    return EmbeddingSet(records["id"].copy(), records["v"].astype(np.float64))


def write_dense(path: PathLike, docs: EmbeddingSet):
    Path(path).write_bytes(dense_to_bytes(docs))
    logger.debug(f"wrote {len(docs)} x {docs.dim} embeddings to {path}")


def read_dense(path: PathLike) -> EmbeddingSet:
    docs = dense_from_bytes(Path(path).read_bytes())
    logger.debug(f"read {len(docs)} x {docs.dim} embeddings from {path}")
    return docs


def write_multi(path: PathLike, docs: Sequence[MultiEmbedding]):
    dim = docs[0].dim if docs else 0
    writer = ByteWriter(MULTI_MAGIC).pack("II", len(docs), dim)
    for doc in docs:
        if doc.dim != dim:
            raise FormatError(f"multi-embedding {doc.id} has dim {doc.dim}, file has {dim}")
        lexical = doc.token_ids is not None
        writer.pack("QIB", doc.id, len(doc), int(lexical))
        if lexical:
            writer.array(doc.token_ids, "u4")
        writer.array(doc.matrix, "f4")
    Path(path).write_bytes(writer.getvalue())


def read_multi(path: PathLike) -> List[MultiEmbedding]:
    reader = ByteReader(Path(path).read_bytes(), MULTI_MAGIC, "multi-embedding file")
    count, dim = reader.unpack("II")
    docs = []
    for _ in range(count):
        doc_id, tokens, flag = reader.unpack("QIB")
        if flag not in (0, 1):
            raise FormatError(f"multi-embedding {doc_id}: bad token-id flag {flag}")
        token_ids = reader.array(tokens, "u4") if flag else None
        matrix = reader.array(tokens * dim, "f4").reshape(tokens, dim).astype(np.float64)
        docs.append(MultiEmbedding(doc_id, matrix, token_ids))
    return docs


def write_matrix(path: PathLike, matrix: np.ndarray):
    matrix = np.atleast_2d(matrix)
    rows, cols = matrix.shape
    writer = ByteWriter(MATRIX_MAGIC).pack("II", rows, cols).array(matrix, "f4")
    Path(path).write_bytes(writer.getvalue())


def read_matrix(path: PathLike) -> np.ndarray:
    reader = ByteReader(Path(path).read_bytes(), MATRIX_MAGIC, "projection matrix file")
    rows, cols = reader.unpack("II")
    return reader.array(rows * cols, "f4").reshape(rows, cols).astype(np.float64)


def _keep_max(pairs) -> dict:
    # a term repeated inside one JSON object keeps its highest weight
    record = {}
    for key, value in pairs:
        previous = record.get(key)
        if isinstance(previous, (int, float)) and isinstance(value, (int, float)):
            value = max(previous, value)
        record[key] = value
    return record


def _iter_jsonl(stream: Iterable[str], what: str) -> Iterator[Tuple[int, dict]]:
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line, object_pairs_hook=_keep_max)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{what}, line {lineno}: {exc.msg}") from exc


def read_sparse(path: PathLike) -> List[SparseVector]:
    docs = []
    with open(path, encoding="utf-8") as stream:
        for lineno, record in _iter_jsonl(stream, str(path)):
            try:
                docs.append(SparseVector(record["w"], doc_id=record["id"]))
            except DataError:
                raise
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise FormatError(f"{path}, line {lineno}: expected {{'id', 'w'}}") from exc
    return docs


def write_sparse(path: PathLike, docs: Iterable[SparseVector]):
    with open(path, "w", encoding="utf-8") as stream:
        for position, doc in enumerate(docs):
            doc_id = position if doc.doc_id is None else doc.doc_id
            weights = {str(term): weight for term, weight in sorted(doc.items())}
            stream.write(json.dumps({"id": doc_id, "w": weights}) + "\n")


def read_dense_jsonl(path: PathLike) -> EmbeddingSet:
    ids, rows = [], []
    with open(path, encoding="utf-8") as stream:
        for lineno, record in _iter_jsonl(stream, str(path)):
            try:
                ids.append(int(record["id"]))
                rows.append(record["v"])
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}, line {lineno}: expected {{'id', 'v'}}") from exc
    return EmbeddingSet(ids, rows)


def write_dense_jsonl(path: PathLike, docs: EmbeddingSet):
    with open(path, "w", encoding="utf-8") as stream:
        for doc_id, row in zip(docs.ids.tolist(), docs.matrix.astype(np.float32).tolist()):
            stream.write(json.dumps({"id": doc_id, "v": row}) + "\n")


def read_triples(path: PathLike) -> List[Tuple[int, int, int]]:
    triples = []
    with open(path, encoding="utf-8") as stream:
        for lineno, line in enumerate(stream, 1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            try:
                query_id, pos_id, neg_id = (int(f) for f in fields)
            except ValueError as exc:
                raise FormatError(f"{path}, line {lineno}: expected 3 integer columns") from exc
            triples.append((query_id, pos_id, neg_id))
    return triples


def read_score_rows(path: PathLike) -> List[Tuple[int, List[float]]]:
    rows = []
    with open(path, encoding="utf-8") as stream:
        for lineno, record in _iter_jsonl(stream, str(path)):
            try:
                rows.append((int(record["q"]), [float(s) for s in record["scores"]]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}, line {lineno}: expected {{'q', 'scores'}}") from exc
    return rows