import json

import numpy as np
import pytest

from tests.factories import EmbeddingSetFactory, MultiEmbeddingFactory, SparseVectorFactory
from vexir.core import MultiEmbedding
from vexir.errors import FormatError
from vexir.formats import (
    DENSE_MAGIC,
    ByteReader,
    ByteWriter,
    dense_from_bytes,
    dense_to_bytes,
    peek_magic,
    read_dense,
    read_dense_jsonl,
    read_matrix,
    read_multi,
    read_score_rows,
    read_sparse,
    read_triples,
    write_dense,
    write_dense_jsonl,
    write_matrix,
    write_multi,
    write_sparse,
)


def test_dense_file_stores_float32(tmp_path):
    docs = EmbeddingSetFactory(n=20, dim=6)
    path = tmp_path / "docs.vxe"
    write_dense(path, docs)
    loaded = read_dense(path)
    assert peek_magic(path) == DENSE_MAGIC
    assert path.stat().st_size == 4 + 8 + 20 * (8 + 6 * 4)
    np.testing.assert_array_equal(loaded.ids, docs.ids)
    np.testing.assert_array_equal(loaded.matrix, docs.matrix.astype(np.float32))
    assert loaded.matrix.dtype == np.float64


@pytest.mark.parametrize("payload", (
    b"XXXX" + b"\0" * 8,
    DENSE_MAGIC + b"\x02\0\0\0",
    ),
    ids=["magic", "truncated"]
)
def test_dense_rejects_bad_payload(payload):
    with pytest.raises(FormatError):
        dense_from_bytes(payload)


def test_dense_rejects_short_records():
    payload = dense_to_bytes(EmbeddingSetFactory(n=3, dim=2))
    with pytest.raises(FormatError):
        dense_from_bytes(payload[:-1])


def test_multi_file_keeps_token_ids(tmp_path):
    lexical = MultiEmbeddingFactory(tokens=5, dim=4)
    plain = MultiEmbedding(99, np.ones((2, 4)))
    write_multi(tmp_path / "docs.vxm", [lexical, plain])
    first, second = read_multi(tmp_path / "docs.vxm")
    assert first.id == lexical.id
    np.testing.assert_array_equal(first.token_ids, lexical.token_ids)
    np.testing.assert_allclose(first.matrix, lexical.matrix, rtol=1e-6)
    assert second.token_ids is None
    assert second.id == 99


def test_multi_file_needs_one_dimension(tmp_path):
    docs = [MultiEmbedding(0, np.ones((2, 3))), MultiEmbedding(1, np.ones((2, 4)))]
    with pytest.raises(FormatError):
        write_multi(tmp_path / "docs.vxm", docs)


def test_matrix_file(tmp_path):
    matrix = np.arange(6.0).reshape(2, 3)
    write_matrix(tmp_path / "w.vxw", matrix)
    np.testing.assert_array_equal(read_matrix(tmp_path / "w.vxw"), matrix)


def test_sparse_lines_keep_max_of_repeated_term(tmp_path):
    path = tmp_path / "docs.jsonl"
    path.write_text('{"id": 3, "w": {"7": 0.5, "7": 1.5, "2": 0.25}}\n\n{"id": 4, "w": {}}\n')
    first, second = read_sparse(path)
    assert first.doc_id == 3
    assert dict(first) == {7: 1.5, 2: 0.25}
    assert len(second) == 0


def test_sparse_lines_written_sorted(tmp_path):
    doc = SparseVectorFactory(terms=5)
    write_sparse(tmp_path / "docs.jsonl", [doc])
    record = json.loads((tmp_path / "docs.jsonl").read_text())
    assert list(record["w"]) == sorted(record["w"], key=int)
    assert read_sparse(tmp_path / "docs.jsonl") == [doc]


@pytest.mark.parametrize("line", (
    '{"id": 1}',
    '{"id": 1, "w": {"a": 1.0}}',
    "not json",
    ),
    ids=["missing", "term", "syntax"]
)
def test_sparse_lines_rejected(tmp_path, line):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(FormatError) as exc_info:
        read_sparse(path)
    assert "line 1" in str(exc_info.value)


def test_dense_lines(tmp_path):
    docs = EmbeddingSetFactory(n=4, dim=3)
    write_dense_jsonl(tmp_path / "docs.jsonl", docs)
    loaded = read_dense_jsonl(tmp_path / "docs.jsonl")
    np.testing.assert_array_equal(loaded.matrix, docs.matrix.astype(np.float32))


def test_triples(tmp_path):
    path = tmp_path / "triples.tsv"
    path.write_text("1\t2\t3\n4\t5\t6\n")
    assert read_triples(path) == [(1, 2, 3), (4, 5, 6)]
    path.write_text("1\t2\n")
    with pytest.raises(FormatError):
        read_triples(path)


def test_score_rows(tmp_path):
    path = tmp_path / "scores.jsonl"
    path.write_text('{"q": 1, "scores": [2, 1.5]}\n')
    assert read_score_rows(path) == [(1, [2.0, 1.5])]


def test_byte_records():
    payload = ByteWriter(b"TEST").pack("Id", 3, 0.5).blob(b"abc").array([1, 2], "u2").getvalue()
    reader = ByteReader(payload, b"TEST")
    assert reader.unpack("Id") == (3, 0.5)
    assert reader.blob() == b"abc"
    assert reader.array(2, "u2").tolist() == [1, 2]
    assert reader.exhausted
    with pytest.raises(FormatError):
        reader.one("B")
