import time

import numpy as np
import pytest

from tests.factories import EmbeddingSetFactory, rng
from vexir import mips
from vexir.core import EmbeddingSet
from vexir.errors import (
    DegenerateCollectionError,
    DegenerateVectorError,
    DimensionError,
    OutOfFitError,
)
from vexir.flat_index import FlatIndex


@pytest.fixture(scope="module", name="docs")
def scaled_docs():
    docs = EmbeddingSetFactory(n=100, dim=6, seed=11)
    # unequal norms so that M is decided by one doc
    return EmbeddingSet(docs.ids, docs.matrix * np.linspace(0.5, 3.0, 100)[:, None])


def test_big_m_is_the_largest_norm(docs):
    t = mips.fit(docs)
    assert t.big_m == max(float(np.linalg.norm(row)) for row in docs.matrix)
    assert t.target_dim == 7


def test_documents_land_on_the_unit_sphere(docs):
    lifted = mips.apply(mips.fit(docs), docs)
    np.testing.assert_allclose(np.linalg.norm(lifted.matrix, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(lifted.ids, docs.ids)


def test_longest_document_has_zero_extra_coordinate(docs):
    t = mips.fit(docs)
    longest = int(np.argmax(np.linalg.norm(docs.matrix, axis=1)))
    assert mips.transform_doc(t, docs.matrix[longest]).values[-1] == pytest.approx(0.0, abs=1e-7)


def test_query_is_normalised_and_padded(docs):
    q = mips.transform_query(mips.fit(docs), [3.0, 0.0, 0.0, 4.0, 0.0, 0.0])
    np.testing.assert_allclose(q.values, [0.6, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0])


def test_nearest_lifted_doc_has_largest_inner_product():
    start = time.perf_counter()
    generator = rng(2024)
    for trial in range(100):
        docs = EmbeddingSet(np.arange(1000), generator.standard_normal((1000, 32)))
        q = generator.standard_normal(32)
        t, lifted = mips.prepare(docs, mip=True)
        nearest = FlatIndex(lifted).search(mips.lift_query(t, q), 1).hits[0].doc_id
        assert nearest == int(np.argmax(docs.matrix @ q)), f"trial {trial}"
    assert time.perf_counter() - start < 5.0


def test_out_of_fit_document(docs):
    t = mips.fit(docs)
    with pytest.raises(OutOfFitError):
        mips.transform_doc(t, np.full(6, t.big_m))


def test_norm_within_slack_is_clamped(docs, caplog):
    t = mips.fit(docs)
    longest = docs.matrix[int(np.argmax(np.linalg.norm(docs.matrix, axis=1)))]
    lifted = mips.transform_doc(t, longest * (1 + 1e-12))
    assert lifted.values[-1] == 0.0
    assert "clamping" in caplog.text


@pytest.mark.parametrize("call, error", (
    (lambda t: mips.transform_query(t, np.zeros(6)), DegenerateVectorError),
    (lambda t: mips.transform_query(t, np.ones(5)), DimensionError),
    (lambda t: mips.transform_doc(t, np.ones(7)), DimensionError),
    ),
    ids=["zero-query", "query-dim", "doc-dim"]
)
def test_transform_rejects(docs, call, error):
    with pytest.raises(error):
        call(mips.fit(docs))


def test_zero_collection():
    with pytest.raises(DegenerateCollectionError):
        mips.fit(EmbeddingSet([0, 1], np.zeros((2, 3))))


def test_transform_blob():
    t = mips.MipTransform(2.5, 4)
    assert mips.transform_from_blob(mips.transform_blob(t)) == t
    assert mips.transform_blob(None) == b""
    assert mips.transform_from_blob(b"") is None


def test_prepare_without_mip_keeps_docs(docs):
    t, space = mips.prepare(docs, mip=False)
    assert t is None
    assert space is docs
    np.testing.assert_array_equal(mips.lift_query(None, [1.0, 2.0]), [1.0, 2.0])


def test_lifted_distance_falls_as_inner_product_rises(docs):
    t = mips.fit(docs)
    generator = rng(77)
    for trial in range(20):
        phi = generator.standard_normal(6)
        q = mips.transform_query(t, phi).values
        order = np.argsort(docs.matrix @ phi)
        distances = [
            float(np.sum((mips.transform_doc(t, docs.matrix[i]).values - q) ** 2)) for i in order
        ]
        assert np.all(np.diff(distances) <= 1e-12), f"trial {trial}"
