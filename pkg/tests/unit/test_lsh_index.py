import numpy as np
import pytest

from tests.factories import EmbeddingSetFactory, rng
from vexir import artifacts
from vexir.core import EmbeddingSet
from vexir.errors import ValidationError
from vexir.flat_index import FlatIndex, Metric
from vexir.harness import recall_at_k
from vexir.lsh_index import LshIndex, LshParams, build_lsh, hash_point, search_lsh


def test_hash_is_deterministic():
    params = LshParams(r=2, m=4, w=1.0, seed=9)
    psi = rng(1).standard_normal(5)
    assert hash_point(params, 1, psi) == hash_point(LshParams(2, 4, 1.0, 9), 1, psi)
    assert len(hash_point(params, 0, psi)) == 4
    assert hash_point(params, 0, psi) != hash_point(LshParams(2, 4, 1.0, 10), 0, psi)


def test_hash_table_range():
    with pytest.raises(ValidationError):
        hash_point(LshParams(r=2), 2, [1.0, 2.0])


@pytest.mark.parametrize("kwargs", (
    dict(r=0),
    dict(m=0),
    dict(w=0.0),
    dict(seed=-1),
    ),
    ids=["tables", "projections", "width", "seed"]
)
def test_params_bounds(kwargs):
    with pytest.raises(ValidationError):
        LshParams(**kwargs)


def test_collision_rate_falls_with_distance():
    params = LshParams(r=1, m=1, w=4.0, seed=17)
    generator = rng(18)
    pairs = 10_000
    distances = generator.uniform(0.0, 16.0, pairs)
    collided = np.empty(pairs, dtype=bool)
    for i, distance in enumerate(distances.tolist()):
        x = generator.standard_normal(8)
        direction = generator.standard_normal(8)
        y = x + distance * direction / np.linalg.norm(direction)
        collided[i] = hash_point(params, 0, x) == hash_point(params, 0, y)
    bins = np.digitize(distances, np.linspace(0.0, 16.0, 11)[1:-1])
    rates = [collided[bins == b].mean() for b in range(10)]
    inversions = sum(later > earlier for earlier, later in zip(rates, rates[1:]))
    assert inversions <= 1, rates
    assert rates[0] > rates[-1]


@pytest.fixture(scope="module", name="docs")
def random_docs():
    return EmbeddingSetFactory(n=2000, dim=16, seed=5)


def _mean_recall(index, docs, queries, k=10, metric=Metric.euclidean):
    oracle = FlatIndex(docs, metric)
    return np.mean([
        recall_at_k(index.search(q, k).hits, oracle.search(q, k).hits, k) for q in queries
    ])


def test_recall_against_flat(docs):
    queries = rng(6).standard_normal((30, 16))
    index = build_lsh(docs, LshParams(r=16, m=8, w=4.0, seed=3))
    assert _mean_recall(index, docs, queries) >= 0.8


def test_candidates_are_reported(docs):
    index = build_lsh(docs, LshParams(r=4, m=12, w=0.5, seed=3))
    result = search_lsh(index, docs.matrix[3], 10)
    assert 1 <= result.candidates <= len(docs)
    assert result.hits[0].doc_id == 3
    assert len(result.hits) == min(10, result.candidates)


def test_width_is_relative_to_median_distance(docs):
    relative = build_lsh(docs, LshParams(r=1, m=1, w=2.0, seed=3))
    absolute = build_lsh(docs, LshParams(r=1, m=1, w=2.0, seed=3), relative_width=False)
    assert absolute.params.w == 2.0
    assert relative.params.w > 2.0
    assert relative.width_units == 2.0


def test_mip_lifted_index_ranks_by_inner_product():
    base = EmbeddingSetFactory(n=500, dim=8, seed=8)
    docs = EmbeddingSet(base.ids, base.matrix * np.linspace(0.2, 2.0, 500)[:, None])
    index = build_lsh(docs, LshParams(r=32, m=4, w=4.0, seed=1), mip=True)
    queries = rng(9).standard_normal((20, 8))
    assert index.dim == 8
    assert _mean_recall(index, docs, queries, 5, Metric.inner_product) >= 0.8


def test_bytes_keep_tables(docs):
    index = build_lsh(docs.subset(range(300)), LshParams(r=3, m=4, w=1.0, seed=2), mip=True)
    loaded = artifacts.loads(index.to_bytes())
    assert isinstance(loaded, LshIndex)
    assert loaded.params == index.params
    assert [loaded.bucket_sizes(t) for t in range(3)] == [index.bucket_sizes(t) for t in range(3)]
    q = rng(3).standard_normal(16)
    assert loaded.search(q, 5).candidates == index.search(q, 5).candidates


@pytest.mark.slow
def test_recall_on_ten_thousand_docs():
    docs = EmbeddingSetFactory(n=10_000, dim=32, seed=21)
    queries = rng(22).standard_normal((50, 32))
    index = build_lsh(docs, LshParams(r=16, m=8, w=4.0, seed=4))
    assert _mean_recall(index, docs, queries) >= 0.8
