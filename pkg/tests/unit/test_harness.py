import json

import numpy as np
import pytest
from delayed_assert import assert_expectations, expect
from pydantic import ValidationError

from tests.factories import RunConfigDictFactory, rng
from vexir import harness
from vexir.config import IndexConfig, IndexKind, IvfConfig, build_config
from vexir.core import EmbeddingSet, ScoredHit
from vexir.errors import ConfigError, MetricError
from vexir.flat_index import FlatIndex, Metric
from vexir.formats import write_dense, write_dense_jsonl, write_multi, write_sparse
from vexir.harness import (
    EvalReport,
    TunedIndex,
    gen_multi,
    gen_multi_queries,
    gen_queries,
    gen_sparse,
    gen_sparse_queries,
    gen_synthetic,
    index_kind,
    load_or_build,
    read_embeddings,
    recall_at_k,
    run_pipeline,
    token_index_config,
    truth_record,
)
from vexir.quant_index import build_ivf


def hits(*ids):
    return [ScoredHit(doc_id, -float(rank), rank) for rank, doc_id in enumerate(ids, 1)]


def test_synthetic_data_is_seeded():
    first = gen_synthetic(200, 8, 4, seed=3)
    again = gen_synthetic(200, 8, 4, seed=3)
    other = gen_synthetic(200, 8, 4, seed=4)
    np.testing.assert_array_equal(first.docs.matrix, again.docs.matrix)
    np.testing.assert_array_equal(first.labels, again.labels)
    assert not np.array_equal(first.docs.matrix, other.docs.matrix)
    assert np.bincount(first.labels).tolist() == [50, 50, 50, 50]


def test_queries_use_their_own_stream():
    data = gen_synthetic(100, 4, 2, seed=5)
    queries = gen_queries(data.means, 10, seed=5)
    assert len(queries) == 10
    assert not np.allclose(queries.matrix, data.docs.matrix[:10])
    np.testing.assert_array_equal(queries.matrix, gen_queries(data.means, 10, seed=5).matrix)


def test_multi_docs_have_a_classification_row():
    data = gen_multi(30, 4, 3, seed=6, tokens=10, vocab=50)
    lengths = [len(doc) for doc in data.docs]
    assert min(lengths) >= 5
    assert max(lengths) <= 15
    assert all(doc.token_ids[0] == 0 for doc in data.docs)
    assert all(doc.token_ids[1:].min() >= 1 for doc in data.docs)
    queries = gen_multi_queries(data.means, 4, seed=6, tokens=3, vocab=50)
    assert [len(q) for q in queries] == [3, 3, 3, 3]


def test_sparse_data():
    docs = gen_sparse(20, 100, seed=7, terms=10)
    assert [d.doc_id for d in docs] == list(range(20))
    assert all(1 <= len(d) <= 10 for d in docs)
    assert docs == gen_sparse(20, 100, seed=7, terms=10)
    assert len(gen_sparse_queries(5, 100, seed=7)) == 5


@pytest.mark.parametrize("call", (
    lambda: gen_synthetic(2, 4, 3, seed=0),
    lambda: gen_synthetic(10, 0, 3, seed=0),
    lambda: gen_queries(np.zeros((2, 2)), 0, seed=0),
    lambda: gen_multi(10, 4, 2, seed=0, tokens=1),
    lambda: gen_sparse(0, 10, seed=0),
    ),
    ids=["clusters", "dim", "queries", "tokens", "sparse"]
)
def test_generator_shapes(call):
    with pytest.raises(ConfigError):
        call()


def test_truth_record():
    data = gen_synthetic(6, 2, 3, seed=1)
    record = truth_record(data, 1)
    assert record["clusters"] == 3
    assert len(record["labels"]) == 6
    assert json.loads(json.dumps(record)) == record


def test_recall_at_k():
    expect(recall_at_k(hits(1, 2, 3), hits(1, 2, 3), 3) == 1.0)
    expect(recall_at_k(hits(3, 9, 8), hits(1, 2, 3), 3) == pytest.approx(1 / 3))
    expect(recall_at_k(hits(2, 1), hits(1, 2, 3), 2) == 1.0)
    expect(recall_at_k(hits(4, 1), hits(1, 2, 3), 1) == 0.0)
    assert_expectations()


@pytest.mark.parametrize("k, oracle", ((0, hits(1)), (3, hits(1, 2))), ids=["zero", "short"])
def test_recall_rejects(k, oracle):
    with pytest.raises(MetricError):
        recall_at_k(hits(1, 2, 3), oracle, k)


REPORT = dict(
    mode="dense", index="flat", seed=0, docs=10, queries=2, k=1, recall_at_k={1: 1.0},
    oracle=True, candidates_mean=10.0, candidates_max=10, index_size_bytes=100,
    build_ms=0.1, latency_us_mean=1.0, latency_us_median=1.0, latency_us_p99=1.0,
)


@pytest.mark.parametrize("field, value", (
    ("recall_at_k", {1: 1.5}),
    ("docs", -1),
    ("latency_us_p99", -0.5),
    ("colour", "blue"),
    ),
    ids=["recall", "docs", "latency", "extra"]
)
def test_report_bounds(field, value):
    with pytest.raises(ValidationError):
        EvalReport(**{**REPORT, field: value})


def test_report_non_timing_fields():
    fields = EvalReport(**REPORT).non_timing()
    assert "build_ms" not in fields
    assert "latency_us_mean" not in fields
    assert fields["recall_at_k"] == {"1": 1.0}


@pytest.fixture(name="dense_files")
def dense_files(tmp_path):
    data = gen_synthetic(400, 8, 8, seed=11)
    write_dense(tmp_path / "docs.vxe", data.docs)
    write_dense(tmp_path / "queries.vxe", gen_queries(data.means, 20, seed=11))
    return tmp_path


def dense_config(root, **overrides):
    data = RunConfigDictFactory(seed=11, k=5)
    data["data"] = {"mode": "dense", "docs": str(root / "docs.vxe"),
                    "queries": str(root / "queries.vxe")}
    for key, value in overrides.items():
        data[key] = value
    return build_config(data)


def test_flat_against_flat_is_exact(dense_files):
    report = run_pipeline(dense_config(dense_files))
    assert report.index == "flat"
    assert report.recall_at_k == {5: 1.0}
    assert report.oracle
    assert report.docs == 400
    assert report.queries == 20
    assert report.candidates_max == 400


def test_exhaustive_ivf_is_exact(dense_files):
    index = {"kind": "ivf", "ivf": {"lists": 8, "probes": 8, "iters": 5}}
    report = run_pipeline(dense_config(dense_files, index=index, k_values=[1, 5]))
    assert report.index == "ivf"
    assert report.recall_at_k == {1: 1.0, 5: 1.0}


def test_report_file_and_determinism(dense_files):
    output = dense_files / "report.json"
    index = {"kind": "lsh", "lsh": {"tables": 4, "projections": 4}}
    first = run_pipeline(dense_config(dense_files, index=index, output=str(output)))
    written = json.loads(output.read_text())
    assert written["index"] == "lsh"
    assert set(written) == set(EvalReport.model_fields)
    second = run_pipeline(dense_config(dense_files, index=index, workers=3))
    assert first.non_timing() == second.non_timing()


def test_oracle_cap_skips_recall(dense_files, caplog):
    report = run_pipeline(dense_config(dense_files, oracle_cap=0))
    assert report.recall_at_k == {}
    assert not report.oracle
    assert "recall not measured" in caplog.text


def test_late_interaction_run(tmp_path):
    data = gen_multi(60, 8, 4, seed=12, tokens=6, vocab=40)
    write_multi(tmp_path / "docs.vxm", data.docs)
    write_multi(tmp_path / "queries.vxm", gen_multi_queries(data.means, 5, seed=12, tokens=3))
    config = build_config({
        "seed": 12, "k": 5, "k_prime": 10_000,
        "data": {"mode": "late", "docs": str(tmp_path / "docs.vxm"),
                 "queries": str(tmp_path / "queries.vxm")},
    })
    report = run_pipeline(config)
    assert report.mode.value == "late"
    assert report.recall_at_k == {5: 1.0}
    assert report.candidates_max == 60


def test_sparse_run(tmp_path):
    write_sparse(tmp_path / "docs.jsonl", gen_sparse(300, 200, seed=13))
    write_sparse(tmp_path / "queries.jsonl", gen_sparse_queries(10, 200, seed=13))
    config = build_config({
        "k": 10,
        "data": {"mode": "sparse", "docs": str(tmp_path / "docs.jsonl"),
                 "queries": str(tmp_path / "queries.jsonl"), "traversal": "daat"},
    })
    report = run_pipeline(config)
    assert report.index == "impact"
    assert report.recall_at_k[10] >= 0.7


def test_dense_json_lines_are_read(tmp_path):
    docs = gen_synthetic(5, 3, 1, seed=2).docs
    write_dense_jsonl(tmp_path / "docs.jsonl", docs)
    loaded = read_embeddings(tmp_path / "docs.jsonl")
    np.testing.assert_allclose(loaded.matrix, docs.matrix, rtol=1e-6)


def test_prebuilt_artifact_skips_the_build(dense_files, mocker):
    config = dense_config(dense_files)
    config = config.model_copy(update={"data": config.data.model_copy(
        update={"index": dense_files / "prebuilt.vxa"})})
    prebuilt = object()
    load = mocker.patch.object(harness.artifacts, "load", return_value=prebuilt)
    build = mocker.Mock()
    index, build_ms = load_or_build(config, build)
    assert index is prebuilt
    load.assert_called_once_with(dense_files / "prebuilt.vxa")
    build.assert_not_called()
    assert build_ms >= 0


def test_tuned_index_applies_probes():
    data = gen_synthetic(200, 4, 4, seed=14)
    ivf = build_ivf(data.docs, 4, iters=5, seed=0)
    tuned = TunedIndex(ivf, IndexConfig(kind=IndexKind.ivf, ivf=IvfConfig(lists=4, probes=4)))
    q = data.docs.matrix[0]
    assert tuned.search(q, 5) == ivf.search(q, 5, 4)
    assert tuned.search(q, 5).hits == FlatIndex(data.docs).search(q, 5).hits
    assert index_kind(ivf) == "ivf"
    assert len(tuned) == 200


@pytest.mark.parametrize("index, metric, mip", (
    ({}, Metric.inner_product, True),
    ({"kind": "hnsw"}, Metric.inner_product, True),
    ({"kind": "ivf", "mip": False}, Metric.euclidean, False),
    ({"metric": "euclidean"}, Metric.euclidean, False),
    ),
    ids=["flat", "hnsw", "explicit-mip", "explicit-metric"]
)
def test_token_rows_default_to_inner_product(index, metric, mip):
    cfg = token_index_config(IndexConfig.model_validate(index))
    assert (cfg.metric, cfg.mip) == (metric, mip)


def test_late_run_builds_an_inner_product_token_index(tmp_path, mocker):
    # arrange
    data = gen_multi(30, 8, 3, seed=15, tokens=4, vocab=20)
    write_multi(tmp_path / "docs.vxm", data.docs)
    write_multi(tmp_path / "queries.vxm", gen_multi_queries(data.means, 3, seed=15, tokens=3))
    config = build_config({
        "k": 3, "k_prime": 5, "index": {"kind": "lsh"},
        "data": {"mode": "late", "docs": str(tmp_path / "docs.vxm"),
                 "queries": str(tmp_path / "queries.vxm")},
    })
    build = mocker.spy(harness, "build_index")
    # act
    report = run_pipeline(config)
    # assert
    (index_cfg, rows, _), _ = build.call_args
    assert index_cfg.mip
    assert len(rows) == sum(len(doc) for doc in data.docs)
    assert report.index == "lsh"


@pytest.fixture(scope="module", name="twin_docs")
def docs_with_twins():
    generator = rng(16)
    half = generator.standard_normal((30, 4))
    return EmbeddingSet(generator.permutation(60), np.vstack((half, half)))


# every setting visits the whole collection, so each kind must return min(k, n) hits
@pytest.mark.parametrize("index", (
    {"kind": "flat"},
    {"kind": "flat", "metric": "inner_product"},
    {"kind": "lsh", "lsh": {"tables": 2, "projections": 1, "width": 1000.0}},
    {"kind": "ivf", "ivf": {"lists": 4, "probes": 4, "iters": 5}},
    {"kind": "pq", "pq": {"subspaces": 2, "centroids": 16, "iters": 5}},
    {"kind": "ivfpq", "ivf": {"lists": 4, "probes": 4, "iters": 5},
     "pq": {"subspaces": 2, "centroids": 16, "iters": 5}},
    {"kind": "hnsw", "hnsw": {"max_degree": 16, "ef_construction": 32, "ef_search": 64}},
    ),
    ids=["flat", "flat-ip", "lsh", "ivf", "pq", "ivfpq", "hnsw"]
)
def test_every_index_kind_returns_well_formed_hits(twin_docs, index):
    cfg = IndexConfig.model_validate(index)
    tuned = TunedIndex(harness.build_index(cfg, twin_docs, 0), cfg)
    queries = np.vstack((twin_docs.matrix[:3], rng(17).standard_normal((3, 4))))
    for q in queries:
        for k in (1, 10, 60, 100):
            found = tuned.search(q, k).hits
            keys = [(-hit.score, hit.doc_id) for hit in found]
            expect(len(found) == min(k, 60), f"k={k}: {len(found)} hits")
            expect(keys == sorted(keys), f"k={k}: not ordered")
            expect(len({hit.doc_id for hit in found}) == len(found), f"k={k}: repeated ids")
            expect([hit.rank for hit in found] == list(range(1, len(found) + 1)), f"k={k}")
    assert_expectations()
