"""Synthetic data, oracle-relative metrics and the evaluation pipeline.

Every run builds (or loads) an index, times each query with a monotonic clock and, unless
the collection is larger than ``oracle_cap``, compares the hits with an exact reference:
flat search for dense data, exhaustive scoring for late interaction and unquantised
accumulation for sparse data.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Callable,
    ClassVar,
    Dict,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from . import artifacts
from .config import DataMode, IndexConfig, IndexKind, RunConfig
from .core import EmbeddingSet, MultiEmbedding, ScoredHit, SearchResult, SparseVector, top_k
from .errors import ConfigError, MetricError
from .flat_index import FlatIndex, Metric, build_flat
from .formats import (
    DENSE_MAGIC,
    PathLike,
    peek_magic,
    read_dense,
    read_dense_jsonl,
    read_multi,
    read_sparse,
)
from .graph_index import HnswIndex, HnswParams, build_hnsw
from .late_interaction import (
    CoilProjections,
    MultiDocStore,
    brute_force_search,
    make_scorer,
    two_stage_result,
)
from .lsh_index import LshIndex, LshParams, build_lsh
from .quant_index import IvfIndex, IvfPqIndex, PqIndex, build_ivf, build_ivfpq, build_pq
from .sparse_retrieval import (
    ImpactIndex,
    Traversal,
    brute_force_sparse,
    build_impact_index,
    score_doc_at_a_time,
    score_term_at_a_time,
)

Search = Callable[[Any, int], SearchResult]

CLS_TOKEN = 0


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


# -- synthetic data ----------------------------------------------------------------------


class Synthetic(NamedTuple):
    """Generated docs with the mixture they were drawn from"""

    docs: Any
    means: np.ndarray
    labels: np.ndarray


def _check_shape(n: int, dim: int, clusters: int):
    if dim < 1 or clusters < 1 or n < clusters:
        raise ConfigError(
            f"need n >= clusters >= 1 and dim >= 1, got n={n}, clusters={clusters}, dim={dim}"
        )


def _mixture(n: int, dim: int, clusters: int, seed: int, separation: float):
    _check_shape(n, dim, clusters)
    rng = _rng(seed, 0)
    means = rng.standard_normal((clusters, dim)) * separation
    labels = rng.permutation(np.arange(n) % clusters)
    return rng, means, labels


def gen_synthetic(
    n: int, dim: int, clusters: int, seed: int, spread: float = 1.0, separation: float = 8.0
) -> Synthetic:
    """Gaussian mixture: equal-sized clusters around normal means scaled by ``separation``"""
    rng, means, labels = _mixture(n, dim, clusters, seed, separation)
    points = means[labels] + spread * rng.standard_normal((n, dim))
    return Synthetic(EmbeddingSet(np.arange(n), points), means, labels)


def gen_queries(means: np.ndarray, count: int, seed: int, spread: float = 1.0) -> EmbeddingSet:
    """Queries drawn from the same mixture, on a stream of their own"""
    if count < 1:
        raise ConfigError(f"need at least one query, got {count}")
    rng = _rng(seed, 1)
    labels = rng.integers(0, means.shape[0], count)
    points = means[labels] + spread * rng.standard_normal((count, means.shape[1]))
    return EmbeddingSet(np.arange(count), points)


def _multi(rng, doc_id: int, mean: np.ndarray, tokens: int, vocab: int, spread: float):
    rows = mean + spread * rng.standard_normal((tokens, mean.shape[0]))
    token_ids = np.concatenate(([CLS_TOKEN], rng.integers(1, vocab, tokens - 1)))
    return MultiEmbedding(doc_id, rows, token_ids)


def gen_multi(
    n: int,
    dim: int,
    clusters: int,
    seed: int,
    tokens: int = 20,
    vocab: int = 1000,
    spread: float = 1.0,
    separation: float = 8.0,
) -> Synthetic:
    """Multi-embedding docs of ``tokens // 2`` to ``3 * tokens // 2`` rows around a cluster mean"""
    if tokens < 2 or vocab < 2:
        raise ConfigError("need at least 2 tokens per doc and a vocabulary of 2")
    rng, means, labels = _mixture(n, dim, clusters, seed, separation)
    lengths = rng.integers(max(2, tokens // 2), 3 * tokens // 2 + 1, n)
    docs = [
        _multi(rng, i, means[label], length, vocab, spread)
        for i, (label, length) in enumerate(zip(labels.tolist(), lengths.tolist()))
    ]
    return Synthetic(docs, means, labels)


def gen_multi_queries(
    means: np.ndarray,
    count: int,
    seed: int,
    tokens: int = 8,
    vocab: int = 1000,
    spread: float = 1.0,
) -> List[MultiEmbedding]:
    if count < 1:
        raise ConfigError(f"need at least one query, got {count}")
    rng = _rng(seed, 1)
    labels = rng.integers(0, means.shape[0], count)
    return [_multi(rng, i, means[label], tokens, vocab, spread) for i, label in enumerate(labels)]


def _zipf(vocab: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, vocab + 1)
    return weights / weights.sum()


def gen_sparse(n: int, vocab: int, seed: int, terms: int = 30) -> List[SparseVector]:
    """Docs of Zipf-distributed terms with exponential weights; repeated terms keep their max"""
    if n < 1 or vocab < 1 or terms < 1:
        raise ConfigError(f"need n, vocab and terms >= 1, got {n}, {vocab}, {terms}")
    rng = _rng(seed, 2)
    p = _zipf(vocab)
    return [
        SparseVector.from_pairs(
            zip(rng.choice(vocab, terms, p=p).tolist(), rng.exponential(1.0, terms).tolist()),
            doc_id=i,
        )
        for i in range(n)
    ]


def gen_sparse_queries(count: int, vocab: int, seed: int, terms: int = 4) -> List[SparseVector]:
    rng = _rng(seed, 3)
    p = _zipf(vocab)
    return [
        SparseVector.from_pairs(
            zip(rng.choice(vocab, terms, p=p).tolist(), rng.uniform(0.5, 2.0, terms).tolist()),
            doc_id=i,
        )
        for i in range(count)
    ]


def truth_record(data: Synthetic, seed: int) -> Dict[str, Any]:
    """Sidecar content: the mixture means and the cluster of every doc"""
    return {
        "seed": seed,
        "clusters": int(data.means.shape[0]),
        "means": data.means.tolist(),
        "labels": data.labels.tolist(),
    }


def write_truth(path: PathLike, data: Synthetic, seed: int):
    Path(path).write_text(json.dumps(truth_record(data, seed), sort_keys=True) + "\n")


# -- metrics -----------------------------------------------------------------------------


def recall_at_k(
    approx_hits: Sequence[ScoredHit], oracle_hits: Sequence[ScoredHit], k: int
) -> float:
    """Share of the oracle's top ``k`` ids found in the approximate top ``k``"""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    if len(oracle_hits) < k:
        raise MetricError(f"oracle returned {len(oracle_hits)} hits, recall@{k} needs {k}")
    truth = {hit.doc_id for hit in oracle_hits[:k]}
    return len(truth.intersection(hit.doc_id for hit in approx_hits[:k])) / k


Unit = Annotated[float, Field(ge=0.0, le=1.0)]


class EvalReport(BaseModel):
    """Outcome of one evaluation run; timing fields are the only non-deterministic ones"""

    model_config = ConfigDict(extra="forbid")

    TIMING_FIELDS: ClassVar[frozenset] = frozenset(
        {"build_ms", "latency_us_mean", "latency_us_median", "latency_us_p99"}
    )

    mode: DataMode
    index: str = Field(description="flat, lsh, ivf, pq, ivfpq, hnsw or impact")
    seed: int = Field(ge=0)
    docs: int = Field(ge=0)
    queries: int = Field(ge=0)
    k: int = Field(ge=1)
    recall_at_k: Dict[int, Unit] = Field(description="empty when the oracle was skipped")
    oracle: bool
    candidates_mean: float = Field(ge=0)
    candidates_max: int = Field(ge=0)
    index_size_bytes: int = Field(ge=0)
    build_ms: float = Field(ge=0)
    latency_us_mean: float = Field(ge=0)
    latency_us_median: float = Field(ge=0)
    latency_us_p99: float = Field(ge=0)

    def non_timing(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude=set(self.TIMING_FIELDS))


# -- index construction ------------------------------------------------------------------

_KINDS = {
    FlatIndex: IndexKind.flat.value,
    LshIndex: IndexKind.lsh.value,
    IvfIndex: IndexKind.ivf.value,
    PqIndex: IndexKind.pq.value,
    IvfPqIndex: IndexKind.ivfpq.value,
    HnswIndex: IndexKind.hnsw.value,
    ImpactIndex: "impact",
}


def index_kind(index) -> str:
    return _KINDS[type(index)]


def build_index(cfg: IndexConfig, docs: EmbeddingSet, seed: int):
    kind = cfg.kind
    if kind is IndexKind.flat:
        return build_flat(docs, cfg.metric)
    if kind is IndexKind.lsh:
        params = LshParams(cfg.lsh.tables, cfg.lsh.projections, cfg.lsh.width, seed)
        return build_lsh(docs, params, cfg.lsh.relative_width, cfg.mip)
    if kind is IndexKind.ivf:
        return build_ivf(docs, cfg.ivf.lists, cfg.ivf.iters, seed, cfg.mip)
    if kind is IndexKind.pq:
        return build_pq(docs, cfg.pq.subspaces, cfg.pq.centroids, cfg.pq.iters, seed, cfg.mip)
    if kind is IndexKind.ivfpq:
        return build_ivfpq(
            docs, cfg.ivf.lists, cfg.pq.subspaces, cfg.pq.centroids, cfg.ivf.iters, seed, cfg.mip
        )
    h = cfg.hnsw
    params = HnswParams(h.max_degree, h.ef_construction, h.ef_search, h.effective_level_scale, seed)
    return build_hnsw(docs, params, cfg.mip)


def token_index_config(cfg: IndexConfig) -> IndexConfig:
    """Stage one of late interaction ranks token rows by inner product.

    Flat indexes switch to the inner product metric, approximate ones to the MIP-lifted space;
    a config that sets ``metric`` or ``mip`` itself is kept as written.
    """
    if {"metric", "mip"} & cfg.model_fields_set:
        return cfg
    return cfg.model_copy(update={"metric": Metric.inner_product, "mip": True})


class TunedIndex:
    """An index whose ``search(q, k)`` applies the query-time settings of a config"""

    def __init__(self, index, cfg: IndexConfig):
        self.index = index
        self.cfg = cfg

    def __len__(self) -> int:
        return len(self.index)

    def search(self, q, k: int) -> SearchResult:
        if isinstance(self.index, (IvfIndex, IvfPqIndex)):
            return self.index.search(q, k, self.cfg.ivf.probes)
        if isinstance(self.index, HnswIndex):
            return self.index.search(q, k, self.cfg.hnsw.ef_search)
        return self.index.search(q, k)

    def size_bytes(self) -> int:
        return self.index.size_bytes()


def read_embeddings(path: PathLike) -> EmbeddingSet:
    """VXE1 binaries by magic, dense JSON Lines otherwise"""
    if peek_magic(path) == DENSE_MAGIC:
        return read_dense(path)
    return read_dense_jsonl(path)


def load_or_build(cfg: RunConfig, build: Callable[[], Any]) -> Tuple[Any, float]:
    """The artifact named by ``data.index`` if any, else a fresh build; also the time taken"""
    start = time.perf_counter_ns()
    index = artifacts.load(cfg.data.index) if cfg.data.index is not None else build()
    return index, (time.perf_counter_ns() - start) / 1e6


# -- pipeline ----------------------------------------------------------------------------


class Prepared(NamedTuple):
    """Everything a run needs once data is read and the index is ready"""

    index: Any
    search: Search
    oracle: Optional[Callable[[Any, int], List[ScoredHit]]]
    queries: Sequence
    docs: int
    build_ms: float


def _prepare_dense(cfg: RunConfig) -> Prepared:
    docs = read_embeddings(cfg.data.docs)
    queries = list(read_embeddings(cfg.data.queries).matrix)
    index, build_ms = load_or_build(cfg, lambda: build_index(cfg.index, docs, cfg.seed))
    oracle = None
    if len(docs) <= cfg.oracle_cap:
        reference = FlatIndex(docs, cfg.index.scoring_metric)
        oracle = lambda q, k: reference.search(q, k).hits  # noqa: E731
    search = TunedIndex(index, cfg.index).search
    return Prepared(index, search, oracle, queries, len(docs), build_ms)


def _prepare_late(cfg: RunConfig) -> Prepared:
    store = MultiDocStore(read_multi(cfg.data.docs))
    queries = read_multi(cfg.data.queries)
    s = cfg.scorer
    projections = None
    if s.cls_projection and s.tok_projection:
        projections = CoilProjections.from_files(s.cls_projection, s.tok_projection)
    scorer = make_scorer(s.kind, s.m, projections, s.include_cls)
    rows = store.as_embedding_set()
    index_cfg = token_index_config(cfg.index)
    ann, build_ms = load_or_build(cfg, lambda: build_index(index_cfg, rows, cfg.seed))
    tuned = TunedIndex(ann, index_cfg)

    def search(q: MultiEmbedding, k: int) -> SearchResult:
        return two_stage_result(store, tuned, q, cfg.k_prime, k, cfg.workers, scorer)

    oracle = None
    if len(store) <= cfg.oracle_cap:
        oracle = lambda q, k: brute_force_search(store, q, k, scorer)  # noqa: E731
    return Prepared(ann, search, oracle, queries, len(store), build_ms)


def _prepare_sparse(cfg: RunConfig) -> Prepared:
    docs = read_sparse(cfg.data.docs)
    queries = read_sparse(cfg.data.queries)
    index, build_ms = load_or_build(cfg, lambda: build_impact_index(docs))
    traverse = score_term_at_a_time
    if cfg.data.traversal is Traversal.doc_at_a_time:
        traverse = score_doc_at_a_time

    def search(q: SparseVector, k: int) -> SearchResult:
        ids, scores = traverse(index, q)
        return SearchResult(top_k(ids, scores, k), int(ids.shape[0]))

    oracle = None
    if len(docs) <= cfg.oracle_cap:
        oracle = lambda q, k: brute_force_sparse(docs, q, k)  # noqa: E731
    return Prepared(index, search, oracle, queries, len(docs), build_ms)


_PREPARE = {
    DataMode.dense: _prepare_dense,
    DataMode.late: _prepare_late,
    DataMode.sparse: _prepare_sparse,
}


def _timed(search: Search, queries: Sequence, k: int, workers: int, progress: bool):
    def run(q) -> Tuple[SearchResult, int]:
        start = time.perf_counter_ns()
        result = search(q, k)
        return result, time.perf_counter_ns() - start

    bar = dict(total=len(queries), desc="queries", disable=not progress, leave=False)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map yields in query order whatever the scheduling
            timed = list(tqdm(pool.map(run, queries), **bar))
    else:
        timed = [run(q) for q in tqdm(queries, **bar)]
    latencies = np.array([ns for _, ns in timed], dtype=np.float64) / 1e3
    return [r for r, _ in timed], latencies


def _recalls(results, oracle, queries, depths: List[int]) -> Dict[int, float]:
    if oracle is None:
        return {}
    truths = [oracle(q, max(depths)) for q in queries]
    recalls = {}
    for depth in depths:
        usable = [(r, t) for r, t in zip(results, truths) if len(t) >= depth]
        if len(usable) < len(results):
            left_out = len(results) - len(usable)
            logger.warning(f"recall@{depth}: {left_out} queries have fewer relevant docs")
        if usable:
            recalls[depth] = float(np.mean([recall_at_k(r.hits, t, depth) for r, t in usable]))
    return recalls


def _summary(values: np.ndarray, reduce) -> float:
    return float(reduce(values)) if values.size else 0.0


def run_pipeline(cfg: RunConfig, progress: bool = False) -> EvalReport:
    """Build or load, query, compare with the oracle and write the report if asked"""
    prepared = _PREPARE[cfg.data.mode](cfg)
    if prepared.oracle is None:
        logger.warning(f"collection exceeds oracle_cap={cfg.oracle_cap}, recall not measured")
    results, latencies = _timed(prepared.search, prepared.queries, cfg.k, cfg.workers, progress)
    candidates = np.array([r.candidates for r in results], dtype=np.float64)
    report = EvalReport(
        mode=cfg.data.mode,
        index=index_kind(prepared.index),
        seed=cfg.seed,
        docs=prepared.docs,
        queries=len(results),
        k=cfg.k,
        recall_at_k=_recalls(results, prepared.oracle, prepared.queries, cfg.recall_depths),
        oracle=prepared.oracle is not None,
        candidates_mean=_summary(candidates, np.mean),
        candidates_max=int(_summary(candidates, np.max)),
        index_size_bytes=prepared.index.size_bytes(),
        build_ms=prepared.build_ms,
        latency_us_mean=_summary(latencies, np.mean),
        latency_us_median=_summary(latencies, np.median),
        latency_us_p99=_summary(latencies, lambda v: np.percentile(v, 99)),
    )
    logger.info(f"{report.index} over {report.docs} docs: recall {report.recall_at_k}")
    if cfg.output is not None:
        Path(cfg.output).write_text(report.model_dump_json(indent=2) + "\n")
        logger.info(f"report written to {cfg.output}")
    return report
