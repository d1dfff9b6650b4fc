"""Hierarchical navigable small world graphs.

Every doc lives in layer 0; a doc drawn at level L also lives in layers 1..L, so upper
layers thin out geometrically. Search descends greedily from the entry point with a beam of
one and widens the beam to ``ef`` on layer 0.

Edges are kept symmetric and capped (``max_degree`` per upper layer, twice that on layer 0).
Neighbours are the closest of the construction beam, without a diversity heuristic.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from math import floor, log
from typing import Dict, List, Sequence, Tuple

import numpy as np
from loguru import logger

from . import mips
from .artifacts import register
from .core import EmbeddingSet, ScoredHit, SearchResult, VectorLike, neg_sq_distances, top_k
from .errors import (
    DomainError,
    EmptyIndexError,
    EmptyLayerError,
    FormatError,
    GraphConnectivityError,
    ValidationError,
)
from .flat_index import FlatIndex, query_vector
from .formats import ByteReader, ByteWriter

Neighbour = Tuple[float, int]


@dataclass(frozen=True)
class HnswParams:

    max_degree: int = 16
    ef_construction: int = 128
    ef_search: int = 64
    level_scale: float = 1 / log(16)
    seed: int = 0

    def __post_init__(self):
        if self.max_degree < 2:
            raise ValidationError(f"max_degree must be >= 2, got {self.max_degree}")
        if self.ef_construction < self.max_degree:
            raise ValidationError("ef_construction must be >= max_degree")
        if self.ef_search < 1:
            raise ValidationError(f"ef_search must be >= 1, got {self.ef_search}")
        if not self.level_scale > 0:
            raise ValidationError(f"level_scale must be positive, got {self.level_scale}")

    def cap(self, layer: int) -> int:
        return 2 * self.max_degree if layer == 0 else self.max_degree


def assign_level(params: HnswParams, draw: float) -> int:
    """``floor(-ln(draw) * mL)`` for a uniform draw in (0, 1]"""
    if not 0 < draw <= 1:
        raise DomainError(f"level draw must lie in (0, 1], got {draw}")
    return int(floor(-log(draw) * params.level_scale))


class Layer:
    """Adjacency of one layer over the shared vector matrix"""

    __slots__ = ("adjacency", "vectors")

    def __init__(self, adjacency: Dict[int, Sequence[int]], vectors: np.ndarray):
        self.adjacency = adjacency
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.adjacency)

    def __contains__(self, node: int) -> bool:
        return node in self.adjacency

    def distances(self, q: np.ndarray, nodes) -> np.ndarray:
        diff = self.vectors[nodes] - q
        return np.sum(diff * diff, axis=1)


def greedy_search_layer(
    layer: Layer, q: np.ndarray, entries: Sequence[int], ef: int
) -> List[Neighbour]:
    """Beam search of width ``ef``; returns ``(squared distance, node)`` closest first.

    Stops once the best unexpanded candidate is farther than the worst kept result.
    """
    if not len(layer):
        raise EmptyLayerError("search on an empty layer")
    entries = list(dict.fromkeys(int(e) for e in entries))
    missing = [e for e in entries if e not in layer]
    if missing:
        raise ValidationError(f"entry nodes {missing} are not in the layer")
    visited = set(entries)
    start = layer.distances(q, entries).tolist()
    candidates = list(zip(start, entries))
    heapq.heapify(candidates)
    # max-heap on (distance, node) through negation
    results = [(-d, -e) for d, e in candidates]
    heapq.heapify(results)
    while len(results) > ef:
        heapq.heappop(results)
    adjacency = layer.adjacency
    while candidates:
        dist, node = heapq.heappop(candidates)
        if len(results) >= ef and dist > -results[0][0]:
            break
        fresh = [v for v in adjacency[node] if v not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        for d, v in zip(layer.distances(q, fresh).tolist(), fresh):
            if len(results) < ef or (d, v) < (-results[0][0], -results[0][1]):
                heapq.heappush(candidates, (d, v))
                heapq.heappush(results, (-d, -v))
                if len(results) > ef:
                    heapq.heappop(results)
    return sorted((-d, -v) for d, v in results)


class _Builder:
    """Mutable graph used during insertion; frozen into an :class:`HnswIndex` afterwards"""

    def __init__(self, vectors: np.ndarray, params: HnswParams):
        self.vectors = vectors
        self.params = params
        self.layers: List[Dict[int, List[int]]] = []
        self.entry = -1

    def _dist(self, a: int, others: List[int]) -> np.ndarray:
        diff = self.vectors[others] - self.vectors[a]
        return np.sum(diff * diff, axis=1)

    def _unlink(self, graph: Dict[int, List[int]], a: int, b: int):
        graph[a].remove(b)
        graph[b].remove(a)

    def _evictable(self, graph: Dict[int, List[int]], node: int) -> int:
        """Farthest neighbour of ``node`` that keeps at least one other edge, or -1"""
        nbrs = graph[node]
        order = np.argsort(-self._dist(node, nbrs), kind="stable")
        for i in order.tolist():
            if len(graph[nbrs[i]]) > 1:
                return nbrs[i]
        return -1

    def _connect(self, layer: int, node: int, chosen: List[Neighbour]):
        graph = self.layers[layer]
        cap = self.params.cap(layer)
        for dist, other in chosen:
            nbrs = graph[other]
            if len(nbrs) < cap:
                nbrs.append(node)
                graph[node].append(other)
                continue
            victim = self._evictable(graph, other)
            if victim >= 0 and dist < float(self._dist(other, [victim])[0]):
                self._unlink(graph, other, victim)
                nbrs.append(node)
                graph[node].append(other)
        if not graph[node] and chosen:
            # every candidate was saturated: force one edge so the node stays reachable
            for _, other in chosen:
                victim = self._evictable(graph, other)
                if victim >= 0:
                    self._unlink(graph, other, victim)
                    graph[other].append(node)
                    graph[node].append(other)
                    break

    def insert(self, node: int, level: int):
        for layer in range(len(self.layers), level + 1):
            self.layers.append({})
        for layer in range(level + 1):
            self.layers[layer][node] = []
        if self.entry < 0:
            self.entry = node
            return
        q = self.vectors[node]
        top = max(lvl for lvl in range(len(self.layers)) if self.entry in self.layers[lvl])
        entries = [self.entry]
        for layer in range(top, level, -1):
            entries = [greedy_search_layer(self._view(layer), q, entries, 1)[0][1]]
        for layer in range(min(level, top), -1, -1):
            beam = greedy_search_layer(self._view(layer), q, entries, self.params.ef_construction)
            beam = [(d, v) for d, v in beam if v != node]
            self._connect(layer, node, beam[: self.params.max_degree])
            entries = [v for _, v in beam] or entries
        if level > top:
            self.entry = node

    def _view(self, layer: int) -> Layer:
        return Layer(self.layers[layer], self.vectors)


def _components(graph: Dict[int, Sequence[int]]) -> int:
    seen, count = set(), 0
    for root in graph:
        if root in seen:
            continue
        count += 1
        seen.add(root)
        queue = deque([root])
        while queue:
            for v in graph[queue.popleft()]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
    return count


@register
class HnswIndex:

    MAGIC = b"VXH1"

    def __init__(self, params, docs, levels, layers, entry_point, transform=None):
        self.params: HnswParams = params
        self.docs: EmbeddingSet = docs
        self.levels: np.ndarray = np.asarray(levels, dtype=np.int64)
        self.layers: List[Dict[int, np.ndarray]] = layers
        self.entry_point: int = entry_point
        self.transform = transform

    @property
    def dim(self) -> int:
        return self.docs.dim if self.transform is None else self.transform.source_dim

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def top_level(self) -> int:
        return len(self.layers) - 1

    def layer(self, index: int) -> Layer:
        return Layer(self.layers[index], self.docs.matrix)

    def layer_sizes(self) -> List[int]:
        return [len(layer) for layer in self.layers]

    def search(self, q: VectorLike, k: int, ef: int = None) -> SearchResult:
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        if not len(self) or self.entry_point < 0:
            raise EmptyIndexError("search on an empty HNSW index")
        q = mips.lift_query(self.transform, query_vector(q, self.dim))
        entries = [self.entry_point]
        for level in range(self.top_level, 0, -1):
            entries = [greedy_search_layer(self.layer(level), q, entries, 1)[0][1]]
        ef = max(ef or self.params.ef_search, k)
        found = greedy_search_layer(self.layer(0), q, entries, ef)
        positions = np.array([v for _, v in found], dtype=np.int64)
        # scores are recomputed from the stored vectors, never taken from the beam
        scores = neg_sq_distances(self.docs.matrix[positions], q)
        return SearchResult(top_k(self.docs.ids[positions], scores, k), len(found))

    def check_structure(self):
        """Raise :class:`GraphConnectivityError` when an invariant of the graph is broken"""
        for level, graph in enumerate(self.layers):
            cap = self.params.cap(level)
            if level and not set(graph) <= set(self.layers[level - 1]):
                raise GraphConnectivityError(f"layer {level} is not a subset of layer {level - 1}")
            edges = {(node, v) for node, nbrs in graph.items() for v in nbrs.tolist()}
            for node, nbrs in graph.items():
                if len(nbrs) > cap:
                    raise GraphConnectivityError(f"node {node} exceeds degree {cap} on {level}")
                for v in nbrs.tolist():
                    if (v, node) not in edges:
                        raise GraphConnectivityError(f"edge {node}-{v} on {level} is one-way")
        if len(self.layers[0]) != len(self) or _components(self.layers[0]) != 1:
            raise GraphConnectivityError("layer 0 is not a single connected graph")

    def size_bytes(self) -> int:
        edges = sum(len(nbrs) for graph in self.layers for nbrs in graph.values())
        offsets = sum(len(self) + 1 for _ in self.layers)
        return FlatIndex(self.docs).size_bytes() + 4 * (edges + offsets) + len(self)

    def to_bytes(self) -> bytes:
        p = self.params
        n = len(self)
        header = (p.max_degree, p.ef_construction, p.ef_search, p.level_scale, p.seed)
        writer = ByteWriter(self.MAGIC).pack("IIIdQ", *header)
        writer.blob(mips.transform_blob(self.transform))
        writer.pack("IiI", n, self.entry_point, len(self.layers)).array(self.levels, "u1")
        for graph in self.layers:
            counts = np.zeros(n, dtype=np.int64)
            for node, nbrs in graph.items():
                counts[node] = len(nbrs)
            offsets = np.concatenate(([0], np.cumsum(counts)))
            flat = [graph[node] for node in sorted(graph)]
            writer.array(offsets, "u4")
            writer.array(np.concatenate(flat) if flat else np.empty(0), "u4")
        return writer.blob(FlatIndex(self.docs).to_bytes()).getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "HnswIndex":
        reader = ByteReader(payload, cls.MAGIC, "HNSW index")
        max_degree, ef_construction, ef_search, level_scale, seed = reader.unpack("IIIdQ")
        params = HnswParams(max_degree, ef_construction, ef_search, level_scale, seed)
        transform = mips.transform_from_blob(reader.blob())
        n, entry_point, depth = reader.unpack("IiI")
        levels = reader.array(n, "u1").astype(np.int64)
        layers = []
        for level in range(depth):
            offsets = reader.array(n + 1, "u4").astype(np.int64)
            nbrs = reader.array(int(offsets[-1]), "u4").astype(np.int64)
            members = np.flatnonzero(levels >= level).tolist()
            layers.append({v: nbrs[offsets[v]:offsets[v + 1]] for v in members})
        docs = FlatIndex.from_bytes(reader.blob()).docs
        if len(docs) != n:
            raise FormatError(f"HNSW index: {n} nodes but {len(docs)} stored vectors")
        return cls(params, docs, levels, layers, entry_point, transform)

    def __repr__(self) -> str:
        return f"HnswIndex(n={len(self)}, layers={self.layer_sizes()})"


def build_hnsw(
    docs: EmbeddingSet, params: HnswParams = HnswParams(), mip: bool = False
) -> HnswIndex:
    """Insert docs one by one in collection order; fails loudly on a disconnected layer 0"""
    transform, space = mips.prepare(docs, mip)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([params.seed])))
    draws = 1.0 - rng.random(len(space))
    levels = np.array([assign_level(params, d) for d in draws.tolist()], dtype=np.int64)
    if levels.max() > 255:
        raise ValidationError("level_scale too large: levels above 255 cannot be stored")
    builder = _Builder(space.matrix, params)
    for node, level in enumerate(levels.tolist()):
        builder.insert(node, level)
    layers = [
        {node: np.array(nbrs, dtype=np.int64) for node, nbrs in graph.items()}
        for graph in builder.layers
    ]
    index = HnswIndex(params, space, levels, layers, builder.entry, transform)
    index.check_structure()
    logger.debug(f"built {index!r}")
    return index


def search_hnsw(ix: HnswIndex, q: VectorLike, k: int) -> List[ScoredHit]:
    return ix.search(q, k).hits
