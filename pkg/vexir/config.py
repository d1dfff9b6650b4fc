"""Run configuration: a pydantic schema read from TOML, with ``key.path=value`` overrides.

Example::

    seed = 7
    k = 10

    [index]
    kind = "ivf"

    [index.ivf]
    lists = 64
    probes = 4

    [data]
    docs = "docs.vxe"
    queries = "queries.vxe"

Relative data paths are resolved against the directory of the TOML file.
"""
from __future__ import annotations

from enum import Enum
from math import log
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import toml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .flat_index import Metric
from .late_interaction import ScorerKind
from .sparse_retrieval import Traversal

DEFAULT_K_PRIME = 1000
DEFAULT_ORACLE_CAP = 100_000


class IndexKind(str, Enum):

    flat = "flat"
    lsh = "lsh"
    ivf = "ivf"
    pq = "pq"
    ivfpq = "ivfpq"
    hnsw = "hnsw"


class DataMode(str, Enum):

    dense = "dense"
    late = "late"
    sparse = "sparse"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LshConfig(_Section):

    tables: int = Field(16, ge=1, description="hash tables r")
    projections: int = Field(8, ge=1, description="concatenated projections m per table")
    width: float = Field(4.0, gt=0, description="bucket width w")
    relative_width: bool = Field(True, description="read w in units of the median pair distance")


class IvfConfig(_Section):

    lists: int = Field(64, ge=1, description="coarse centroids k")
    probes: int = Field(1, ge=1, description="lists p visited per query")
    iters: int = Field(20, ge=1, description="Lloyd iterations")


class PqConfig(_Section):

    subspaces: int = Field(8, ge=1, description="sub-quantisers m")
    centroids: int = Field(256, ge=1, description="centroids per subspace")
    iters: int = Field(20, ge=1)


class HnswConfig(_Section):

    max_degree: int = Field(16, ge=2)
    ef_construction: int = Field(128, ge=2)
    ef_search: int = Field(64, ge=1)
    level_scale: Optional[float] = Field(None, gt=0, description="defaults to 1 / ln(max_degree)")

    @model_validator(mode="after")
    def _beam_holds_neighbours(self):
        if self.ef_construction < self.max_degree:
            raise ValueError("ef_construction must be >= max_degree")
        return self

    @property
    def effective_level_scale(self) -> float:
        return self.level_scale or 1 / log(self.max_degree)


class IndexConfig(_Section):

    kind: IndexKind = IndexKind.flat
    metric: Metric = Metric.euclidean
    mip: bool = Field(
        False,
        description="build approximate indexes on the MIP-lifted space; unset metric and mip "
        "default to inner product search over token rows in late mode",
    )
    lsh: LshConfig = LshConfig()
    ivf: IvfConfig = IvfConfig()
    pq: PqConfig = PqConfig()
    hnsw: HnswConfig = HnswConfig()

    @property
    def scoring_metric(self) -> Metric:
        """What the oracle must rank by for this index to be judged fairly"""
        if self.kind is IndexKind.flat:
            return self.metric
        return Metric.inner_product if self.mip else Metric.euclidean


class ScorerConfig(_Section):

    kind: ScorerKind = ScorerKind.summaxsim
    m: int = Field(1, ge=1, description="document vectors seen by poly and maxsim")
    include_cls: bool = True
    cls_projection: Optional[Path] = None
    tok_projection: Optional[Path] = None

    @model_validator(mode="after")
    def _coil_needs_projections(self):
        if self.kind is ScorerKind.coil and not (self.cls_projection and self.tok_projection):
            raise ValueError("the coil scorer needs cls_projection and tok_projection files")
        return self


class DataConfig(_Section):

    mode: DataMode = DataMode.dense
    docs: Path
    queries: Path
    index: Optional[Path] = Field(None, description="prebuilt artifact to load instead of building")
    traversal: Traversal = Traversal.term_at_a_time


class RunConfig(_Section):

    seed: int = Field(0, ge=0, lt=2**64)
    k: int = Field(10, ge=1)
    k_values: Optional[List[int]] = None
    k_prime: int = Field(DEFAULT_K_PRIME, ge=1, description="stage one depth of late interaction")
    oracle_cap: int = Field(DEFAULT_ORACLE_CAP, ge=0)
    workers: int = Field(1, ge=1)
    output: Optional[Path] = None
    index: IndexConfig = IndexConfig()
    scorer: ScorerConfig = ScorerConfig()
    data: DataConfig

    @model_validator(mode="after")
    def _recall_depths(self):
        if self.k_values is not None and any(not 1 <= v <= self.k for v in self.k_values):
            raise ValueError(f"every k_values entry must lie in [1, k={self.k}]")
        return self

    @property
    def recall_depths(self) -> List[int]:
        return sorted(set(self.k_values or [self.k]))


def _location(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_override(item: str):
    """``a.b.c=value`` to ``(["a", "b", "c"], value)``; values are read as TOML, else as text"""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    try:
        value = toml.loads(f"v = {raw.strip()}")["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return [part.strip() for part in key.split(".")], value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part} is not a table")
            node = child
        node[path[-1]] = value
    return data


def _resolve_paths(data: Dict[str, Any], base: Path):
    section = data.get("data")
    if not isinstance(section, dict):
        return
    for key in ("docs", "queries", "index"):
        value = section.get(key)
        if isinstance(value, str) and not Path(value).is_absolute():
            section[key] = str(base / value)
    scorer = data.get("scorer")
    if isinstance(scorer, dict):
        for key in ("cls_projection", "tok_projection"):
            value = scorer.get(key)
            if isinstance(value, str) and not Path(value).is_absolute():
                scorer[key] = str(base / value)


def validate_section(model, data: Dict[str, Any], source: str):
    """``model.model_validate(data)`` with pydantic errors turned into :class:`ConfigError`"""
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(
            f"{source}: {_location(first['loc'])}: {first['msg']}"
            + (f" (and {exc.error_count() - 1} more)" if exc.error_count() > 1 else "")
        ) from exc


def build_config(data: Dict[str, Any], source: str = "<overrides>") -> RunConfig:
    return validate_section(RunConfig, data, source)


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path`` (if any), apply ``overrides`` and validate"""
    data: Dict[str, Any] = {}
    source = "<overrides>"
    if path is not None:
        path = Path(path)
        source = str(path)
        try:
            data = toml.load(path)
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: no such config file") from exc
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _resolve_paths(data, path.parent)
    config = build_config(apply_overrides(data, overrides), source)
    logger.debug(f"config from {source}: index={config.index.kind.value}, seed={config.seed}")
    return config
