from math import log
from pathlib import Path

import pytest
from pydantic import ValidationError

from tests.factories import RunConfigDictFactory, RunConfigFactory
from vexir.config import (
    DEFAULT_K_PRIME,
    DataMode,
    HnswConfig,
    IndexConfig,
    IndexKind,
    build_config,
    load_config,
    parse_override,
)
from vexir.errors import ConfigError
from vexir.flat_index import Metric
from vexir.late_interaction import ScorerKind

TOML = """
seed = 7
k = 5
k_values = [1, 5]

[index]
kind = "ivf"

[index.ivf]
lists = 32
probes = 4

[data]
docs = "docs.vxe"
queries = "/abs/queries.vxe"
"""


def test_defaults():
    config = build_config({"data": {"docs": "d.vxe", "queries": "q.vxe"}})
    assert config.seed == 0
    assert config.k == 10
    assert config.k_prime == DEFAULT_K_PRIME
    assert config.index.kind is IndexKind.flat
    assert config.data.mode is DataMode.dense
    assert config.scorer.kind is ScorerKind.summaxsim
    assert config.recall_depths == [10]


def test_toml_file_with_relative_paths(tmp_path):
    (tmp_path / "run.toml").write_text(TOML)
    config = load_config(tmp_path / "run.toml")
    assert config.seed == 7
    assert config.index.kind is IndexKind.ivf
    assert (config.index.ivf.lists, config.index.ivf.probes) == (32, 4)
    assert config.data.docs == tmp_path / "docs.vxe"
    assert config.data.queries == Path("/abs/queries.vxe")
    assert config.recall_depths == [1, 5]


def test_overrides_win_over_the_file(tmp_path):
    (tmp_path / "run.toml").write_text(TOML)
    config = load_config(
        tmp_path / "run.toml", ["index.ivf.probes=8", "index.kind=hnsw", "output=out.json"]
    )
    assert config.index.ivf.probes == 8
    assert config.index.kind is IndexKind.hnsw
    assert config.output == Path("out.json")


def test_overrides_without_a_file():
    config = load_config(None, ["data.docs=a.vxe", "data.queries=b.vxe", "workers=3"])
    assert config.workers == 3
    assert config.data.docs == Path("a.vxe")


@pytest.mark.parametrize("item, expected", (
    ("k=5", (["k"], 5)),
    ("index.mip=true", (["index", "mip"], True)),
    ("data.docs=x.vxe", (["data", "docs"], "x.vxe")),
    ("k_values=[1, 3]", (["k_values"], [1, 3])),
    ),
    ids=["int", "bool", "text", "list"]
)
def test_parse_override(item, expected):
    assert parse_override(item) == expected


@pytest.mark.parametrize("overrides, fragment", (
    (["colour=blue"], "colour"),
    (["k=0"], "k"),
    (["index.kind=annoy"], "index.kind"),
    (["index.hnsw.max_degree=32", "index.hnsw.ef_construction=16"], "ef_construction"),
    (["k_values=[20]"], "k_values"),
    (["scorer.kind=coil"], "projection"),
    (["justakey"], "key.path=value"),
    (["data=3", "data.docs=x"], "not a table"),
    ),
    ids=["unknown", "k", "kind", "beam", "depths", "coil", "syntax", "table"]
)
def test_bad_overrides(overrides, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, ["data.docs=a", "data.queries=b", *overrides])


def test_missing_data_section():
    with pytest.raises(ConfigError, match="data"):
        build_config({})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="no such config file"):
        load_config(tmp_path / "absent.toml")


def test_bad_toml(tmp_path):
    (tmp_path / "bad.toml").write_text("k = = 3")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(tmp_path / "bad.toml")


def test_coil_projection_paths_are_resolved(tmp_path):
    (tmp_path / "run.toml").write_text(
        '[data]\nmode = "late"\ndocs = "d"\nqueries = "q"\n'
        '[scorer]\nkind = "coil"\ncls_projection = "wc.vxw"\ntok_projection = "wt.vxw"\n'
    )
    config = load_config(tmp_path / "run.toml")
    assert config.scorer.cls_projection == tmp_path / "wc.vxw"
    assert config.data.mode is DataMode.late


def test_level_scale_defaults_to_degree():
    assert HnswConfig(max_degree=8, ef_construction=8).effective_level_scale == 1 / log(8)
    assert HnswConfig(level_scale=0.5).effective_level_scale == 0.5


@pytest.mark.parametrize("index, metric", (
    (IndexConfig(), Metric.euclidean),
    (IndexConfig(metric=Metric.inner_product), Metric.inner_product),
    (IndexConfig(kind=IndexKind.lsh), Metric.euclidean),
    (IndexConfig(kind=IndexKind.lsh, mip=True), Metric.inner_product),
    ),
    ids=["flat", "flat-ip", "lsh", "lsh-mip"]
)
def test_scoring_metric(index, metric):
    assert index.scoring_metric is metric


def test_config_is_frozen():
    config = RunConfigFactory()
    with pytest.raises(ValidationError):
        config.k = 3


def test_factory_dict_validates():
    data = RunConfigDictFactory(k=4)
    assert data["index"]["ivf"]["lists"] == 8
    config = build_config(data)
    assert config.k == 4
    assert config.index.ivf.probes == 2
    assert config.data.docs == Path("docs.vxe")
