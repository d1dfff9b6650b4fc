"""``vexir`` command line: data generation, index builds, searches, evaluation and losses.

Results go to stdout (rich tables, or JSON with ``--json``); logs go to stderr. A
:class:`~vexir.errors.VexirError` ends the command with its family's exit code.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import click
from loguru import logger
from rich.console import Console
from rich.table import Table

from . import __version__, artifacts, harness
from .config import DataMode, IndexConfig, RunConfig, load_config, validate_section
from .core import EmbeddingSet, cosine
from .errors import ConfigError, DataError, ExitCode, VexirError
from .formats import (
    DENSE_MAGIC,
    peek_magic,
    read_dense,
    read_dense_jsonl,
    read_multi,
    read_score_rows,
    read_sparse,
    read_triples,
    write_dense,
    write_dense_jsonl,
    write_multi,
    write_sparse,
)
from .graph_index import HnswIndex
from .late_interaction import MultiDocStore, ScorerKind
from .learning_math import Triple, ce_triple_loss, head_binary, nce_loss
from .log import configure_logging, level_for
from .sparse_retrieval import ImpactIndex, build_impact_index

console = Console()


class VexirGroup(click.Group):
    """Turns library errors into a one line message and the mapped exit code"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except VexirError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(int(exc.exit_code))
        except (click.exceptions.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(int(ExitCode.DATA))
        except Exception as exc:  # pylint: disable=broad-except
            logger.opt(exception=exc).debug("internal error")
            click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(int(ExitCode.INTERNAL))


def _emit_json(payload):
    click.echo(json.dumps(payload, sort_keys=True))


def _config(
    config: Optional[Path], overrides: Sequence[str], flags: Dict[str, object]
) -> RunConfig:
    # dedicated flags win over --set, which wins over the file
    extra = [f"{key}={json.dumps(value)}" for key, value in flags.items() if value is not None]
    return load_config(config, list(overrides) + extra)


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML run configuration.",
)
set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
    help="Override one configuration value; repeatable.",
)
json_option = click.option("--json", "as_json", is_flag=True, help="Print raw JSON.")


@click.group(cls=VexirGroup)
@click.version_option(__version__, prog_name="vexir")
@click.option("-v", "--verbose", count=True, help="Log debug messages.")
@click.option("-q", "--quiet", is_flag=True, help="Only log warnings and errors.")
def cli(verbose: int, quiet: bool):
    """Dense, late-interaction and learned sparse retrieval over precomputed embeddings."""
    configure_logging(level_for(verbose, quiet))


# -- gen ---------------------------------------------------------------------------------


@cli.command()
@click.option("--mode", type=click.Choice([m.value for m in DataMode]), default="dense")
@click.option("--n", "n", type=int, default=1000, show_default=True, help="Documents.")
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--clusters", type=int, default=10, show_default=True)
@click.option("--queries", type=int, default=100, show_default=True)
@click.option("--tokens", type=int, default=20, show_default=True, help="Mean tokens per doc.")
@click.option("--vocab", type=int, default=1000, show_default=True)
@click.option("--terms", type=int, default=30, show_default=True, help="Terms per sparse doc.")
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def gen(mode, n, dim, clusters, queries, tokens, vocab, terms, seed, out: Path):
    """Write a synthetic corpus, its queries and the ground truth sidecar into OUT."""
    out.mkdir(parents=True, exist_ok=True)
    mode = DataMode(mode)
    if mode is DataMode.dense:
        data = harness.gen_synthetic(n, dim, clusters, seed)
        write_dense(out / "docs.vxe", data.docs)
        write_dense(out / "queries.vxe", harness.gen_queries(data.means, queries, seed))
        harness.write_truth(out / "truth.json", data, seed)
    elif mode is DataMode.late:
        data = harness.gen_multi(n, dim, clusters, seed, tokens, vocab)
        write_multi(out / "docs.vxm", data.docs)
        query_tokens = max(2, tokens // 2)
        write_multi(out / "queries.vxm",
                    harness.gen_multi_queries(data.means, queries, seed, query_tokens, vocab))
        harness.write_truth(out / "truth.json", data, seed)
    else:
        write_sparse(out / "docs.jsonl", harness.gen_sparse(n, vocab, seed, terms))
        write_sparse(out / "queries.jsonl", harness.gen_sparse_queries(queries, vocab, seed))
    logger.info(f"wrote {mode.value} corpus of {n} docs and {queries} queries to {out}")


# -- build / search ----------------------------------------------------------------------


@cli.command()
@config_option
@set_option
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def build(config_path, overrides, seed, out: Path):
    """Build the configured index over the configured docs and save it to OUT."""
    cfg = _config(config_path, overrides, {"seed": seed})
    if cfg.data.mode is DataMode.sparse:
        index = build_impact_index(read_sparse(cfg.data.docs))
    elif cfg.data.mode is DataMode.late:
        store = MultiDocStore(read_multi(cfg.data.docs))
        index = harness.build_index(cfg.index, store.as_embedding_set(), cfg.seed)
    else:
        index = harness.build_index(cfg.index, harness.read_embeddings(cfg.data.docs), cfg.seed)
    size = artifacts.save(index, out)
    click.echo(f"{harness.index_kind(index)} index, {len(index)} entries, {size} bytes -> {out}")


def _hits_table(rows: Iterable) -> Table:
    table = Table("query", "rank", "doc", "score")
    for query_id, hits in rows:
        for hit in hits:
            table.add_row(str(query_id), str(hit.rank), str(hit.doc_id), f"{hit.score:.6g}")
    return table


@cli.command()
@click.argument("artifact", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("queries", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--probes", type=int, help="IVF lists to visit.")
@click.option("--ef", type=int, help="HNSW search beam.")
@json_option
def search(artifact: Path, queries: Path, k, probes, ef, as_json):
    """Run every query of QUERIES against a saved ARTIFACT."""
    index = artifacts.load(artifact)
    if ef is None and isinstance(index, HnswIndex):
        ef = index.params.ef_search
    knobs = {"ivf": {"probes": probes}, "hnsw": {"ef_search": ef}}
    knobs = {name: {key: v for key, v in section.items() if v is not None}
             for name, section in knobs.items()}
    tuned = harness.TunedIndex(index, validate_section(IndexConfig, knobs, "command line"))
    if isinstance(index, ImpactIndex):
        batch = [(q.doc_id, q) for q in read_sparse(queries)]
    else:
        query_set = harness.read_embeddings(queries)
        batch = list(zip(query_set.ids.tolist(), query_set.matrix))
    rows = [(query_id, tuned.search(q, k).hits) for query_id, q in batch]
    if as_json:
        for query_id, hits in rows:
            _emit_json({"q": query_id, "hits": [hit._asdict() for hit in hits]})
    else:
        console.print(_hits_table(rows))


# -- eval / bench ------------------------------------------------------------------------


def _report_table(rows: Sequence[Tuple[str, harness.EvalReport]], label: str = "run") -> Table:
    depths = sorted({d for _, r in rows for d in r.recall_at_k})
    table = Table(label, "index", "docs", *[f"R@{d}" for d in depths], "cand.", "bytes",
                  "build ms", "mean µs", "p50 µs", "p99 µs")
    for name, report in rows:
        recalls = [f"{report.recall_at_k[d]:.3f}" if d in report.recall_at_k else "-"
                   for d in depths]
        table.add_row(name, report.index, str(report.docs), *recalls,
                      f"{report.candidates_mean:.1f}", str(report.index_size_bytes),
                      f"{report.build_ms:.1f}", f"{report.latency_us_mean:.1f}",
                      f"{report.latency_us_median:.1f}", f"{report.latency_us_p99:.1f}")
    return table


eval_flags = [
    config_option,
    set_option,
    click.option("--k", type=int),
    click.option("--kprime", "k_prime", type=int, help="Stage one depth of late interaction."),
    click.option("--scorer", type=click.Choice([kind.value for kind in ScorerKind]),
                 help="Second stage scorer of late interaction."),
    click.option("--workers", type=int),
    click.option("--out", "output", type=click.Path(dir_okay=False, path_type=Path),
                 help="Write the report JSON here."),
    json_option,
]


def _with(options):
    def decorate(func):
        for option in reversed(options):
            func = option(func)
        return func
    return decorate


@cli.command("eval")
@_with(eval_flags)
@click.option("--seed", type=int)
def evaluate(config_path, overrides, k, k_prime, scorer, workers, output, as_json, seed):
    """Evaluate the configured index against the exact oracle."""
    flags = {"seed": seed, "k": k, "k_prime": k_prime, "scorer.kind": scorer, "workers": workers,
             "output": None if output is None else str(output)}
    report = harness.run_pipeline(_config(config_path, overrides, flags))
    if as_json:
        _emit_json(report.model_dump(mode="json"))
    else:
        console.print(_report_table([("run", report)]))


def _sweep(item: Optional[str]) -> List[Optional[str]]:
    if not item:
        return [None]
    key, sep, values = item.partition("=")
    if not sep or not values:
        raise ConfigError(f"sweep {item!r} is not of the form key.path=v1,v2,...")
    return [f"{key}={value}" for value in values.split(",")]


@cli.command()
@_with(eval_flags)
@click.option("--seed", type=int, required=True)
@click.option("--sweep", metavar="KEY.PATH=V1,V2,...", help="Run once per value of one key.")
def bench(config_path, overrides, k, k_prime, scorer, workers, output, as_json, seed, sweep):
    """Evaluate with a fixed seed, optionally sweeping one configuration value."""
    flags = {"seed": seed, "k": k, "k_prime": k_prime, "scorer.kind": scorer, "workers": workers}
    rows = []
    for item in _sweep(sweep):
        cfg = _config(config_path, list(overrides) + ([item] if item else []), flags)
        report = harness.run_pipeline(cfg, progress=sys.stderr.isatty())
        rows.append((item.partition("=")[2] if item else "run", report))
    if output is not None:
        payload = [r.model_dump(mode="json") for _, r in rows]
        Path(output).write_text(json.dumps(payload if sweep else payload[0], indent=2) + "\n")
    if as_json:
        for _, report in rows:
            _emit_json(report.model_dump(mode="json"))
    else:
        console.print(_report_table(rows, sweep.partition("=")[0] if sweep else "run"))


# -- convert / schema --------------------------------------------------------------------


@cli.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("target", type=click.Path(dir_okay=False, path_type=Path))
def convert(source: Path, target: Path):
    """Transcode dense embeddings between VXE1 binaries and JSON Lines.

    The direction follows SOURCE: a VXE1 file becomes JSON Lines and vice versa.
    """
    if peek_magic(source) == DENSE_MAGIC:
        docs: EmbeddingSet = read_dense(source)
        write_dense_jsonl(target, docs)
    else:
        docs = read_dense_jsonl(source)
        write_dense(target, docs)
    click.echo(f"{len(docs)} x {docs.dim} embeddings -> {target}")


@cli.command()
def schema():
    """Print the JSON schema of evaluation reports."""
    _emit_json(harness.EvalReport.model_json_schema())


# -- losses ------------------------------------------------------------------------------


@cli.group()
def losses():
    """Evaluate the fine-tuning losses over files of scores or triples."""


@losses.command("nce")
@click.argument("scores", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@json_option
def losses_nce(scores: Path, as_json):
    """NCE loss over JSON Lines rows {"q": id, "scores": [positive, negatives...]}."""
    rows = read_score_rows(scores)
    value = nce_loss(s for _, s in rows)
    if as_json:
        _emit_json({"rows": len(rows), "nce": value})
    else:
        console.print(f"nce over {len(rows)} rows: {value:.9g}")


def _cosine(left: EmbeddingSet, right: EmbeddingSet, left_id: int, right_id: int) -> float:
    try:
        return cosine(left.vector(left_id), right.vector(right_id))
    except KeyError as exc:
        raise DataError(f"id {exc.args[0]} missing from the embedding files") from exc


@losses.command("triples")
@click.argument("triples", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--queries", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--docs", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@json_option
def losses_triples(triples: Path, queries: Path, docs: Path, as_json):
    """Pairwise NCE and cross-entropy of cosine scores over a TSV of triples.

    Probabilities for the cross-entropy come from a two-logit head over ``(0, score)``.
    """
    query_set = harness.read_embeddings(queries)
    doc_set = harness.read_embeddings(docs)
    scored = []
    for query_id, pos_id, neg_id in read_triples(triples):
        triple = Triple(query_id, pos_id, neg_id)
        scored.append((
            _cosine(query_set, doc_set, triple.query_id, triple.pos_doc_id),
            _cosine(query_set, doc_set, triple.query_id, triple.neg_doc_id),
        ))
    if not scored:
        raise DataError(f"{triples}: no triples")
    result = {
        "triples": len(scored),
        "nce": nce_loss(scored),
        "ce": ce_triple_loss((head_binary(0.0, s), head_binary(0.0, t)) for s, t in scored),
    }
    if as_json:
        _emit_json(result)
    else:
        console.print(
            f"{result['triples']} triples: nce {result['nce']:.9g}, ce {result['ce']:.9g}"
        )


def main():
    cli(prog_name="vexir")
