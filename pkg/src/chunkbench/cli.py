"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 remote-embedder failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .bench import (
    CostReport,
    ExperimentConfig,
    auto_qrels,
    category_queries,
    compare_report,
    generate_queries,
    index_chunks,
    parse_queries,
    retrieve,
    write_queries,
)
from .chunkers import (
    STRATEGIES,
    FixedConfig,
    RecursiveConfig,
    SemanticConfig,
    StructureConfig,
    chunk_corpus,
    read_chunk_store,
    write_chunk_store,
)
from .docmodel import DocumentCategory, generate_corpus, load_corpus, save_corpus
from .embed import Embedder, LocalSpec, RemoteEmbeddingError, RemoteSpec
from .evalkit import (
    EvalConfig,
    MetricReport,
    PoolConfig,
    SigTestConfig,
    compare_systems,
    evaluate,
    parse_qrels,
    parse_run,
    pool_runs,
    write_pool,
    write_qrels,
    write_run,
    write_significance,
)
from .vindex import HnswParams, deserialize_index, serialize_index

log = logging.getLogger("chunkbench")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_REMOTE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _read(path) -> str:
    return _existing(path).read_text(encoding="utf-8")


def _write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


# --------------------------------------------------------------------------
# config builders

def _embedder_spec(args):
    if args.embedder == "remote":
        return RemoteSpec.from_env(endpoint=args.embed_url, model=args.embed_model)
    return LocalSpec(dim=args.dim, hash_seed=args.hash_seed)


def _make_embedder(args) -> Embedder:
    return Embedder(_embedder_spec(args), cache_path=args.cache)


def _chunker_configs(args) -> dict:
    return {
        "fixed": FixedConfig(args.fixed_size, args.fixed_overlap),
        "recursive": RecursiveConfig(chunk_size=args.recursive_size, overlap=args.recursive_overlap),
        "semantic": SemanticConfig(args.percentile),
        "struct": StructureConfig(args.max_header_level),
    }


def _hnsw(args) -> HnswParams:
    seed = args.seed if args.level_seed is None else args.level_seed
    return HnswParams(args.m, args.ef_construction, args.ef_search, seed)


def _manifest(args) -> Path:
    return Path(args.manifest) if args.manifest else Path(args.out_dir) / "corpus" / "manifest.json"


def _queries_path(args) -> Path:
    return Path(args.queries) if args.queries else Path(args.out_dir) / "queries.tsv"


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    manifest, docs = generate_corpus(args.seed, args.per_category)
    path = save_corpus(Path(args.out_dir) / "corpus", manifest, docs)
    log.info("wrote %d documents, manifest %s", len(docs), path)
    queries = generate_queries(docs, args.seed, args.num_queries)
    _write(Path(args.out_dir) / "queries.tsv", write_queries(queries))


def cmd_chunk(args):
    docs = load_corpus(_existing(_manifest(args)))
    embedder = _make_embedder(args) if args.strategy == "semantic" else None
    chunks = chunk_corpus(docs, args.strategy, _chunker_configs(args)[args.strategy], embedder)
    out = args.output or Path(args.out_dir) / "chunks" / f"{args.strategy}.jsonl"
    _write(out, write_chunk_store(chunks))
    print(f"{args.strategy}: {len(chunks)} chunks")


def cmd_index(args):
    chunks = read_chunk_store(_read(args.chunks))
    embedder = _make_embedder(args)
    index = index_chunks(chunks, embedder, _hnsw(args))
    out = Path(args.output or Path(args.out_dir) / "indices" / (Path(args.chunks).stem + ".cbix"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(serialize_index(index))
    print(f"indexed {len(index)} chunks -> {out} ({out.stat().st_size} bytes)")


def cmd_retrieve(args):
    index_path = _existing(args.index)
    blob = index_path.read_bytes()
    index = deserialize_index(blob)
    queries = parse_queries(_read(_queries_path(args)))
    tag = args.tag or index_path.stem
    embedder = _make_embedder(args)
    run, search_ms, embed_ms = retrieve(index, queries, embedder, tag, args.k, args.ef_search, args.exact)
    _write(Path(args.out_dir) / "runs" / f"{tag}.trec", write_run(run))
    cost = CostReport(tag, len(index), len(blob), search_ms, embed_ms, embedder.calls)
    _write(Path(args.out_dir) / "costs" / f"{tag}.json", cost.to_json())


def cmd_pool(args):
    runs = [parse_run(_read(p)) for p in args.runs]
    pairs = pool_runs(runs, PoolConfig(args.depth))
    _write(args.output or Path(args.out_dir) / "pool.tsv", write_pool(pairs))


def cmd_autoqrels(args):
    chunks = []
    for p in args.chunks:
        chunks.extend(read_chunk_store(_read(p)))
    queries = parse_queries(_read(_queries_path(args)))
    _write(args.output or Path(args.out_dir) / "qrels.txt", write_qrels(auto_qrels(chunks, queries)))


def cmd_eval(args):
    run = parse_run(_read(args.run))
    qrels = parse_qrels(_read(args.qrels))
    report = evaluate(run, qrels, EvalConfig(tuple(args.cutoffs), args.threshold))
    tag = run.run_tag or Path(args.run).stem
    _write(args.output or Path(args.out_dir) / "metrics" / f"{tag}.csv", report.to_csv())
    for name, value in report.means.items():
        print(f"{tag}\t{name}\t{value:.4f}")


def _sig_cfg(args) -> SigTestConfig:
    seed = args.seed if args.rng_seed is None else args.rng_seed
    return SigTestConfig(args.alpha, args.mc_rounds, seed)


def cmd_sigtest(args):
    reports = [MetricReport.from_csv(_read(p), Path(p).stem) for p in args.metrics]
    results = compare_systems(reports, _sig_cfg(args))
    _write(args.output or Path(args.out_dir) / "significance.csv", write_significance(results))


def cmd_report(args):
    out = Path(args.out_dir)
    run_paths = args.runs or [out / "runs" / f"{s}.trec" for s in STRATEGIES]
    runs = [parse_run(_read(p)) for p in run_paths]
    qrels = parse_qrels(_read(args.qrels or out / "qrels.txt"))
    docs = load_corpus(_existing(_manifest(args)))
    queries = parse_queries(_read(_queries_path(args)), docs)
    cfg = EvalConfig(tuple(args.cutoffs), args.threshold)
    reports = {r.run_tag: evaluate(r, qrels, cfg) for r in runs}
    cost_paths = args.costs or [out / "costs" / f"{r.run_tag}.json" for r in runs]
    costs = {}
    for p in cost_paths:
        c = CostReport.from_json(_read(p))
        costs[c.strategy] = c
    sig_cfg = _sig_cfg(args)
    sig = compare_systems(list(reports.values()), sig_cfg)
    pid = category_queries(queries, DocumentCategory.DIAGRAM_REF)
    pid_reports = {t: r.subset(pid) for t, r in reports.items()}
    pid_sig = compare_systems(list(pid_reports.values()), sig_cfg)
    for p in compare_report(out, reports, costs, sig, pid_reports, pid_sig, figures=not args.no_figures):
        log.info("wrote %s", p)


def cmd_all(args):
    cfg = ExperimentConfig(
        seed=args.seed,
        per_category=args.per_category,
        num_queries=args.num_queries,
        embedder=_embedder_spec(args),
        hnsw=_hnsw(args),
        k=args.k,
        pool_depth=args.depth,
        eval=EvalConfig(tuple(args.cutoffs), args.threshold),
        sigtest=_sig_cfg(args),
        chunkers=_chunker_configs(args),
        parallel=args.parallel,
        figures=not args.no_figures,
        cache_path=args.cache,
    )
    result = bench.run_experiment(args.out_dir, cfg)
    for s, c in result["costs"].items():
        print(f"{s}\tchunks={c.total_chunks}\tindex_bytes={c.index_bytes}\t"
              f"MRR={result['reports'][s].mean('MRR'):.4f}")


# --------------------------------------------------------------------------
# parser

def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=1, help="experiment seed (default: %(default)s)")
    g.add_argument("--out-dir", default="out", help="output directory (default: %(default)s)")
    g.add_argument("--embedder", choices=("local", "remote"), default="local",
                   help="embedding backend (default: %(default)s)")
    g.add_argument("--dim", type=int, default=256, help="local embedding dimension (default: %(default)s)")
    g.add_argument("--hash-seed", type=int, default=0, help="local embedder hash seed (default: %(default)s)")
    g.add_argument("--embed-url", default=None,
                   help="remote embedding endpoint (default: $CHUNKBENCH_EMBED_URL)")
    g.add_argument("--embed-model", default=None,
                   help="remote embedding model (default: $CHUNKBENCH_EMBED_MODEL)")
    g.add_argument("--cache", default=None, help="embedding cache file (default: no cache)")
    g.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return p


def _chunker_flags(p):
    g = p.add_argument_group("chunker options")
    g.add_argument("--fixed-size", type=int, default=512, help="fixed-size chunk characters (default: %(default)s)")
    g.add_argument("--fixed-overlap", type=int, default=128, help="fixed-size overlap characters (default: %(default)s)")
    g.add_argument("--recursive-size", type=int, default=1024, help="recursive chunk characters (default: %(default)s)")
    g.add_argument("--recursive-overlap", type=int, default=100, help="recursive overlap characters (default: %(default)s)")
    g.add_argument("--percentile", type=float, default=0.8, help="semantic breakpoint percentile (default: %(default)s)")
    g.add_argument("--max-header-level", type=int, default=3, choices=(1, 2, 3),
                   help="deepest heading level that starts a section (default: %(default)s)")


def _hnsw_flags(p, build=True):
    g = p.add_argument_group("HNSW options")
    if build:
        g.add_argument("--m", type=int, default=24, help="max neighbours per node per layer (default: %(default)s)")
        g.add_argument("--ef-construction", type=int, default=200, help="build beam width (default: %(default)s)")
        g.add_argument("--level-seed", type=int, default=None, help="node level seed (default: --seed)")
    g.add_argument("--ef-search", type=int, default=100, help="search beam width (default: %(default)s)")


def _eval_flags(p):
    g = p.add_argument_group("evaluation options")
    g.add_argument("--cutoffs", type=int, nargs="+", default=[3, 5], help="metric cutoffs K (default: 3 5)")
    g.add_argument("--threshold", type=int, default=1, choices=(1, 2),
                   help="minimum grade counted relevant for MRR/MAP/F1 (default: %(default)s)")


def _sig_flags(p):
    g = p.add_argument_group("significance options")
    g.add_argument("--alpha", type=float, default=0.05, help="significance level (default: %(default)s)")
    g.add_argument("--mc-rounds", type=int, default=100_000,
                   help="Monte Carlo rounds when more than 20 paired queries (default: %(default)s)")
    g.add_argument("--rng-seed", type=int, default=None, help="Monte Carlo seed (default: --seed)")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="chunkbench", description="Chunking-strategy retrieval benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus and queries")
    p.add_argument("--per-category", type=int, default=20, help="documents per category (default: %(default)s)")
    p.add_argument("--num-queries", type=int, default=60, help="number of queries (default: %(default)s)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("chunk", parents=[common], help="chunk a corpus with one strategy")
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--manifest", default=None, help="corpus manifest (default: OUT/corpus/manifest.json)")
    p.add_argument("--output", default=None, help="chunk store path (default: OUT/chunks/STRATEGY.jsonl)")
    _chunker_flags(p)
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("index", parents=[common], help="embed a chunk store and build an HNSW index")
    p.add_argument("--chunks", required=True, help="chunk store (JSON lines)")
    p.add_argument("--output", default=None, help="index path (default: OUT/indices/NAME.cbix)")
    _hnsw_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", parents=[common], help="search an index for every query")
    p.add_argument("--index", required=True, help="CBIX index file")
    p.add_argument("--queries", default=None, help="queries TSV (default: OUT/queries.tsv)")
    p.add_argument("--tag", default=None, help="run tag (default: index file stem)")
    p.add_argument("--k", type=int, default=10, help="results per query (default: %(default)s)")
    p.add_argument("--exact", action="store_true", help="brute-force search instead of HNSW")
    _hnsw_flags(p, build=False)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("pool", parents=[common], help="merge the top results of several runs")
    p.add_argument("--runs", nargs="+", required=True, help="TREC run files")
    p.add_argument("--depth", type=int, default=10, help="pool depth per run (default: %(default)s)")
    p.add_argument("--output", default=None, help="pool TSV (default: OUT/pool.tsv)")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("autoqrels", parents=[common], help="grade chunks by query span overlap")
    p.add_argument("--chunks", nargs="+", required=True, help="chunk stores of every strategy")
    p.add_argument("--queries", default=None, help="queries TSV (default: OUT/queries.tsv)")
    p.add_argument("--output", default=None, help="qrels path (default: OUT/qrels.txt)")
    p.set_defaults(func=cmd_autoqrels)

    p = sub.add_parser("eval", parents=[common], help="score a run against qrels")
    p.add_argument("--run", required=True, help="TREC run file")
    p.add_argument("--qrels", required=True, help="qrels file")
    p.add_argument("--output", default=None, help="metric CSV (default: OUT/metrics/TAG.csv)")
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sigtest", parents=[common], help="pairwise Fisher randomization tests")
    p.add_argument("--metrics", nargs="+", required=True, help="metric CSVs written by eval")
    p.add_argument("--output", default=None, help="significance CSV (default: OUT/significance.csv)")
    _sig_flags(p)
    p.set_defaults(func=cmd_sigtest)

    p = sub.add_parser("report", parents=[common], help="assemble effectiveness, cost and diagram reports")
    p.add_argument("--runs", nargs="+", default=None, help="run files (default: OUT/runs/*.trec)")
    p.add_argument("--costs", nargs="+", default=None, help="cost JSON files (default: OUT/costs/TAG.json)")
    p.add_argument("--qrels", default=None, help="qrels file (default: OUT/qrels.txt)")
    p.add_argument("--queries", default=None, help="queries TSV (default: OUT/queries.tsv)")
    p.add_argument("--manifest", default=None, help="corpus manifest (default: OUT/corpus/manifest.json)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    _eval_flags(p)
    _sig_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("all", parents=[common], help="run the full four-strategy experiment")
    p.add_argument("--per-category", type=int, default=20, help="documents per category (default: %(default)s)")
    p.add_argument("--num-queries", type=int, default=60, help="number of queries (default: %(default)s)")
    p.add_argument("--k", type=int, default=10, help="results per query (default: %(default)s)")
    p.add_argument("--depth", type=int, default=10, help="pool depth per run (default: %(default)s)")
    p.add_argument("--parallel", action="store_true", help="run strategies concurrently (latencies unreliable)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    _chunker_flags(p)
    _hnsw_flags(p)
    _eval_flags(p)
    _sig_flags(p)
    p.set_defaults(func=cmd_all)
    for name, p in sub.choices.items():
        p.set_defaults(usage=p.format_usage())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(args.usage)
        print(f"chunkbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RemoteEmbeddingError as exc:
        print(f"chunkbench {args.command}: remote embedder failed: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (ValueError, OSError) as exc:
        print(f"chunkbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
