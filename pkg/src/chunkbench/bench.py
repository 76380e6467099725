"""End-to-end experiment: synthetic queries, span-provenance ground truth,
one chunk -> embed -> index -> retrieve pipeline per strategy, cost
accounting, and the comparison reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import plots
from .chunkers import (
    STRATEGIES,
    Chunk,
    FixedConfig,
    RecursiveConfig,
    SemanticConfig,
    StructureConfig,
    chunk_corpus,
    split_sentences,
    write_chunk_store,
)
from .docmodel import (
    DocumentCategory,
    Paragraph,
    StructuredDocument,
    Table,
    canonicalize,
    generate_corpus,
    save_corpus,
)
from .embed import Embedder, LocalSpec, tokenize
from .evalkit import (
    EvalConfig,
    MetricReport,
    PoolConfig,
    Qrels,
    Run,
    SigResult,
    SigTestConfig,
    compare_systems,
    evaluate,
    pool_runs,
    write_pool,
    write_qrels,
    write_run,
    write_significance,
)
from .vindex import HnswParams, VectorIndex, build_index, serialize_index

log = logging.getLogger(__name__)

MAX_QUERY_CHARS = 200
MIN_QUERY_TOKENS = 4
STRATEGY_LETTERS = {"fixed": "a", "recursive": "b", "semantic": "c", "struct": "d"}
STRATEGY_NAMES = {"fixed": "fixed-size", "recursive": "recursive", "semantic": "semantic", "struct": "struct-aware"}
DEFAULT_CONFIGS = {
    "fixed": FixedConfig(),
    "recursive": RecursiveConfig(),
    "semantic": SemanticConfig(),
    "struct": StructureConfig(),
}


class BenchError(ValueError):
    pass


# --------------------------------------------------------------------------
# queries

@dataclass(frozen=True)
class QuerySpec:
    query_id: str
    text: str
    doc_id: str
    span: tuple[int, int]
    category: Optional[DocumentCategory] = None


def candidate_spans(doc: StructuredDocument) -> list[tuple[str, tuple[int, int]]]:
    """Sentences of paragraphs, or table body rows for table-heavy documents."""
    text, cdoc = canonicalize(doc)
    out = []
    for block in cdoc.blocks:
        start, end = block.span
        if doc.category is DocumentCategory.TABLE_HEAVY:
            if not isinstance(block, Table):
                continue
            lines = text[start:end].split("\n")
            pos = start
            for i, line in enumerate(lines):
                if i >= 2:
                    out.append((line, (pos, pos + len(line))))
                pos += len(line) + 1
        elif isinstance(block, Paragraph):
            out.extend(split_sentences(text[start:end], offset=start))
    return [
        (s, span) for s, span in out
        if len(s) <= MAX_QUERY_CHARS and len(tokenize(s)) >= MIN_QUERY_TOKENS
    ]


def generate_queries(docs: Sequence[StructuredDocument], seed: int, q: int = 60) -> list[QuerySpec]:
    if not docs:
        raise BenchError("cannot generate queries over an empty corpus")
    if q < 1:
        raise BenchError("number of queries must be >= 1")
    rng = random.Random(seed)
    by_cat: dict[DocumentCategory, list[StructuredDocument]] = {}
    for d in docs:
        by_cat.setdefault(d.category, []).append(d)
    cats = [c for c in DocumentCategory if c in by_cat] + [c for c in by_cat if c not in set(DocumentCategory)]
    pools = {c: {d.doc_id: candidate_spans(d) for d in by_cat[c]} for c in cats}
    total = sum(len(v) for p in pools.values() for v in p.values())
    if total < q:
        raise BenchError(f"corpus has only {total} candidate spans, need {q}")
    quotas = {c: q // len(cats) + (1 if i < q % len(cats) else 0) for i, c in enumerate(cats)}

    picked: list[tuple[StructuredDocument, str, tuple[int, int]]] = []
    for cat in cats:
        remaining = {d: list(v) for d, v in pools[cat].items()}
        available = sum(len(v) for v in remaining.values())
        if available < quotas[cat]:
            raise BenchError(f"category {cat.value} has only {available} candidate spans, need {quotas[cat]}")
        order = [d for d in by_cat[cat]]
        rng.shuffle(order)
        taken = 0
        while taken < quotas[cat]:
            for d in order:
                cands = remaining[d.doc_id]
                if not cands or taken == quotas[cat]:
                    continue
                text, span = cands.pop(rng.randrange(len(cands)))
                picked.append((d, text, span))
                taken += 1
    return [
        QuerySpec(f"q{i:03d}", text, d.doc_id, span, d.category)
        for i, (d, text, span) in enumerate(picked, 1)
    ]


def write_queries(queries: Sequence[QuerySpec]) -> str:
    return "".join(f"{q.query_id}\t{q.doc_id}\t{q.span[0]}\t{q.span[1]}\t{q.text}\n" for q in queries)


def parse_queries(text: str, docs: Optional[Sequence[StructuredDocument]] = None) -> list[QuerySpec]:
    cats = {d.doc_id: d.category for d in docs or ()}
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise BenchError(f"line {lineno}: expected 5 tab-separated columns")
        qid, doc_id, s, e, qtext = cols
        try:
            span = (int(s), int(e))
        except ValueError:
            raise BenchError(f"line {lineno}: span offsets must be integers") from None
        out.append(QuerySpec(qid, qtext, doc_id, span, cats.get(doc_id)))
    return out


# --------------------------------------------------------------------------
# ground truth

def auto_qrels(chunks: Sequence[Chunk], queries: Sequence[QuerySpec]) -> Qrels:
    """Grade 2 when a chunk span contains the query span, 1 on partial overlap."""
    by_doc: dict[str, list[Chunk]] = {}
    for c in chunks:
        by_doc.setdefault(c.doc_id, []).append(c)
    qrels: Qrels = {}
    for q in queries:
        qs, qe = q.span
        for c in by_doc.get(q.doc_id, ()):
            cs, ce = c.char_span
            if cs <= qs and qe <= ce:
                grade = 2
            elif cs < qe and qs < ce:
                grade = 1
            else:
                continue
            qrels.setdefault(q.query_id, {})[c.chunk_id] = grade
    return qrels


# --------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineConfig:
    strategy: str
    chunker: object = None
    embedder: object = field(default_factory=LocalSpec)
    hnsw: HnswParams = field(default_factory=HnswParams)
    k: int = 10
    num_queries: int = 60
    seed: int = 1
    exact: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise BenchError(f"unknown strategy {self.strategy!r}")
        if self.chunker is None:
            self.chunker = DEFAULT_CONFIGS[self.strategy]
        if self.k < max(EvalConfig().cutoffs):
            raise BenchError("retrieval depth k must cover every evaluation cutoff")


@dataclass
class CostReport:
    strategy: str
    total_chunks: int
    index_bytes: int
    mean_retrieval_ms: float
    mean_query_embed_ms: float
    embed_calls: int
    latency_reliable: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        return cls(**json.loads(text))


@dataclass
class PipelineResult:
    run: Run
    cost: CostReport
    chunks: list[Chunk]
    index: VectorIndex
    index_bytes: bytes


def index_chunks(chunks: Sequence[Chunk], embedder: Embedder, params: HnswParams = HnswParams()) -> VectorIndex:
    vectors = embedder.embed_batch([c.text for c in chunks])
    return build_index([(c.chunk_id, v) for c, v in zip(chunks, vectors)], params)


def retrieve(index: VectorIndex, queries: Sequence[QuerySpec], embedder: Embedder, tag: str,
             k: int = 10, ef_search: Optional[int] = None, exact: bool = False) -> tuple[Run, float, float]:
    """Search every query; returns the run plus mean search and query-embedding milliseconds."""
    run = Run(tag)
    search_s = embed_s = 0.0
    if queries and len(index):
        # untimed warm-up so kernel compilation is not billed to the first query
        index.search_knn(index.vecs[0].astype(float) * index.inv[0], k, ef_search)
    for q in queries:
        t0 = time.perf_counter()
        vec = embedder(q.text)
        t1 = time.perf_counter()
        hits = index.search_exact(vec, k) if exact else index.search_knn(vec, k, ef_search)
        t2 = time.perf_counter()
        embed_s += t1 - t0
        search_s += t2 - t1
        run.rankings[q.query_id] = hits
    n = max(len(queries), 1)
    return run, 1000.0 * search_s / n, 1000.0 * embed_s / n


def run_pipeline(docs: Sequence[StructuredDocument], cfg: PipelineConfig, queries: Sequence[QuerySpec],
                 embedder: Optional[Embedder] = None) -> PipelineResult:
    embedder = embedder or Embedder(cfg.embedder)
    calls_before = embedder.calls
    chunks = chunk_corpus(docs, cfg.strategy, cfg.chunker, embedder)
    index = index_chunks(chunks, embedder, cfg.hnsw)
    blob = serialize_index(index)
    run, search_ms, embed_ms = retrieve(index, queries, embedder, cfg.strategy, cfg.k, cfg.hnsw.ef_search, cfg.exact)
    cost = CostReport(cfg.strategy, len(chunks), len(blob), search_ms, embed_ms, embedder.calls - calls_before)
    return PipelineResult(run, cost, chunks, index, blob)


# --------------------------------------------------------------------------
# reports

def _check_strategies(*groups):
    keys = [tuple(sorted(g)) for g in groups if g is not None]
    if any(k != keys[0] for k in keys):
        raise BenchError(f"mismatched strategy sets across report inputs: {keys}")
    if len(keys[0]) < 2:
        raise BenchError("comparison needs at least two strategies")


def _ordered(strategies) -> list[str]:
    known = [s for s in STRATEGIES if s in strategies]
    return known + sorted(s for s in strategies if s not in STRATEGIES)


def superscripts(strategy: str, metric: str, reports: dict[str, MetricReport], sig: Sequence[SigResult]) -> str:
    """Letters of the strategies this one beats significantly on ``metric``."""
    letters = []
    mine = reports[strategy].mean(metric)
    for other in _ordered(reports):
        if other == strategy:
            continue
        for r in sig:
            if r.metric == metric and {r.system_a, r.system_b} == {strategy, other} and r.significant:
                if mine > reports[other].mean(metric):
                    letters.append(STRATEGY_LETTERS.get(other, other))
    return "".join(letters)


def effectiveness_tables(reports: dict[str, MetricReport], sig: Sequence[SigResult]) -> tuple[str, str]:
    strategies = _ordered(reports)
    names = reports[strategies[0]].metric_names
    best = {n: max(reports[s].mean(n) for s in strategies) for n in names}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["strategy", "queries"]
    for n in names:
        header += [n, f"{n}_sig"]
    w.writerow(header)
    md = ["| Strategy | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
    for s in strategies:
        r = reports[s]
        row = [s, r.evaluated]
        cells = []
        for n in names:
            v = r.mean(n)
            sup = superscripts(s, n, reports, sig)
            row += [f"{v:.4f}", sup]
            cell = f"{v:.3f}"
            if v == best[n]:
                cell = f"**{cell}**"
            if sup:
                cell += f"<sup>{sup}</sup>"
            cells.append(cell)
        w.writerow(row)
        md.append(f"| {STRATEGY_NAMES.get(s, s)} | " + " | ".join(cells) + " |")
    letters = ", ".join(f"{STRATEGY_NAMES[s]} ({STRATEGY_LETTERS[s]})" for s in strategies if s in STRATEGY_LETTERS)
    md.append("")
    md.append(f"Bold: best mean per metric. Superscripts mark a significant improvement "
              f"(Fisher randomization test) over {letters}.")
    return buf.getvalue(), "\n".join(md) + "\n"


def cost_tables(costs: dict[str, CostReport]) -> tuple[str, str]:
    strategies = _ordered(costs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "total_chunks", "index_bytes", "index_mb", "avg_retrieval_ms",
                "avg_query_embed_ms", "embed_calls", "latency_reliable"])
    md = ["| Strategy | Total No. of Chunks | Index Storage Size (MB) | Avg. Retrieval Time (ms) | Avg. Query Embedding (ms) |",
          "|---|---|---|---|---|"]
    for s in strategies:
        c = costs[s]
        mb = c.index_bytes / 1e6
        w.writerow([s, c.total_chunks, c.index_bytes, f"{mb:.3f}", f"{c.mean_retrieval_ms:.3f}",
                    f"{c.mean_query_embed_ms:.3f}", c.embed_calls, str(c.latency_reliable).lower()])
        flag = "" if c.latency_reliable else " (unreliable: parallel run)"
        md.append(f"| {STRATEGY_NAMES.get(s, s)} | {c.total_chunks} | {mb:.3f} | "
                  f"{c.mean_retrieval_ms:.3f}{flag} | {c.mean_query_embed_ms:.3f} |")
    return buf.getvalue(), "\n".join(md) + "\n"


def compare_report(out_dir, reports: dict[str, MetricReport], costs: dict[str, CostReport],
                   sig: Sequence[SigResult], pid_reports: dict[str, MetricReport],
                   pid_sig: Sequence[SigResult] = (), figures: bool = True) -> list[Path]:
    """Write the effectiveness, cost and diagram-document reports (CSV + markdown)."""
    _check_strategies(reports, costs, pid_reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    csv_text, md_text = effectiveness_tables(reports, sig)
    put("report_effectiveness.csv", csv_text)
    put("report_effectiveness.md", md_text)
    csv_text, md_text = cost_tables(costs)
    put("report_cost.csv", csv_text)
    put("report_cost.md", md_text)
    csv_text, md_text = effectiveness_tables(pid_reports, pid_sig)
    put("report_pid.csv", csv_text)
    put("report_pid.md", md_text)
    put("significance.csv", write_significance(sig))
    put("significance_pid.csv", write_significance(pid_sig))
    if figures:
        fig_dir = out_dir / "figures"
        written.append(plots.plot_effectiveness(reports, fig_dir / "effectiveness.png"))
        written.append(plots.plot_effectiveness(pid_reports, fig_dir / "pid.png", title="Diagram documents"))
        written.append(plots.plot_costs(costs, fig_dir / "cost.png"))
    return written


def category_queries(queries: Sequence[QuerySpec], category: DocumentCategory) -> list[str]:
    return [q.query_id for q in queries if q.category is category]


# --------------------------------------------------------------------------
# full experiment

@dataclass
class ExperimentConfig:
    seed: int = 1
    per_category: int = 20
    num_queries: int = 60
    embedder: object = field(default_factory=LocalSpec)
    hnsw: Optional[HnswParams] = None
    k: int = 10
    pool_depth: int = 10
    eval: EvalConfig = field(default_factory=EvalConfig)
    sigtest: Optional[SigTestConfig] = None
    chunkers: dict = field(default_factory=lambda: dict(DEFAULT_CONFIGS))
    parallel: bool = False
    figures: bool = True
    cache_path: Optional[str] = None


def run_experiment(out_dir, cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    """Generate a corpus and run the four-strategy sweep, writing every artifact under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("chunks", "indices", "runs", "costs", "metrics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    hnsw = cfg.hnsw or HnswParams(level_seed=cfg.seed)
    sigtest = cfg.sigtest or SigTestConfig(rng_seed=cfg.seed)

    manifest, docs = generate_corpus(cfg.seed, cfg.per_category)
    save_corpus(out / "corpus", manifest, docs)
    queries = generate_queries(docs, cfg.seed, cfg.num_queries)
    (out / "queries.tsv").write_text(write_queries(queries), encoding="utf-8")

    def one(strategy):
        embedder = Embedder(cfg.embedder, cache_path=cfg.cache_path)
        try:
            pcfg = PipelineConfig(strategy, cfg.chunkers[strategy], cfg.embedder, hnsw, cfg.k, cfg.num_queries, cfg.seed)
            return run_pipeline(docs, pcfg, queries, embedder)
        finally:
            embedder.close()

    if cfg.parallel:
        with ThreadPoolExecutor(len(STRATEGIES)) as pool:
            results = dict(zip(STRATEGIES, pool.map(one, STRATEGIES)))
        for r in results.values():
            r.cost.latency_reliable = False
    else:
        results = {s: one(s) for s in STRATEGIES}

    all_chunks = []
    for s, r in results.items():
        log.info("%s: %d chunks, index %d bytes", s, r.cost.total_chunks, r.cost.index_bytes)
        (out / "chunks" / f"{s}.jsonl").write_text(write_chunk_store(r.chunks), encoding="utf-8")
        (out / "indices" / f"{s}.cbix").write_bytes(r.index_bytes)
        (out / "runs" / f"{s}.trec").write_text(write_run(r.run), encoding="utf-8")
        (out / "costs" / f"{s}.json").write_text(r.cost.to_json(), encoding="utf-8")
        all_chunks.extend(r.chunks)

    runs = [results[s].run for s in STRATEGIES]
    (out / "pool.tsv").write_text(write_pool(pool_runs(runs, PoolConfig(cfg.pool_depth))), encoding="utf-8")
    qrels = auto_qrels(all_chunks, queries)
    (out / "qrels.txt").write_text(write_qrels(qrels), encoding="utf-8")

    reports = {s: evaluate(results[s].run, qrels, cfg.eval) for s in STRATEGIES}
    for s, rep in reports.items():
        (out / "metrics" / f"{s}.csv").write_text(rep.to_csv(), encoding="utf-8")
    sig = compare_systems([reports[s] for s in STRATEGIES], sigtest)
    pid_ids = category_queries(queries, DocumentCategory.DIAGRAM_REF)
    pid_reports = {s: rep.subset(pid_ids) for s, rep in reports.items()}
    pid_sig = compare_systems([pid_reports[s] for s in STRATEGIES], sigtest)
    costs = {s: results[s].cost for s in STRATEGIES}
    compare_report(out, reports, costs, sig, pid_reports, pid_sig, figures=cfg.figures)
    return {
        "docs": docs,
        "queries": queries,
        "results": results,
        "qrels": qrels,
        "reports": reports,
        "pid_reports": pid_reports,
        "significance": sig,
        "costs": costs,
    }
