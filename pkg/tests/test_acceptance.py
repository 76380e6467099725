"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE

from chunkbench.bench import PipelineConfig, auto_qrels, generate_queries, run_pipeline
from chunkbench.chunkers import (
    STRATEGIES,
    FixedConfig,
    SemanticConfig,
    chunk_corpus,
    chunk_semantic,
)
from chunkbench.cli import main
from chunkbench.docmodel import Heading, canonicalize, parse_markdown
from chunkbench.embed import Embedder, LocalSpec
from chunkbench.evalkit import (
    SigTestConfig,
    average_precision_at_k,
    f1_at_k,
    fisher_randomization,
    ndcg_at_k,
    parse_pool,
    parse_qrels,
    parse_run,
    reciprocal_rank,
    write_qrels,
    write_run,
)
from chunkbench.vindex import HnswParams, build_index, deserialize_index, serialize_index


@contextmanager
def criterion(n, text):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        ACCEPTANCE[n] = (ok, f"{text} [{elapsed:.1f}s]")
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text} [{elapsed:.1f}s]")


# ---------------------------------------------------------------- 1

def brute_ndcg(ranked, judged, k):
    def dcg(gs):
        return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(gs[:k]))

    counts = [judged.count(g) for g in (0, 1, 2)]
    # every distinct ordering of the judged multiset, capped in size for speed
    if len(judged) <= 6:
        ideal = max((dcg(list(p)) for p in set(itertools.permutations(judged))), default=0.0)
    else:
        ideal = dcg([2] * counts[2] + [1] * counts[1] + [0] * counts[0])
    return dcg(ranked) / ideal if ideal else 0.0


def brute_map(flags, n_rel, k):
    if not n_rel:
        return 0.0
    return sum(sum(flags[:i + 1]) / (i + 1) for i in range(min(k, len(flags))) if flags[i]) / min(n_rel, k)


def brute_f1(flags, n_rel, k):
    hits = sum(flags[:k])
    return 0.0 if hits == 0 else 2 * (hits / k) * (hits / n_rel) / (hits / k + hits / n_rel)


def test_criterion_1_metric_oracles():
    with criterion(1, "metric oracle equivalence over 2000 random instances"):
        t0 = time.perf_counter()
        rng = random.Random(2024)
        worst = 0.0
        for _ in range(2000):
            ranked = [rng.choice((0, 1, 2)) for _ in range(rng.randint(1, 20))]
            judged = ranked + [rng.choice((0, 1, 2)) for _ in range(rng.randint(0, 4))]
            flags = [int(g >= 1) for g in ranked]
            n_rel = sum(g >= 1 for g in judged)
            for k in (3, 5, 10):
                worst = max(worst, abs(ndcg_at_k(ranked, judged, k) - brute_ndcg(ranked, judged, k)))
                worst = max(worst, abs(average_precision_at_k(ranked, n_rel, k) - brute_map(flags, n_rel, k)))
                if n_rel:
                    worst = max(worst, abs(f1_at_k(ranked, n_rel, k) - brute_f1(flags, n_rel, k)))
            rr = next((1 / (i + 1) for i, f in enumerate(flags) if f), 0.0)
            worst = max(worst, abs(reciprocal_rank(ranked) - rr))
        assert worst <= 1e-9
        assert time.perf_counter() - t0 < 10


# ---------------------------------------------------------------- 2

def test_criterion_2_worked_values():
    with criterion(2, "worked NDCG@3, MAP@3, F1@5 values and perfect ranking"):
        assert abs(ndcg_at_k([2, 0, 1], [2, 1, 0], 3) - 0.9639) <= 1e-4
        assert abs(average_precision_at_k([1, 0, 1], 2, 3) - 0.8333) <= 1e-4
        assert abs(f1_at_k([1, 1, 0, 0, 0], 4, 5) - 0.4444) <= 1e-4
        assert ndcg_at_k([2, 1, 1, 0], [1, 0, 2, 1], 4) == 1.0


# ---------------------------------------------------------------- 3

def test_criterion_3_fisher():
    with criterion(3, "Fisher randomization: identity, 2^3 enumeration, Monte Carlo vs exact at n=12"):
        t0 = time.perf_counter()
        a = [0.1, 0.5, 0.7, 0.2]
        assert fisher_randomization(a, a)[0] == 1.0
        assert fisher_randomization([0.2] * 3, [0.0] * 3, exact=True)[0] == pytest.approx(0.25, abs=1e-12)
        rng = random.Random(12)
        x = [rng.random() for _ in range(12)]
        y = [v + rng.gauss(0.1, 0.25) for v in x]
        cfg = SigTestConfig(mc_rounds=100_000, rng_seed=5)
        exact, _ = fisher_randomization(x, y, cfg, exact=True)
        mc, _ = fisher_randomization(x, y, cfg, exact=False)
        assert 0.0 < exact < 1.0
        assert abs(mc - exact) <= 3 * math.sqrt(exact * (1 - exact) / cfg.mc_rounds)
        assert time.perf_counter() - t0 < 30


# ---------------------------------------------------------------- 4

def test_criterion_4_chunker_invariants(docs):
    with criterion(4, "chunker invariants on the seed-1 corpus"):
        t0 = time.perf_counter()
        embedder = Embedder(LocalSpec())
        stores = {s: chunk_corpus(docs, s, embed=embedder) for s in STRATEGIES}
        elapsed = time.perf_counter() - t0
        texts = {d.doc_id: canonicalize(d) for d in docs}

        by_doc = {}
        for c in stores["fixed"]:
            by_doc.setdefault(c.doc_id, []).append(c.char_span)
        for doc_id, (text, _) in texts.items():
            spans = by_doc[doc_id]
            assert spans[0][0] == 0 and spans[-1][1] == len(text)
            assert all(e - s <= 512 for s, e in spans)
            assert all(e0 - s1 == 128 for (_, e0), (s1, _) in zip(spans, spans[1:]))

        for c in stores["recursive"]:
            text = texts[c.doc_id][0]
            s, e = c.char_span
            assert e - s <= 1124 and c.text == text[s:e]
            assert s == 0 or text[s - 1] in " \n"
            assert e == len(text) or text[e - 1] in " \n"

        for c in stores["struct"]:
            text, cdoc = texts[c.doc_id]
            heading_starts = {b.span[0] for b in cdoc.blocks if isinstance(b, Heading)}
            if c.header_path:
                assert c.char_span[0] in heading_starts
            else:
                assert c.char_span[0] == cdoc.blocks[0].span[0]

        same = parse_markdown(" ".join(["Flow control valve FCV-12 opens slowly."] * 40), "same")
        assert len(chunk_semantic(same, SemanticConfig(), embedder)) == 1
        assert elapsed < 60


# ---------------------------------------------------------------- 5

def test_criterion_5_hnsw_recall():
    with criterion(5, "HNSW recall@10 >= 0.95 on 10k unit vectors, byte-identical re-serialization"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        base = rng.standard_normal((10_000, 64))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        queries = rng.standard_normal((100, 64))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        index = build_index([(f"v{i:05d}", v) for i, v in enumerate(base)], HnswParams())
        recall = np.mean([
            len({c for c, _ in index.search_knn(q, 10, 100)} & {c for c, _ in index.search_exact(q, 10)}) / 10
            for q in queries
        ])
        elapsed = time.perf_counter() - t0
        blob = serialize_index(index)
        assert serialize_index(deserialize_index(blob)) == blob
        print(f"recall@10 = {recall:.4f}, build+search {elapsed:.1f}s")
        assert recall >= 0.95
        assert elapsed < 30


# ---------------------------------------------------------------- 6

def test_criterion_6_cost_ordering(experiment):
    with criterion(6, "struct-aware fewest chunks and smallest index; semantic more chunks than recursive"):
        costs = experiment["costs"]
        print({s: (c.total_chunks, c.index_bytes) for s, c in costs.items()})
        others = [s for s in STRATEGIES if s != "struct"]
        assert all(costs["struct"].total_chunks < costs[s].total_chunks for s in others)
        assert all(costs["struct"].index_bytes < costs[s].index_bytes for s in others)
        assert costs["semantic"].total_chunks > costs["recursive"].total_chunks


# ---------------------------------------------------------------- 7

TIMING = {"report_cost.csv", "report_cost.md", "figures/cost.png"}


def snapshot(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.relative_to(root).as_posix() not in TIMING and p.parent.name != "costs"
    }


def test_criterion_7_end_to_end_determinism(tmp_path):
    with criterion(7, "`all --seed 1` twice gives byte-identical non-timing outputs, each run < 5 min"):
        durations = []
        for name in ("run1", "run2"):
            t0 = time.perf_counter()
            assert main(["all", "--seed", "1", "--out-dir", str(tmp_path / name), "--quiet"]) == 0
            durations.append(time.perf_counter() - t0)
        a, b = snapshot(tmp_path / "run1"), snapshot(tmp_path / "run2")
        required = ["corpus/manifest.json", "qrels.txt", "pool.tsv", "report_effectiveness.csv",
                    "report_effectiveness.md"]
        required += [f"{d}/{s}.{e}" for s in STRATEGIES for d, e in
                     (("chunks", "jsonl"), ("indices", "cbix"), ("runs", "trec"))]
        assert all(r in a for r in required)
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []
        assert max(durations) < 300


# ---------------------------------------------------------------- 8

def test_criterion_8_retrieval_sanity(docs):
    with criterion(8, ">= 95% of verbatim-span queries hit a grade >= 1 fixed-size chunk in the exact top 10"):
        queries = generate_queries(docs, 1, 60)
        res = run_pipeline(docs, PipelineConfig("fixed", FixedConfig(), exact=True), queries)
        qrels = auto_qrels(res.chunks, queries)
        hits = sum(
            any(qrels.get(q.query_id, {}).get(cid, 0) >= 1 for cid, _ in res.run.rankings[q.query_id][:10])
            for q in queries
        )
        print(f"{hits}/{len(queries)} queries")
        assert hits / len(queries) >= 0.95


# ---------------------------------------------------------------- 9

def test_criterion_9_format_fidelity(experiment):
    with criterion(9, "qrels/run round-trips, 4-column qrels, depth-10 pools <= 40 without duplicates"):
        out = experiment["out"]
        qrels_text = (out / "qrels.txt").read_text()
        assert write_qrels(parse_qrels(qrels_text)) == qrels_text
        for line in qrels_text.splitlines():
            cols = line.split(" ")
            assert len(cols) == 4 and cols[1] == "0" and cols[3] in ("1", "2")
        for s in STRATEGIES:
            run_text = (out / "runs" / f"{s}.trec").read_text()
            assert write_run(parse_run(run_text)) == run_text
        pool = parse_pool((out / "pool.tsv").read_text())
        assert len(pool) == len(set(pool))
        per_query = {}
        for q, c in pool:
            per_query[q] = per_query.get(q, 0) + 1
        assert len(per_query) == 60
        assert max(per_query.values()) <= 40
