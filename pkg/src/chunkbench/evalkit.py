"""TREC-style qrels/run I/O, pooling, graded-relevance metrics and Fisher's
randomization test for paired per-query scores."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

# query_id -> chunk_id -> grade
Qrels = dict[str, dict[str, int]]

GRADES = (0, 1, 2)


class FormatError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


# --------------------------------------------------------------------------
# qrels

def parse_qrels(text: str) -> Qrels:
    qrels: Qrels = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 4:
            raise FormatError(f"expected 4 columns, got {len(cols)}", lineno)
        qid, zero, cid, grade = cols
        if zero != "0":
            raise FormatError(f"second column must be 0, got {zero!r}", lineno)
        try:
            g = int(grade)
        except ValueError:
            raise FormatError(f"grade {grade!r} is not an integer", lineno) from None
        if g not in GRADES:
            raise FormatError(f"grade {g} outside the 0/1/2 scale", lineno)
        per = qrels.setdefault(qid, {})
        if cid in per:
            raise FormatError(f"duplicate judgment for ({qid}, {cid})", lineno)
        per[cid] = g
    return qrels


def write_qrels(qrels: Qrels) -> str:
    lines = []
    for qid in sorted(qrels):
        for cid in sorted(qrels[qid]):
            lines.append(f"{qid} 0 {cid} {qrels[qid][cid]}\n")
    return "".join(lines)


# --------------------------------------------------------------------------
# runs

@dataclass
class Run:
    run_tag: str
    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def validate(self):
        for qid, ranked in self.rankings.items():
            seen = set()
            prev = math.inf
            for cid, score in ranked:
                if cid in seen:
                    raise FormatError(f"query {qid}: duplicate chunk {cid}")
                if score > prev:
                    raise FormatError(f"query {qid}: scores must be non-increasing")
                seen.add(cid)
                prev = score


def parse_run(text: str) -> Run:
    run: Optional[Run] = None
    last_rank: dict[str, int] = {}
    seen: dict[str, set] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 6:
            raise FormatError(f"expected 6 columns, got {len(cols)}", lineno)
        qid, q0, cid, rank_s, score_s, tag = cols
        try:
            rank = int(rank_s)
            score = float(score_s)
        except ValueError:
            raise FormatError("rank must be an integer and score a real number", lineno) from None
        if run is None:
            run = Run(tag)
        elif tag != run.run_tag:
            raise FormatError(f"run tag {tag!r} differs from {run.run_tag!r}", lineno)
        expected = last_rank.get(qid, 0) + 1
        if rank != expected:
            raise FormatError(f"query {qid}: rank {rank} is not contiguous (expected {expected})", lineno)
        if cid in seen.setdefault(qid, set()):
            raise FormatError(f"query {qid}: duplicate chunk {cid}", lineno)
        ranked = run.rankings.setdefault(qid, [])
        if ranked and score > ranked[-1][1]:
            raise FormatError(f"query {qid}: scores must be non-increasing", lineno)
        seen[qid].add(cid)
        last_rank[qid] = rank
        ranked.append((cid, score))
    return run if run is not None else Run("")


def write_run(run: Run) -> str:
    lines = []
    for qid in sorted(run.rankings):
        for rank, (cid, score) in enumerate(run.rankings[qid], 1):
            lines.append(f"{qid} Q0 {cid} {rank} {score!r} {run.run_tag}\n")
    return "".join(lines)


# --------------------------------------------------------------------------
# pooling

@dataclass(frozen=True)
class PoolConfig:
    depth: int = 10

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("pool depth must be >= 1")


def pool_runs(runs: Sequence[Run], cfg: PoolConfig = PoolConfig()) -> list[tuple[str, str]]:
    if not runs:
        raise ValueError("pooling needs at least one run")
    pool: dict[str, set] = {}
    for run in runs:
        for qid, ranked in run.rankings.items():
            pool.setdefault(qid, set()).update(cid for cid, _ in ranked[:cfg.depth])
    return [(qid, cid) for qid in sorted(pool) for cid in sorted(pool[qid])]


def write_pool(pairs: Iterable[tuple[str, str]]) -> str:
    return "".join(f"{q}\t{c}\n" for q, c in pairs)


def parse_pool(text: str) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise FormatError("expected query_id<TAB>chunk_id", lineno)
        out.append((cols[0], cols[1]))
    return out


# --------------------------------------------------------------------------
# metrics

def dcg_at_k(grades: Sequence[int], k: int) -> float:
    return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def ndcg_at_k(ranked: Sequence[int], judged: Iterable[int], k: int) -> float:
    """Exponential-gain NDCG; the ideal ordering is built from every judged grade."""
    ideal = dcg_at_k(sorted(judged, reverse=True), k)
    if ideal == 0:
        return 0.0
    return dcg_at_k(ranked, k) / ideal


def reciprocal_rank(ranked: Sequence[int], threshold: int = 1) -> float:
    for i, g in enumerate(ranked, 1):
        if g >= threshold:
            return 1.0 / i
    return 0.0


def average_precision_at_k(ranked: Sequence[int], n_relevant: int, k: int, threshold: int = 1) -> float:
    if n_relevant <= 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, g in enumerate(ranked[:k], 1):
        if g >= threshold:
            hits += 1
            total += hits / i
    return total / min(n_relevant, k)


def f1_at_k(ranked: Sequence[int], n_relevant: int, k: int, threshold: int = 1) -> float:
    if n_relevant <= 0:
        return 0.0
    hits = sum(1 for g in ranked[:k] if g >= threshold)
    precision = hits / k
    recall = hits / n_relevant
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalConfig:
    cutoffs: tuple[int, ...] = (3, 5)
    threshold: int = 1

    def __post_init__(self):
        object.__setattr__(self, "cutoffs", tuple(self.cutoffs))
        if not self.cutoffs or any(k < 1 for k in self.cutoffs) or list(self.cutoffs) != sorted(self.cutoffs):
            raise ValueError("cutoffs must be positive and sorted")
        if self.threshold not in (1, 2):
            raise ValueError("relevance threshold must be 1 or 2")

    @property
    def metric_names(self) -> list[str]:
        names = ["MRR"]
        for family in ("NDCG", "MAP", "F1"):
            names += [f"{family}@{k}" for k in self.cutoffs]
        return names


@dataclass
class MetricReport:
    run_tag: str
    metric_names: list[str]
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def evaluated(self) -> int:
        return len(self.per_query)

    def mean(self, name: str) -> float:
        if not self.per_query:
            return 0.0
        return sum(m[name] for m in self.per_query.values()) / len(self.per_query)

    @property
    def means(self) -> dict[str, float]:
        return {name: self.mean(name) for name in self.metric_names}

    def values(self, name: str, query_ids: Sequence[str]) -> list[float]:
        return [self.per_query[q][name] for q in query_ids]

    def subset(self, query_ids: Iterable[str]) -> "MetricReport":
        keep = set(query_ids)
        return MetricReport(
            self.run_tag,
            list(self.metric_names),
            {q: m for q, m in self.per_query.items() if q in keep},
            [q for q in self.skipped if q in keep],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "evaluated"] + self.metric_names)
        rows = [(q, 1) for q in self.per_query] + [(q, 0) for q in self.skipped]
        for qid, ok in sorted(rows):
            # full precision so significance tests read back the exact values
            vals = [repr(self.per_query[qid][n]) for n in self.metric_names] if ok else [""] * len(self.metric_names)
            w.writerow([qid, ok] + vals)
        w.writerow(["all", self.evaluated] + [f"{self.mean(n):.6f}" for n in self.metric_names])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, run_tag: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:2] != ["query_id", "evaluated"]:
            raise FormatError("not a metric report CSV")
        names = rows[0][2:]
        report = cls(run_tag, names)
        for lineno, row in enumerate(rows[1:], 2):
            if row[0] == "all":
                continue
            if row[1] == "1":
                try:
                    report.per_query[row[0]] = {n: float(v) for n, v in zip(names, row[2:])}
                except ValueError:
                    raise FormatError("metric values must be numbers", lineno) from None
            else:
                report.skipped.append(row[0])
        return report


def evaluate(run: Run, qrels: Qrels, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    report = MetricReport(run.run_tag, cfg.metric_names)
    for qid in sorted(run.rankings):
        judged = qrels.get(qid, {})
        n_rel = sum(1 for g in judged.values() if g >= cfg.threshold)
        if n_rel == 0:
            report.skipped.append(qid)
            continue
        ranked = [judged.get(cid, 0) for cid, _ in run.rankings[qid]]
        row = {"MRR": reciprocal_rank(ranked, cfg.threshold)}
        for k in cfg.cutoffs:
            row[f"NDCG@{k}"] = ndcg_at_k(ranked, judged.values(), k)
        for k in cfg.cutoffs:
            row[f"MAP@{k}"] = average_precision_at_k(ranked, n_rel, k, cfg.threshold)
        for k in cfg.cutoffs:
            row[f"F1@{k}"] = f1_at_k(ranked, n_rel, k, cfg.threshold)
        report.per_query[qid] = row
    return report


# --------------------------------------------------------------------------
# significance

@dataclass(frozen=True)
class SigTestConfig:
    alpha: float = 0.05
    mc_rounds: int = 100_000
    rng_seed: int = 0
    exact_max: int = 20

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mc_rounds < 1000:
            raise ValueError("mc_rounds must be >= 1000")


_MASK64 = np.uint64(0xFFFF_FFFF_FFFF_FFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _round_signs(key: np.uint64, rounds: np.ndarray, n: int) -> np.ndarray:
    """(len(rounds), n) boolean matrix; row r is a pure function of (key, r)."""
    blocks = (n + 63) // 64
    cols = []
    for j in range(blocks):
        words = _splitmix64((rounds.astype(np.uint64) * np.uint64(1024) + np.uint64(j)) ^ key)
        width = min(64, n - 64 * j)
        shifts = np.arange(width, dtype=np.uint64)
        cols.append(((words[:, None] >> shifts[None, :]) & np.uint64(1)).astype(bool))
    return np.concatenate(cols, axis=1)


def _tolerance(diffs: np.ndarray) -> float:
    return 1e-12 * max(1.0, float(np.abs(diffs).sum()))


def _exact_p(diffs: np.ndarray) -> float:
    observed = abs(float(diffs.sum()))
    sums = np.zeros(1)
    for d in diffs:
        sums = np.concatenate((sums + d, sums - d))
    hits = np.count_nonzero(np.abs(sums) >= observed - _tolerance(diffs))
    return hits / sums.size


def _monte_carlo_p(diffs: np.ndarray, rounds: int, seed: int, batch: int = 8192) -> float:
    observed = abs(float(diffs.sum()))
    tol = _tolerance(diffs)
    key = _splitmix64(np.array([seed & 0xFFFF_FFFF_FFFF_FFFF], dtype=np.uint64))[0]
    hits = 1  # round 0 is the identity assignment
    for start in range(1, rounds, batch):
        idx = np.arange(start, min(start + batch, rounds), dtype=np.uint64)
        signs = _round_signs(key, idx, diffs.size)
        sums = np.where(signs, diffs[None, :], -diffs[None, :]).sum(axis=1)
        hits += int(np.count_nonzero(np.abs(sums) >= observed - tol))
    return hits / rounds


def fisher_randomization(a: Sequence[float], b: Sequence[float],
                         cfg: SigTestConfig = SigTestConfig(), exact: Optional[bool] = None) -> tuple[float, bool]:
    """Two-sided paired randomization test on the mean difference.

    Exact enumeration of all sign flips when ``len(a) <= cfg.exact_max``
    (or ``exact=True``), seeded Monte Carlo otherwise.
    """
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("randomization test needs at least one paired observation")
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if exact is None:
        exact = diffs.size <= cfg.exact_max
    if exact:
        p = _exact_p(diffs)
    else:
        p = _monte_carlo_p(diffs, cfg.mc_rounds, cfg.rng_seed)
    return p, p < cfg.alpha


@dataclass(frozen=True)
class SigResult:
    system_a: str
    system_b: str
    metric: str
    p_value: float
    significant: bool


def compare_systems(reports: Sequence[MetricReport], cfg: SigTestConfig = SigTestConfig()) -> list[SigResult]:
    """All-pairs tests on each metric over the queries every system evaluated."""
    if not reports:
        return []
    common = sorted(set.intersection(*(set(r.per_query) for r in reports)))
    out = []
    if not common:
        return out
    for i, ra in enumerate(reports):
        for rb in reports[i + 1:]:
            for name in ra.metric_names:
                p, sig = fisher_randomization(ra.values(name, common), rb.values(name, common), cfg)
                out.append(SigResult(ra.run_tag, rb.run_tag, name, p, sig))
    return out


def write_significance(results: Iterable[SigResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system_a", "system_b", "metric", "p_value", "significant"])
    for r in results:
        w.writerow([r.system_a, r.system_b, r.metric, f"{r.p_value:.6f}", "true" if r.significant else "false"])
    return buf.getvalue()


def parse_significance(text: str) -> list[SigResult]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["system_a", "system_b", "metric", "p_value", "significant"]:
        raise FormatError("not a significance CSV")
    return [SigResult(a, b, m, float(p), s == "true") for a, b, m, p, s in rows[1:]]
