import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkbench.evalkit import (
    EvalConfig,
    FormatError,
    MetricReport,
    PoolConfig,
    Run,
    SigResult,
    SigTestConfig,
    average_precision_at_k,
    compare_systems,
    dcg_at_k,
    evaluate,
    f1_at_k,
    fisher_randomization,
    ndcg_at_k,
    parse_pool,
    parse_qrels,
    parse_run,
    parse_significance,
    pool_runs,
    reciprocal_rank,
    write_pool,
    write_qrels,
    write_run,
    write_significance,
)


# ---------------------------------------------------------------- references

def ref_ndcg(ranked, judged, k):
    # ideal DCG by brute force over every ordering of the judged grades
    def dcg(gs):
        return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(gs[:k]))

    judged = list(judged)
    if len(judged) <= 7:
        best = max((dcg(list(p)) for p in itertools.permutations(judged)), default=0.0)
    else:
        best = dcg(sorted(judged, reverse=True))
    return dcg(list(ranked)) / best if best > 0 else 0.0


def ref_ap(flags, n_rel, k):
    if n_rel == 0:
        return 0.0
    precisions = [sum(flags[:i + 1]) / (i + 1) for i in range(min(k, len(flags))) if flags[i]]
    return sum(precisions) / min(n_rel, k)


def ref_f1(flags, n_rel, k):
    hits = sum(flags[:k])
    if hits == 0:
        return 0.0
    p, r = hits / k, hits / n_rel
    return 2 * p * r / (p + r)


def ref_rr(flags):
    return next((1.0 / (i + 1) for i, f in enumerate(flags) if f), 0.0)


def random_instance(rng):
    n = rng.randint(0, 20)
    ranked = [rng.choice((0, 0, 1, 2)) for _ in range(n)]
    extra = [rng.choice((0, 1, 2)) for _ in range(rng.randint(0, 6))]
    return ranked, ranked + extra


def test_metrics_match_brute_force_references():
    rng = random.Random(12345)
    for _ in range(1500):
        ranked, judged = random_instance(rng)
        flags = [1 if g >= 1 else 0 for g in ranked]
        n_rel = sum(1 for g in judged if g >= 1)
        for k in (1, 3, 5, 10):
            assert abs(ndcg_at_k(ranked, judged, k) - ref_ndcg(ranked, judged, k)) <= 1e-9
            assert abs(average_precision_at_k(ranked, n_rel, k) - ref_ap(flags, n_rel, k)) <= 1e-9
            if n_rel:
                assert abs(f1_at_k(ranked, n_rel, k) - ref_f1(flags, n_rel, k)) <= 1e-9
        assert reciprocal_rank(ranked) == ref_rr(flags)


def test_worked_values():
    assert ndcg_at_k([2, 0, 1], [2, 1, 0], 3) == pytest.approx(0.9639, abs=1e-4)
    assert dcg_at_k([2, 0, 1], 3) == pytest.approx(3.5)
    assert average_precision_at_k([1, 0, 1], 2, 3) == pytest.approx(0.8333, abs=1e-4)
    assert f1_at_k([1, 0, 1, 0, 0], 4, 5) == pytest.approx(0.4444, abs=1e-4)
    assert ndcg_at_k([2, 2, 1, 0], [2, 1, 2, 0], 4) == 1.0
    assert ndcg_at_k([0, 0], [0, 0], 2) == 0.0
    assert reciprocal_rank([0, 0, 1]) == pytest.approx(1 / 3)
    assert reciprocal_rank([0, 0]) == 0.0
    assert average_precision_at_k([1, 1, 1], 5, 3) == 1.0
    assert average_precision_at_k([0, 0, 0], 2, 3) == 0.0
    assert f1_at_k([1, 1, 1], 3, 3) == 1.0
    assert f1_at_k([0, 0, 0], 3, 3) == 0.0


def test_threshold_two_counts_only_highly_relevant():
    assert reciprocal_rank([1, 2], threshold=2) == 0.5
    assert f1_at_k([1, 2, 0], 1, 3, threshold=2) == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2]), max_size=20), st.lists(st.sampled_from([0, 1, 2]), max_size=5),
       st.integers(1, 20))
def test_metric_ranges(ranked, extra, k):
    judged = ranked + extra
    n_rel = sum(1 for g in judged if g >= 1)
    for v in (ndcg_at_k(ranked, judged, k), reciprocal_rank(ranked),
              average_precision_at_k(ranked, n_rel, k), f1_at_k(ranked, n_rel, k)):
        assert 0.0 <= v <= 1.0 + 1e-12


# ---------------------------------------------------------------- qrels / runs

def test_parse_qrels_line():
    assert parse_qrels("q1 0 d7 2\n") == {"q1": {"d7": 2}}


@pytest.mark.parametrize("text,lineno", [
    ("q1 0 d7 3\n", 1),
    ("q1 0 d7 1\nq1 0 d7\n", 2),
    ("q1 0 d7 1\nq1 0 d7 2\n", 2),
])
def test_parse_qrels_errors(text, lineno):
    with pytest.raises(FormatError) as err:
        parse_qrels(text)
    assert err.value.lineno == lineno


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(
    st.from_regex(r"q[0-9]{1,3}", fullmatch=True),
    st.dictionaries(st.from_regex(r"[a-z]{1,4}:[a-z]{1,4}:[0-9]{5}", fullmatch=True),
                    st.sampled_from([0, 1, 2]), min_size=1, max_size=6),
    max_size=6))
def test_qrels_round_trip(qrels):
    text = write_qrels(qrels)
    assert parse_qrels(text) == qrels
    assert write_qrels(parse_qrels(text)) == text
    for line in text.splitlines():
        q, zero, c, g = line.split(" ")
        assert zero == "0" and g in "012"


def test_parse_run_line_and_errors():
    run = parse_run("q1 Q0 c3 1 0.93 fixed\n")
    assert run.run_tag == "fixed" and run.rankings == {"q1": [("c3", 0.93)]}
    with pytest.raises(FormatError) as err:
        parse_run("q1 Q0 c3 1 0.9 fixed\nq1 Q0 c4 3 0.8 fixed\n")
    assert err.value.lineno == 2
    with pytest.raises(FormatError):
        parse_run("q1 Q0 c3 1 0.9 fixed\nq1 Q0 c3 2 0.8 fixed\n")


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(
    st.from_regex(r"q[0-9]{1,3}", fullmatch=True),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=10),
    max_size=5))
def test_run_round_trip_bit_exact(scores):
    run = Run("tag", {q: [(f"d:{q}:{i:05d}", s) for i, s in enumerate(sorted(v, reverse=True))]
                      for q, v in scores.items()})
    text = write_run(run)
    back = parse_run(text)
    assert back.rankings == run.rankings
    assert write_run(back) == text


# ---------------------------------------------------------------- pooling

def _run(tag, lists):
    return Run(tag, {q: [(c, 1.0 - i / 100) for i, c in enumerate(cs)] for q, cs in lists.items()})


def test_pool_sizes():
    same = [_run(t, {"q1": [f"c{i}" for i in range(10)]}) for t in "abcd"]
    assert len(pool_runs(same)) == 10
    disjoint = [_run(t, {"q1": [f"{t}{i}" for i in range(10)]}) for t in "abcd"]
    assert len(pool_runs(disjoint)) == 40
    shared = [_run("a", {"q1": [f"s{i}" for i in range(4)] + [f"a{i}" for i in range(6)]}),
              _run("b", {"q1": [f"s{i}" for i in range(4)] + [f"b{i}" for i in range(6)]})]
    assert len(pool_runs(shared)) == 16
    deep = [_run("a", {"q1": [f"c{i}" for i in range(20)]})]
    assert len(pool_runs(deep, PoolConfig(10))) == 10


def test_pool_round_trip():
    pairs = pool_runs([_run("a", {"q2": ["x", "y"], "q1": ["z"]})])
    assert parse_pool(write_pool(pairs)) == pairs


# ---------------------------------------------------------------- evaluate

def test_evaluate_ideal_run_and_skips():
    qrels = {"q1": {"a": 2, "b": 1, "c": 0}, "q2": {"x": 1}}
    run = _run("t", {"q1": ["a", "b", "c"], "q2": ["x"], "q3": ["y"]})
    rep = evaluate(run, qrels)
    assert rep.evaluated == 2
    assert rep.skipped == ["q3"]
    for k in (3, 5):
        assert rep.mean(f"NDCG@{k}") == 1.0
    assert rep.mean("MRR") == 1.0


def test_evaluate_mrr_hand_mean():
    qrels = {"q1": {"a": 1}, "q2": {"d": 1}}
    run = _run("t", {"q1": ["a", "b"], "q2": ["a", "b", "c", "d"]})
    assert evaluate(run, qrels).mean("MRR") == pytest.approx(0.625)


def test_empty_run_reports_zero_queries():
    rep = evaluate(Run("t"), {"q1": {"a": 1}})
    assert rep.evaluated == 0


def test_metric_report_csv_round_trip():
    qrels = {"q1": {"a": 2, "b": 1}, "q2": {"x": 1}}
    rep = evaluate(_run("t", {"q1": ["b", "a"], "q2": ["y", "x"]}), qrels)
    back = MetricReport.from_csv(rep.to_csv(), "t")
    assert back.per_query == rep.per_query
    assert back.to_csv() == rep.to_csv()
    assert rep.to_csv().splitlines()[-1].startswith("all,")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_report_means_in_unit_interval(seed):
    rng = random.Random(seed)
    qrels = {f"q{i}": {f"c{j}": rng.choice((0, 1, 2)) for j in rng.sample(range(15), 5)} for i in range(5)}
    run = _run("t", {f"q{i}": [f"c{j}" for j in rng.sample(range(15), 10)] for i in range(5)})
    for v in evaluate(run, qrels, EvalConfig((1, 3, 5, 10))).means.values():
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- significance

def test_fisher_identical_and_enumeration():
    assert fisher_randomization([0.3, 0.5], [0.3, 0.5])[0] == 1.0
    p, sig = fisher_randomization([0.2, 0.2, 0.2], [0, 0, 0], exact=True)
    assert p == pytest.approx(0.25) and not sig


def test_fisher_exact_matches_direct_enumeration():
    rng = random.Random(3)
    diffs = [rng.uniform(-1, 1) for _ in range(10)]
    observed = abs(sum(diffs))
    count = sum(1 for signs in itertools.product((1, -1), repeat=10)
                if abs(sum(s * d for s, d in zip(signs, diffs))) >= observed - 1e-12)
    p, _ = fisher_randomization(diffs, [0.0] * 10, exact=True)
    assert p == count / 1024


def test_fisher_monte_carlo_agrees_with_exact():
    rng = random.Random(7)
    a = [rng.random() for _ in range(12)]
    b = [x + rng.gauss(0.05, 0.2) for x in a]
    cfg = SigTestConfig(rng_seed=11)
    p_exact, _ = fisher_randomization(a, b, cfg, exact=True)
    p_mc, _ = fisher_randomization(a, b, cfg, exact=False)
    assert abs(p_mc - p_exact) <= 3 * math.sqrt(p_exact * (1 - p_exact) / cfg.mc_rounds)
    assert fisher_randomization(a, b, cfg, exact=False) == (p_mc, p_mc < 0.05)


def test_fisher_errors():
    with pytest.raises(ValueError):
        fisher_randomization([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        fisher_randomization([], [])


def test_compare_systems_and_csv():
    qrels = {f"q{i}": {"a": 1} for i in range(8)}
    good = _run("good", {f"q{i}": ["a", "b"] for i in range(8)})
    bad = _run("bad", {f"q{i}": ["b", "c"] for i in range(8)})
    results = compare_systems([evaluate(good, qrels), evaluate(bad, qrels)])
    mrr = next(r for r in results if r.metric == "MRR")
    assert mrr.p_value == pytest.approx(2 / 256) and mrr.significant
    text = write_significance(results)
    back = parse_significance(text)
    assert write_significance(back) == text
    assert [(r.system_a, r.system_b, r.metric, r.significant) for r in back] == \
        [(r.system_a, r.system_b, r.metric, r.significant) for r in results]
    assert isinstance(back[0], SigResult)
