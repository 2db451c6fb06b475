import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgraph.kg import Query, QuerySet
from flowgraph.metrics import (DEFAULT_BINS, MetricsReport, dedup_recall_at_k,
                               difficulty_bin, evaluate, hit_at_k, mrr,
                               recall_at_k)

T = frozenset({"a", "b"})


def test_hit_at_k_examples():
    assert hit_at_k(["a", "x"], T, 1) == 1          # target at rank 1, k=1
    assert hit_at_k(["x1", "x2", "x3", "x4", "x5", "a"], T, 5) == 0
    assert hit_at_k([], T, 5) == 0                  # empty ranked list
    with pytest.raises(ValueError):
        hit_at_k(["a"], T, 0)
    with pytest.raises(ValueError):
        hit_at_k(["a"], frozenset(), 1)


def test_mrr_examples():
    assert mrr(["a", "x"], T) == 1.0
    assert mrr(["x", "y", "z", "b"], T) == 0.25
    assert mrr(["x", "y"], T) == 0.0


def test_recall_at_k_examples():
    assert recall_at_k(["a"] * 20, T, 20) == 1.0    # duplicates count, capped
    assert recall_at_k(["a"] + ["x"] * 19, T, 20) == 0.5
    assert recall_at_k(["x"] * 20, T, 20) == 0.0


def test_dedup_recall_at_k_examples():
    assert dedup_recall_at_k(["a"] * 20, T, 20) == 0.5
    dup_free = ["a", "b", "x", "y"]
    assert dedup_recall_at_k(dup_free, T, 20) == 1.0
    assert dedup_recall_at_k(dup_free, T, 20) == recall_at_k(dup_free, T, 20)
    assert dedup_recall_at_k(["x"] * 20, T, 20) == 0.0


def test_recall_normalizer_min_k_targets():
    many = frozenset(f"t{i}" for i in range(30))
    # 30 targets but k=20: normalizer is 20.
    retrieved = [f"t{i}" for i in range(10)]
    assert recall_at_k(retrieved, many, 20) == 0.5
    assert dedup_recall_at_k(retrieved, many, 20) == 0.5


def test_difficulty_bins():
    assert [difficulty_bin(n) for n in (1, 5, 6, 10, 11, 15, 16, 200)] == \
        [1, 1, 2, 2, 3, 3, 4, 4]
    with pytest.raises(ValueError):
        difficulty_bin(0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "x", "y", "z"]), max_size=12),
       st.integers(min_value=1, max_value=12))
def test_metric_properties(ranked, k):
    # hit@k monotone in k; mrr >= 1/k whenever hit@k = 1; all in [0, 1].
    assert hit_at_k(ranked, T, k) <= hit_at_k(ranked, T, k + 1)
    if hit_at_k(ranked, T, k) == 1:
        assert mrr(ranked, T) >= 1.0 / k
    for value in (mrr(ranked, T), recall_at_k(ranked, T, k),
                  dedup_recall_at_k(ranked, T, k)):
        assert 0.0 <= value <= 1.0
    dedup = list(dict.fromkeys(ranked))
    assert recall_at_k(dedup, T, k) == dedup_recall_at_k(dedup, T, k)


def test_metrics_invariant_to_nontarget_relabeling():
    ranked = ["x", "a", "y", "b"]
    renamed = ["u1", "a", "u2", "b"]
    for fn in (lambda r: hit_at_k(r, T, 1), lambda r: mrr(r, T),
               lambda r: recall_at_k(r, T, 4),
               lambda r: dedup_recall_at_k(r, T, 4)):
        assert fn(ranked) == fn(renamed)


def _result(qid, ranked, samples):
    return {"qid": qid, "ranked": [{"node": n} for n in ranked],
            "sample_terminals": samples}


def golden_fixture():
    queries = QuerySet([
        Query("qA", "", frozenset({"a"})),
        Query("qB", "", frozenset({f"b{i}" for i in range(1, 8)})),
        Query("qC", "", frozenset({f"c{i}" for i in range(1, 17)})),
    ])
    results = [
        _result("qA", ["a", "x", "y"], ["a"] * 20),
        _result("qB", ["x", "b1", "y"],
                ["b1"] * 3 + ["b2"] + ["x"] * 16),
        _result("qC", ["z"], ["z"] * 20),
    ]
    return queries, results


def test_evaluate_golden_report():
    """Three queries, one per regime, checked against hand-computed values."""
    queries, results = golden_fixture()
    report = evaluate(results, queries)
    rows = {row["qid"]: row for row in report.rows}

    assert rows["qA"] == {"qid": "qA", "num_targets": 1, "bin": 1,
                          "hit@1": 1, "hit@5": 1, "mrr": 1.0,
                          "r@20": 1.0, "d-r@20": 1.0}
    # qB: 7 targets (bin 2); first hit at rank 2; 4 correct samples
    # (3 duplicates of b1 plus b2) over normalizer 7; 2 unique hits.
    qb = rows["qB"]
    assert qb["bin"] == 2
    assert qb["hit@1"] == 0 and qb["hit@5"] == 1
    assert qb["mrr"] == pytest.approx(0.5, abs=1e-9)
    assert qb["r@20"] == pytest.approx(4.0 / 7.0, abs=1e-9)
    assert qb["d-r@20"] == pytest.approx(2.0 / 7.0, abs=1e-9)
    qc = rows["qC"]
    assert qc["bin"] == 4
    assert all(qc[m] == 0.0 for m in MetricsReport.METRICS)

    agg = report.aggregates
    assert agg["overall"]["hit@1"] == pytest.approx(1.0 / 3.0, abs=1e-9)
    assert agg["overall"]["hit@5"] == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert agg["overall"]["mrr"] == pytest.approx(0.5, abs=1e-9)
    assert agg["overall"]["r@20"] == pytest.approx((1.0 + 4 / 7) / 3, abs=1e-9)
    assert agg["overall"]["d-r@20"] == pytest.approx((1.0 + 2 / 7) / 3,
                                                     abs=1e-9)
    assert agg["bin_1"]["hit@1"] == 1.0
    assert agg["bin_2"]["mrr"] == pytest.approx(0.5, abs=1e-9)
    assert agg["bin_4"]["r@20"] == 0.0


def test_evaluate_trivial_aggregates():
    queries = QuerySet([Query("q1", "", frozenset({"a"})),
                        Query("q2", "", frozenset({"b"}))])
    results = [_result("q1", ["a"], ["a"] * 20),
               _result("q2", ["x"], ["x"] * 20)]
    report = evaluate(results, queries)
    for m in MetricsReport.METRICS:
        assert report.aggregates["overall"][m] == 0.5


def test_evaluate_single_perfect_query():
    queries = QuerySet([Query("q1", "", frozenset({"a"}))])
    report = evaluate([_result("q1", ["a"], ["a"] * 20)], queries)
    for m in MetricsReport.METRICS:
        assert report.aggregates["overall"][m] == 1.0


def test_evaluate_unknown_qid_raises():
    queries = QuerySet([Query("q1", "", frozenset({"a"}))])
    with pytest.raises(ValueError):
        evaluate([_result("q9", ["a"], ["a"])], queries)


def test_report_serialization(tmp_path):
    queries, results = golden_fixture()
    report = evaluate(results, queries)
    jpath, cpath = tmp_path / "report.json", tmp_path / "report.csv"
    report.to_json(str(jpath))
    loaded = json.loads(jpath.read_text())
    assert loaded["aggregates"] == report.aggregates
    assert loaded["config"]["bins"] == [list(b) for b in DEFAULT_BINS]

    report.to_csv(str(cpath))
    with open(cpath) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(MetricsReport.COLUMNS)
    assert [r[0] for r in rows[1:]] == \
        ["qA", "qB", "qC", "<bin_1>", "<bin_2>", "<bin_4>", "<overall>"]
