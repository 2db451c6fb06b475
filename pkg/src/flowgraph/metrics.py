"""Retrieval quality metrics and per-query / binned reporting.

Recall@k counts duplicate correct retrievals toward the numerator and is
capped at 1; dedup recall counts unique hits only. Both normalize by
min(k, |targets|). Hit@k and MRR are computed over the deduplicated
ranked list, where a node cannot occupy two ranks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_BINS = ((1, 5), (6, 10), (11, 15), (16, None))


def hit_at_k(ranked: Sequence[str], targets: frozenset[str], k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not targets:
        raise ValueError("targets must be non-empty")
    return int(any(node in targets for node in ranked[:k]))


def mrr(ranked: Sequence[str], targets: frozenset[str]) -> float:
    if not targets:
        raise ValueError("targets must be non-empty")
    for i, node in enumerate(ranked):
        if node in targets:
            return 1.0 / (i + 1)
    return 0.0


def recall_at_k(retrieved: Sequence[str], targets: frozenset[str],
                k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not targets:
        raise ValueError("targets must be non-empty")
    hits = sum(1 for node in retrieved[:k] if node in targets)
    return min(1.0, hits / min(k, len(targets)))


def dedup_recall_at_k(retrieved: Sequence[str], targets: frozenset[str],
                      k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not targets:
        raise ValueError("targets must be non-empty")
    unique_hits = set(retrieved[:k]) & targets
    return len(unique_hits) / min(k, len(targets))


def difficulty_bin(num_targets: int,
                   bins: tuple = DEFAULT_BINS) -> int:
    for i, (lo, hi) in enumerate(bins, start=1):
        if num_targets >= lo and (hi is None or num_targets <= hi):
            return i
    raise ValueError(f"no bin for {num_targets} targets")


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregates: dict[str, dict[str, float]]  # "overall" / "bin_i" -> metric
    config: dict = field(default_factory=dict)

    METRICS = ("hit@1", "hit@5", "mrr", "r@20", "d-r@20")
    COLUMNS = ("qid", "num_targets", "bin") + METRICS

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"rows": self.rows, "aggregates": self.aggregates,
                       "config": self.config}, fh, indent=2, sort_keys=True)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row[c] for c in self.COLUMNS})
            for name in sorted(self.aggregates):
                agg = self.aggregates[name]
                writer.writerow({"qid": f"<{name}>", "num_targets": "",
                                 "bin": "",
                                 **{m: agg[m] for m in self.METRICS}})


def evaluate(results: Sequence, queries, bins: tuple = DEFAULT_BINS,
             k_recall: int = 20) -> MetricsReport:
    """Per-query metrics and unweighted-mean aggregates, overall and per
    difficulty bin.

    `results` entries may be RetrievalResult objects or dicts loaded from
    a results file; each must expose the ranked node list and raw sample
    terminals for the query."""
    by_qid = {q.qid: q for q in queries}
    rows = []
    for res in results:
        if isinstance(res, dict):
            qid = res["qid"]
            ranked = [entry["node"] for entry in res["ranked"]]
            samples = list(res["sample_terminals"])
        else:
            qid = res.qid
            ranked = res.ranked_nodes()
            samples = res.sample_nodes()
        if qid not in by_qid:
            raise ValueError(f"result for unknown qid {qid!r}")
        targets = by_qid[qid].targets
        rows.append({
            "qid": qid,
            "num_targets": len(targets),
            "bin": difficulty_bin(len(targets), bins),
            "hit@1": hit_at_k(ranked, targets, 1),
            "hit@5": hit_at_k(ranked, targets, 5),
            "mrr": mrr(ranked, targets),
            "r@20": recall_at_k(samples, targets, k_recall),
            "d-r@20": dedup_recall_at_k(samples, targets, k_recall),
        })
    aggregates = {"overall": _mean_metrics(rows)}
    for b in sorted({row["bin"] for row in rows}):
        aggregates[f"bin_{b}"] = _mean_metrics(
            [row for row in rows if row["bin"] == b])
    return MetricsReport(rows=rows, aggregates=aggregates,
                         config={"bins": [list(b) for b in bins],
                                 "k_recall": k_recall})


def _mean_metrics(rows: list[dict]) -> dict[str, float]:
    return {m: sum(row[m] for row in rows) / len(rows)
            for m in MetricsReport.METRICS}
