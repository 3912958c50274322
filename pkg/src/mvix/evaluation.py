"""Ranking metrics over TREC-style relevance judgments.

Qrels map query_id -> {doc_id -> integer relevance >= 0}. DCG uses the
linear-gain form rel / log2(rank + 1).
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

from .engine import RankedList
from .errors import MissingQrelsError

Qrels = dict[str, dict[str, int]]


def read_qrels(path) -> Qrels:
    """Parse `qid 0 doc_id relevance` lines (whitespace-separated)."""
    qrels: Qrels = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{line_no}: expected 4 fields, got {len(parts)}")
        qid, _, doc_id, rel = parts
        qrels.setdefault(qid, {})[doc_id] = int(rel)
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    lines = [
        f"{qid} 0 {doc_id} {rel}"
        for qid in qrels
        for doc_id, rel in qrels[qid].items()
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _rels_for(ranked: RankedList, qrels: Qrels) -> dict[str, int]:
    if ranked.query_id not in qrels:
        raise MissingQrelsError(f"no judgments for query {ranked.query_id!r}")
    return qrels[ranked.query_id]


def ndcg_at_k(ranked: RankedList, qrels: Qrels, k: int = 10) -> float:
    """Discounted gain of the ranking over the ideal ranking, in [0, 1]."""
    rels = _rels_for(ranked, qrels)
    dcg = 0.0
    for i, (doc_id, _) in enumerate(ranked.hits[:k], start=1):
        rel = rels.get(doc_id, 0)
        if rel > 0:
            dcg += rel / math.log2(i + 1)
    ideal = sorted(rels.values(), reverse=True)[:k]
    idcg = sum(rel / math.log2(i + 1) for i, rel in enumerate(ideal, start=1) if rel > 0)
    return dcg / idcg if idcg > 0 else 0.0


def mrr_at_k(ranked: RankedList, qrels: Qrels, k: int = 10) -> float:
    """Reciprocal rank of the first relevant hit within the top k, else 0."""
    rels = _rels_for(ranked, qrels)
    for i, (doc_id, _) in enumerate(ranked.hits[:k], start=1):
        if rels.get(doc_id, 0) > 0:
            return 1.0 / i
    return 0.0


def recall_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    """Fraction of relevant documents appearing in the top k."""
    rels = _rels_for(ranked, qrels)
    relevant = {doc_id for doc_id, rel in rels.items() if rel > 0}
    if not relevant:
        return 0.0
    found = {doc_id for doc_id, _ in ranked.hits[:k]} & relevant
    return len(found) / len(relevant)


METRICS = {
    "ndcg": ndcg_at_k,
    "mrr": mrr_at_k,
    "recall": recall_at_k,
}


def parse_metric(name: str):
    """'ndcg@10' -> (callable, 10). Known families: ndcg, mrr, recall."""
    base, _, cutoff = name.partition("@")
    base = base.lower()
    if base not in METRICS or not cutoff.isdigit():
        raise ValueError(f"unknown metric {name!r}; use e.g. ndcg@10, mrr@10, recall@1000")
    return METRICS[base], int(cutoff)


def evaluate_run(
    ranked_lists: Sequence[RankedList], qrels: Qrels, metric: str
) -> tuple[float, dict[str, float]]:
    """Mean metric over queries plus the per-query breakdown."""
    fn, cutoff = parse_metric(metric)
    per_query = {r.query_id: fn(r, qrels, cutoff) for r in ranked_lists}
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return mean, per_query
