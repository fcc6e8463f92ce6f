"""Retrieval quality metrics: AP, mAP, precision@k and recall@k.

Average precision for one query over a ranked list of n results:

    AP = sum_{k=1..n} P(k) * rel(k) / R

where P(k) is the precision of the top k results, rel(k) is 1 when the
k-th result is relevant, and R is the total number of relevant images in
the judgments (not just those retrieved). Relevance is binary; unjudged
images count as non-relevant. mAP is the unweighted mean of per-query AP
over the judged queries.

File formats: qrels are text lines ``query_id<TAB>image_id``; run files
are ``query_id<TAB>rank<TAB>image_id<TAB>distance`` with ranks starting
at 1 per query.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import DataError, FormatError, IntegrityError

log = logging.getLogger(__name__)


def average_precision(ranked, relevant, n: int | None = None) -> float:
    """AP of one ranked list against a non-empty relevant set."""
    ranked = list(ranked)
    relevant = set(relevant)
    if not relevant:
        raise DataError("relevant set is empty: AP is undefined (R = 0)")
    if len(set(ranked)) != len(ranked):
        raise DataError("ranked list contains duplicate ids")
    if n is None:
        n = len(ranked)
    hits = 0
    total = 0.0
    for k, image_id in enumerate(ranked[:n], start=1):
        if image_id in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


@dataclass
class MapReport:
    map: float
    per_query: dict[str, float]
    unjudged: list[str] = field(default_factory=list)


def mean_average_precision(run: dict[str, list[str]],
                           qrels: dict[str, set[str]]) -> MapReport:
    """Unweighted mean AP over judged queries.

    Run queries without judgments are excluded, listed in the report and
    logged as a warning; having zero judged queries is an error.
    """
    per_query: dict[str, float] = {}
    unjudged: list[str] = []
    for query_id in run:
        if query_id in qrels and qrels[query_id]:
            per_query[query_id] = average_precision(run[query_id], qrels[query_id])
        else:
            unjudged.append(query_id)
    if unjudged:
        log.warning("excluding %d unjudged queries: %s", len(unjudged), unjudged)
    if not per_query:
        raise DataError("no judged queries: mAP is undefined")
    return MapReport(
        map=sum(per_query.values()) / len(per_query),
        per_query=per_query,
        unjudged=unjudged,
    )


def precision_recall_at_k(ranked, relevant, k: int) -> tuple[float, float]:
    """(precision@k, recall@k); precision divides by k even when the list
    is shorter."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    relevant = set(relevant)
    if not relevant:
        raise DataError("relevant set is empty")
    hits = sum(1 for image_id in list(ranked)[:k] if image_id in relevant)
    return hits / k, hits / len(relevant)


# ---------------------------------------------------------------------------
# run / qrels files
# ---------------------------------------------------------------------------

def read_qrels(path) -> dict[str, set[str]]:
    qrels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    f"qrels line {lineno}: expected 'query<TAB>image', got {line!r}"
                )
            qrels.setdefault(parts[0], set()).add(parts[1])
    return qrels


def read_run(path) -> dict[str, list[str]]:
    """Ranked ids per query, ordered by the rank column."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(
                    f"run line {lineno}: expected "
                    f"'query<TAB>rank<TAB>image<TAB>distance', got {line!r}"
                )
            query_id, rank_s, image_id, _dist = parts
            try:
                rank = int(rank_s)
            except ValueError as exc:
                raise FormatError(f"run line {lineno}: bad rank {rank_s!r}") from exc
            rows.setdefault(query_id, []).append((rank, image_id))

    run: dict[str, list[str]] = {}
    for query_id, entries in rows.items():
        entries.sort(key=lambda item: item[0])
        ids = [image_id for _, image_id in entries]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"query '{query_id}' has duplicate image ids")
        run[query_id] = ids
    return run


def write_run(path, run: dict[str, list[tuple[str, float]]]) -> None:
    """Write per-query (image_id, distance) rankings in run-file format."""
    with open(path, "w", encoding="utf-8") as fh:
        for query_id, hits in run.items():
            for rank, (image_id, distance) in enumerate(hits, start=1):
                fh.write(f"{query_id}\t{rank}\t{image_id}\t{distance!r}\n")
