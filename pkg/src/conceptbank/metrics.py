"""Average Precision / mean Average Precision for ranked retrieval lists.

AP here is the non-interpolated mean of precision@k taken at the ranks of
the relevant items (TRECVID convention). It is used in three places:
the concept visualness gate, cross-validated model selection, and the
final event-detection evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import PreconditionError


@dataclass(frozen=True)
class LabeledRanking:
    """A ranked list of item ids (best first) with binary relevance."""

    ordering: tuple[str, ...]
    relevance: Mapping[str, int]

    def __post_init__(self):
        missing = [i for i in self.ordering if i not in self.relevance]
        if missing:
            raise PreconditionError(
                f"items without relevance labels: {missing[:5]}"
            )


def average_precision(ranking: LabeledRanking) -> float:
    """AP of a ranked list with binary relevance.

    Raises PreconditionError when the list contains no relevant item
    (AP is undefined there; the caller decides how to treat it).
    """
    total_relevant = sum(1 for i in ranking.ordering if ranking.relevance[i])
    if total_relevant == 0:
        raise PreconditionError("average precision undefined: no relevant items")
    hits = 0
    precision_sum = 0.0
    for k, item in enumerate(ranking.ordering, start=1):
        if ranking.relevance[item]:
            hits += 1
            precision_sum += hits / k
    return precision_sum / total_relevant


def mean_average_precision(rankings: Sequence[LabeledRanking]) -> float:
    """Unweighted mean of per-event APs."""
    if not rankings:
        raise PreconditionError("mean average precision over zero rankings")
    return sum(average_precision(r) for r in rankings) / len(rankings)


def ap_from_scores(
    scores: Mapping[str, float], relevance: Mapping[str, int]
) -> float:
    """Convenience: rank ids by score (desc, ties by id) and compute AP."""
    ordering = tuple(sorted(scores, key=lambda i: (-scores[i], i)))
    return average_precision(LabeledRanking(ordering, relevance))


def ap_from_arrays(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AP for parallel score/label arrays; ties broken by position."""
    if len(scores) != len(labels):
        raise PreconditionError("scores and labels differ in length")
    ids = [f"i{k:06d}" for k in range(len(scores))]
    return ap_from_scores(
        dict(zip(ids, (float(s) for s in scores))),
        dict(zip(ids, (int(bool(v)) for v in labels))),
    )
