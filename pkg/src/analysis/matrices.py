"""
Class-wise and class-pair-wise summaries of an attack log.

Rows are true classes, columns the class an image was misrecognized as.
Censored records (never misrecognized) have no column and are left out of
both matrices; they are counted separately.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from src.attack.ifgsm import AttackLog
from src.errors import EmptyLog
from src.letters import NUM_CLASSES

DEFAULT_MIN_COUNT = 10


@dataclass
class PairwiseMatrices:
    confusion: np.ndarray
    avg_defensibility: np.ndarray
    count_mask: np.ndarray
    min_count: int = DEFAULT_MIN_COUNT
    censored_count: int = 0
    discarded_count: int = 0


@dataclass
class ClassDistribution:
    label: int
    ks: list[int]
    count: int
    median: float
    min: int
    max: int
    iqr: float
    censored: int = 0
    accuracy: float = float("nan")


def _require_records(log: AttackLog):
    if not log.records:
        raise EmptyLog("Attack log has no records")


def _pairs(log: AttackLog) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    kept = [r for r in log.records if not r.censored]
    true = np.array([r.true_label for r in kept], dtype=np.int64)
    mis = np.array([r.misrecognized_as for r in kept], dtype=np.int64)
    ks = np.array([r.k for r in kept], dtype=np.float64)
    return true, mis, ks


def confusion_matrix(log: AttackLog) -> np.ndarray:
    """26x26 counts of (true class, misrecognized class) over non-censored records."""
    _require_records(log)
    true, mis, _ = _pairs(log)
    if true.size == 0:
        return np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    return sk_confusion_matrix(true, mis, labels=np.arange(NUM_CLASSES)).astype(np.int64)


def average_defensibility_matrix(
    log: AttackLog, min_count: int = DEFAULT_MIN_COUNT
) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean k per (true, misrecognized) pair.

    Only pairs with strictly more than `min_count` records are defined;
    every other cell is NaN with mask False.
    """
    _require_records(log)
    true, mis, ks = _pairs(log)
    sums = np.zeros((NUM_CLASSES, NUM_CLASSES))
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(sums, (true, mis), ks)
    np.add.at(counts, (true, mis), 1)
    mask = counts > min_count
    values = np.full((NUM_CLASSES, NUM_CLASSES), np.nan)
    values[mask] = sums[mask] / counts[mask]
    return values, mask


def pairwise_matrices(log: AttackLog, min_count: int = DEFAULT_MIN_COUNT) -> PairwiseMatrices:
    values, mask = average_defensibility_matrix(log, min_count)
    return PairwiseMatrices(
        confusion=confusion_matrix(log),
        avg_defensibility=values,
        count_mask=mask,
        min_count=min_count,
        censored_count=log.censored_count,
        discarded_count=log.discarded_count,
    )


def class_distributions(
    log: AttackLog, classifier_eval: np.ndarray | None = None
) -> dict[int, ClassDistribution]:
    """
    k values grouped by true class with median/min/max/IQR.

    Censored records enter at k = k_max (a lower bound) and are counted in
    `censored`. classifier_eval is the per-class pre-attack accuracy.
    """
    _require_records(log)
    grouped: dict[int, list] = {}
    for r in log.records:
        grouped.setdefault(r.true_label, []).append(r)

    out = {}
    for label in sorted(grouped):
        ks = sorted(r.k for r in grouped[label])
        q1, median, q3 = np.percentile(ks, [25, 50, 75])
        out[label] = ClassDistribution(
            label=label,
            ks=ks,
            count=len(ks),
            median=float(median),
            min=int(ks[0]),
            max=int(ks[-1]),
            iqr=float(q3 - q1),
            censored=sum(r.censored for r in grouped[label]),
            accuracy=float("nan") if classifier_eval is None else float(classifier_eval[label]),
        )
    return out


def top_confusions(confusion: np.ndarray, n: int = 10) -> list[tuple[int, int, int]]:
    """The n largest off-diagonal entries as (true, misrecognized, count)."""
    cells = [
        (int(confusion[i, j]), i, j)
        for i in range(confusion.shape[0])
        for j in range(confusion.shape[1])
        if i != j and confusion[i, j] > 0
    ]
    cells.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [(i, j, count) for count, i, j in cells[:n]]


def asymmetric_pairs(confusion: np.ndarray, top: int = 10) -> list[tuple[int, int, int, int]]:
    """
    Class pairs ranked by |c->c' - c'->c|, oriented so the frequent direction
    comes first: (c, c', count c->c', count c'->c).
    """
    pairs = []
    for i in range(confusion.shape[0]):
        for j in range(i + 1, confusion.shape[1]):
            a, b = int(confusion[i, j]), int(confusion[j, i])
            if a == b:
                continue
            pairs.append((i, j, a, b) if a > b else (j, i, b, a))
    pairs.sort(key=lambda p: (-(p[2] - p[3]), p[0], p[1]))
    return pairs[:top]


def conservation_check(log: AttackLog) -> bool:
    """confusion total + censored + discarded == images presented to the attack."""
    total = int(confusion_matrix(log).sum()) if log.records else 0
    return total + log.censored_count + log.discarded_count == log.presented_count
