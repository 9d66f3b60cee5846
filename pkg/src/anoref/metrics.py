"""AUROC, average precision and F1-max, at image and pixel level.

Implementations are O(n log n) sort-based but arranged so that their
floating-point results match the O(n^2) pairwise / exhaustive-threshold
oracles bit for bit (see tests): ranks and precision sums are accumulated
in the same order the oracles use.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UndefinedMetricError


@dataclass
class ScoredSet:
    """Scores with binary labels; the carrier for every metric."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(
                f"scores ({self.scores.shape}) and labels ({self.labels.shape}) "
                "must have equal length"
            )
        if self.labels.size and not np.all(np.isin(self.labels, (0, 1))):
            raise ShapeError("labels must be binary 0/1")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney AUROC: wins plus half-ties over all pos/neg pairs,
    computed via tie-averaged ranks."""
    P, N = s.n_pos, s.n_neg
    if P == 0 or N == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes (got {P} positive, {N} negative)"
        )
    order = np.argsort(s.scores, kind="stable")
    sorted_scores = s.scores[order]
    ranks = np.empty(s.scores.size, dtype=np.float64)
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average 1-based rank of the tie run [i, j]
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[s.labels == 1].sum())
    u = rank_sum - P * (P + 1) / 2.0
    return u / (P * N)


def average_precision(s: ScoredSet) -> float:
    """Mean precision at each positive's rank, scores sorted descending with
    the pessimistic tie rule: at equal score, negatives rank first."""
    P = s.n_pos
    if P == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    # lexsort: last key is primary; descending score, then label 0 before 1
    order = np.lexsort((s.labels, -s.scores))
    tp = 0
    total = 0.0
    for rank0, idx in enumerate(order):
        if s.labels[idx] == 1:
            tp += 1
            total += tp / (rank0 + 1)
    return total / P


def f1_max(s: ScoredSet) -> float:
    """Maximum F1 over thresholds drawn from the distinct scores, with
    prediction rule score >= threshold."""
    P = s.n_pos
    if P == 0:
        raise UndefinedMetricError("F1-max needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    best = 0.0
    tp = 0
    fp = 0
    n = s.scores.size
    for i in range(n):
        tp += int(sorted_labels[i])
        fp += 1 - int(sorted_labels[i])
        if i + 1 < n and sorted_scores[i + 1] == sorted_scores[i]:
            continue  # not a distinct-threshold boundary
        denom = 2 * tp + fp + (P - tp)
        f1 = 0.0 if denom == 0 else (2 * tp) / denom
        if f1 > best:
            best = f1
    return best


def evaluate_pixel(final_maps, gt_masks) -> tuple:
    """Flatten every pixel of every image into one scored set and return
    (auroc, f1max, ap)."""
    maps = list(final_maps)
    masks = list(gt_masks)
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    scores = []
    labels = []
    for m, g in zip(maps, masks):
        m = np.asarray(m)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ShapeError(f"map {m.shape} does not match mask {g.shape}")
        scores.append(m.ravel())
        labels.append(g.ravel())
    s = ScoredSet(np.concatenate(scores), np.concatenate(labels))
    return auroc(s), f1_max(s), average_precision(s)


def evaluate_image(image_scores, image_labels) -> tuple:
    """(auroc, f1max, ap) over per-image scores."""
    s = ScoredSet(np.asarray(image_scores), np.asarray(image_labels))
    return auroc(s), f1_max(s), average_precision(s)
