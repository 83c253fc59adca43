"""Presentation-attack-detection metrics: APCER, BPCER, EER, AUC.

Score polarity is fixed package-wide: higher score = more likely genuine.
At a threshold, a sample is accepted as bona fide when ``score >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BONA_FIDE = "bona_fide"
ATTACK = "attack"


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: str

    def __post_init__(self):
        if self.label not in (BONA_FIDE, ATTACK):
            raise ValueError(f"unknown label {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")


def split_scores(samples) -> tuple[np.ndarray, np.ndarray]:
    """Return (bona fide scores, attack scores); both classes must be present."""
    bona = np.array([s.score for s in samples if s.label == BONA_FIDE], dtype=np.float64)
    attack = np.array([s.score for s in samples if s.label == ATTACK], dtype=np.float64)
    if bona.size == 0:
        raise ValueError("no bona fide samples")
    if attack.size == 0:
        raise ValueError("no attack samples")
    return bona, attack


def apcer_bpcer(samples, threshold: float) -> tuple[float, float]:
    """APCER = attacks accepted (score >= threshold), BPCER = bona fide rejected."""
    bona, attack = split_scores(samples)
    apcer = float(np.mean(attack >= threshold))
    bpcer = float(np.mean(bona < threshold))
    return apcer, bpcer


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints of adjacent distinct scores, bracketed by -inf/+inf."""
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def eer(samples) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps candidate thresholds, picks the one minimizing |APCER - BPCER|
    (ties to the lower threshold), and reports (APCER + BPCER) / 2 there.
    """
    bona, attack = split_scores(samples)
    best = None
    for theta in _candidate_thresholds(np.concatenate([bona, attack])):
        apcer = float(np.mean(attack >= theta))
        bpcer = float(np.mean(bona < theta))
        gap = abs(apcer - bpcer)
        if best is None or gap < best[0] - 1e-15:
            best = (gap, (apcer + bpcer) / 2.0, float(theta))
    return best[1], best[2]


def auc(samples) -> float:
    """Wilcoxon-Mann-Whitney AUC: P(bona fide score > attack score), ties 0.5."""
    bona, attack = split_scores(samples)
    combined = np.concatenate([bona, attack])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_scores = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[: bona.size].sum()
    n1, n2 = bona.size, attack.size
    return float((rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n2))


def bpcer_threshold(bona_scores, target: float) -> float:
    """Largest threshold rejecting at most ``target`` of the bona fide scores.

    Candidates are the distinct bona fide scores plus +inf; the fraction of
    scores strictly below the returned threshold is <= target, and the next
    larger candidate would exceed it.
    """
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must be in [0, 1], got {target}")
    bona = np.asarray(bona_scores, dtype=np.float64).ravel()
    if bona.size == 0:
        raise ValueError("no bona fide scores")
    best = -np.inf
    for theta in np.concatenate([np.unique(bona), [np.inf]]):
        if np.mean(bona < theta) <= target:
            best = max(best, float(theta))
    return best


def apcer_at_bpcer(samples, target_bpcer: float) -> tuple[float, float]:
    """APCER at the operating point set by ``bpcer_threshold`` on bona fide scores."""
    bona, attack = split_scores(samples)
    theta = bpcer_threshold(bona, target_bpcer)
    return float(np.mean(attack >= theta)), theta


def roc_points(samples) -> list[tuple[float, float, float]]:
    """(threshold, apcer, bpcer) at every candidate threshold, ascending."""
    bona, attack = split_scores(samples)
    points = []
    for theta in _candidate_thresholds(np.concatenate([bona, attack])):
        points.append((float(theta), float(np.mean(attack >= theta)), float(np.mean(bona < theta))))
    return points
