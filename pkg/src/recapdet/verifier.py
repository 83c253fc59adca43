"""Authenticity decisions from similarity against template support samples.

Two modes mirror whether the questioned document's template was seen in
training: ``seen_template`` thresholds the absolute score; ``few_shot``
compares against the midpoint between the support positives' and negatives'
scores.  The score >= threshold boundary is inclusive (accepted as genuine).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Patch
from .metrics import bpcer_threshold
from .model import ForensicModel, PatchScorer
from .triplets import Triplet


class CalibrationWarning(UserWarning):
    """Calibration input was degenerate (for example, all scores identical)."""


@dataclass(frozen=True)
class SupportGroup:
    reference: Patch
    positive: Patch | None = None
    negative: Patch | None = None


@dataclass(frozen=True)
class SupportSet:
    groups: tuple[SupportGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("support set needs at least one group")
        members = [p for g in self.groups for p in (g.reference, g.positive, g.negative) if p is not None]
        if len({p.template_id for p in members}) != 1:
            raise ValueError("support set mixes templates")
        if len({p.resolution_group for p in members}) != 1:
            raise ValueError("support set mixes resolution groups")

    @classmethod
    def from_triplets(cls, triplets: list[Triplet]) -> "SupportSet":
        return cls(tuple(SupportGroup(t.reference, t.positive, t.negative) for t in triplets))

    @property
    def references(self) -> list[Patch]:
        return [g.reference for g in self.groups]

    def complete_groups(self) -> bool:
        return all(g.positive is not None and g.negative is not None for g in self.groups)


@dataclass(frozen=True)
class Decision:
    score: float
    threshold: float
    verdict: str  # "genuine" | "recaptured"
    mode: str  # "seen_template" | "few_shot"
    questioned_id: str = ""
    per_reference: tuple[float, ...] = field(default=())

    def report(self) -> dict:
        return {
            "questioned_id": self.questioned_id,
            "mode": self.mode,
            "score": self.score,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "per_reference_scores": list(self.per_reference),
        }


def _reference_scores(scorer: PatchScorer, references, questioned) -> np.ndarray:
    """(K, P) score matrix: each reference against each questioned patch."""
    pairs = [(ref, patch) for ref in references for patch in questioned]
    return scorer.score_pairs(pairs).reshape(len(references), len(questioned))


def score_questioned(model: ForensicModel, questioned: list[Patch], support: SupportSet) -> float:
    """Mean similarity of the questioned patches to the support references."""
    if not questioned:
        raise ValueError("no questioned patches")
    scorer = PatchScorer(model)
    return float(_reference_scores(scorer, support.references, questioned).mean())


def calibrate_threshold(
    genuine_scores,
    attack_scores=None,
    policy: str = "max_accuracy",
    target: float | None = None,
) -> float:
    """Pick a decision threshold from calibration scores.

    max_accuracy sweeps the midpoints of adjacent distinct scores (plus
    +/-inf) and maximizes classification accuracy; ties go to the widest
    optimal interval, then the lower threshold.  bpcer_target returns the
    largest threshold rejecting at most ``target`` of the genuine scores.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64).ravel()
    if genuine.size == 0:
        raise ValueError("no genuine calibration scores")
    if policy == "bpcer_target":
        if target is None:
            raise ValueError("bpcer_target policy requires a target rate")
        if np.unique(genuine).size == 1:
            warnings.warn("all calibration scores identical", CalibrationWarning)
            return float(genuine[0])
        return bpcer_threshold(genuine, target)
    if policy != "max_accuracy":
        raise ValueError(f"unknown calibration policy {policy!r}")

    attack = np.asarray(attack_scores if attack_scores is not None else [], dtype=np.float64).ravel()
    if attack.size == 0:
        raise ValueError("max_accuracy policy requires attack calibration scores")
    combined = np.concatenate([genuine, attack])
    distinct = np.unique(combined)
    if distinct.size == 1:
        warnings.warn("all calibration scores identical", CalibrationWarning)
        return float(distinct[0])

    lowers = np.concatenate(([-np.inf], distinct))
    uppers = np.concatenate((distinct, [np.inf]))
    best = None
    for lo, hi in zip(lowers, uppers):
        theta = (lo + hi) / 2.0  # +/-inf for the unbounded end intervals
        correct = int(np.sum(genuine >= theta)) + int(np.sum(attack < theta))
        key = (correct, hi - lo, -theta)
        if best is None or key > best[0]:
            best = (key, float(theta))
    return best[1]


def verify(
    model: ForensicModel,
    questioned: list[Patch],
    support: SupportSet,
    threshold: float | None,
    mode: str = "seen_template",
    questioned_id: str = "",
) -> Decision:
    """Decide genuine vs recaptured for a questioned document's patches."""
    if not questioned:
        raise ValueError("no questioned patches")
    scorer = PatchScorer(model)
    per_ref = _reference_scores(scorer, support.references, questioned).mean(axis=1)
    score = float(per_ref.mean())

    if mode == "seen_template":
        if threshold is None:
            raise ValueError("seen_template mode requires a calibrated threshold")
        cut = float(threshold)
    elif mode == "few_shot":
        if not support.complete_groups():
            raise ValueError("few_shot mode requires positives and negatives in every support group")
        s_p = scorer.score_pairs([(g.reference, g.positive) for g in support.groups]).mean()
        s_n = scorer.score_pairs([(g.reference, g.negative) for g in support.groups]).mean()
        cut = float((s_p + s_n) / 2.0)
    else:
        raise ValueError(f"unknown verification mode {mode!r}")

    return Decision(
        score=score,
        threshold=cut,
        verdict="genuine" if score >= cut else "recaptured",
        mode=mode,
        questioned_id=questioned_id,
        per_reference=tuple(float(v) for v in per_ref),
    )
