"""Triplet construction under content/resolution constraints, plus mining.

A triplet is (reference, positive, negative): two genuine patches anchored by
a reference from the same template and resolution group, against a recaptured
negative.  Candidates pair patches at identical origins across images so the
compared content stays aligned.  Mining keeps the semi-hard subset: negatives
scored below the positive but still inside the hinge margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import Manifest, Patch, PatchStore


class NoValidTripletsError(ValueError):
    def __init__(self, reason: str):
        super().__init__(f"no valid triplets: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class Triplet:
    reference: Patch
    positive: Patch
    negative: Patch

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.reference.key, self.positive.key, self.negative.key)

    @property
    def anchor_key(self) -> tuple[str, str]:
        return (self.reference.key, self.positive.key)

    def validate(self, allow_shared_genuine: bool = False):
        members = (self.reference, self.positive, self.negative)
        if len({p.template_id for p in members}) != 1:
            raise ValueError(f"triplet {self.key} mixes templates")
        if len({p.resolution_group for p in members}) != 1:
            raise ValueError(f"triplet {self.key} mixes resolution groups")
        if self.reference.label != "genuine" or self.positive.label != "genuine":
            raise ValueError(f"triplet {self.key}: reference and positive must be genuine")
        if self.negative.label != "recaptured":
            raise ValueError(f"triplet {self.key}: negative must be recaptured")
        if self.reference.source_id == self.positive.source_id and not allow_shared_genuine:
            raise ValueError(
                f"triplet {self.key}: reference and positive share source "
                f"{self.reference.source_id} (only allowed for single-genuine templates)"
            )


@dataclass(frozen=True)
class MiningConfig:
    gamma: float = 0.2
    mode: str = "semi_hard"
    max_per_anchor: int = 4

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.mode not in ("semi_hard", "random", "all"):
            raise ValueError(f"unknown mining mode {self.mode!r}")
        if self.max_per_anchor < 1:
            raise ValueError(f"max_per_anchor must be >= 1, got {self.max_per_anchor}")


def build_candidate_triplets(split: Manifest, store: PatchStore) -> list[Triplet]:
    """Enumerate all triplets allowed by the template/group/label rules.

    Patches are paired at identical origins across the three images, and only
    discriminative patches (the store is pre-filtered) participate.  For a
    template with a single genuine image, the reference doubles as positive.
    Raises NoValidTripletsError when nothing qualifies, with the reasons.
    """
    by_cell: dict[tuple[str, str], tuple[list, list]] = {}
    for row in split.rows:
        if row.id not in store.patches:
            continue
        cell = by_cell.setdefault((row.template_id, row.resolution_group), ([], []))
        cell[0 if row.label == "genuine" else 1].append(row)

    triplets: list[Triplet] = []
    reasons: list[str] = []
    for (template_id, group) in sorted(by_cell):
        genuine, recaptured = by_cell[(template_id, group)]
        if not genuine or not recaptured:
            missing = "genuine" if not genuine else "recaptured"
            reasons.append(f"template {template_id}/{group}: no {missing} images with usable patches")
            continue
        genuine = sorted(genuine, key=lambda r: r.id)
        recaptured = sorted(recaptured, key=lambda r: r.id)
        if len(genuine) == 1:
            pairs = [(genuine[0], genuine[0])]
        else:
            pairs = [(ref, pos) for ref in genuine for pos in genuine if ref.id != pos.id]
        for ref_row, pos_row in pairs:
            ref_patches = {p.origin: p for p in store.patches[ref_row.id]}
            pos_patches = {p.origin: p for p in store.patches[pos_row.id]}
            for neg_row in recaptured:
                neg_patches = {p.origin: p for p in store.patches[neg_row.id]}
                common = sorted(set(ref_patches) & set(pos_patches) & set(neg_patches))
                for origin in common:
                    triplets.append(
                        Triplet(ref_patches[origin], pos_patches[origin], neg_patches[origin])
                    )
    if not triplets:
        if not reasons:
            reasons.append("split has no images with usable patches")
        raise NoValidTripletsError("; ".join(reasons))
    return triplets


def _score_triplets(candidates, score_fn) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(t.reference, t.positive) for t in candidates] + [
        (t.reference, t.negative) for t in candidates
    ]
    if hasattr(score_fn, "score_pairs"):
        scores = np.asarray(score_fn.score_pairs(pairs), dtype=np.float64)
    else:
        scores = np.array([score_fn(a, b) for a, b in pairs], dtype=np.float64)
    n = len(candidates)
    return scores[:n], scores[n:]


def hinge_argument(s_p: float, s_n: float, gamma: float) -> float:
    """Operand of the triplet-loss hinge: positive means the triplet still trains."""
    return math.exp(-s_p) - math.exp(-s_n) + gamma / math.e


def mine_semi_hard(
    candidates: list[Triplet],
    score_fn,
    config: MiningConfig,
    seed: int = 0,
) -> list[Triplet]:
    """Select training triplets against the current model's scores.

    semi_hard: keep triplets with S(r,n) < S(r,p) and a positive hinge
    argument, capped at ``max_per_anchor`` per (reference, positive) anchor
    keeping the largest hinge arguments (ties by triplet key).  The result
    preserves the candidate list's order.

    random: a seed-deterministic subsample of ``max_per_anchor`` per anchor's
    worth of triplets.  all: the candidates unchanged.
    """
    if config.mode == "all" or not candidates:
        return list(candidates)
    if config.mode == "random":
        rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
        cap = config.max_per_anchor * len({t.anchor_key for t in candidates})
        size = min(len(candidates), cap)
        chosen = sorted(rng.choice(len(candidates), size=size, replace=False).tolist())
        return [candidates[i] for i in chosen]

    s_p, s_n = _score_triplets(candidates, score_fn)
    by_anchor: dict[tuple[str, str], list[tuple[float, Triplet, int]]] = {}
    for i, triplet in enumerate(candidates):
        if not s_n[i] < s_p[i]:
            continue
        h = hinge_argument(float(s_p[i]), float(s_n[i]), config.gamma)
        if h <= 0.0:
            continue
        by_anchor.setdefault(triplet.anchor_key, []).append((h, triplet, i))

    keep: set[int] = set()
    for anchor in by_anchor:
        ranked = sorted(by_anchor[anchor], key=lambda item: (-item[0], item[1].key))
        keep.update(idx for _, _, idx in ranked[: config.max_per_anchor])
    return [candidates[i] for i in sorted(keep)]


def export_triplets(triplets: list[Triplet], path):
    """Audit export: one JSON line of member keys per triplet."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(
                json.dumps(
                    {"reference": t.reference.key, "positive": t.positive.key, "negative": t.negative.key}
                )
                + "\n"
            )
