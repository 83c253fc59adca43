"""Similarity-space triplet loss, normalized softmax loss, and their weighted sum.

All three losses consume per-triplet similarity scores in [0, 1]: ``s_p[i]`` is
the reference-positive score and ``s_n[i]`` the reference-negative score of
triplet ``i``.  Scalar semantics are defined on float64 numpy arrays; the
analytic gradients below are what the trainer backpropagates through, via
:func:`forensic_loss_torch`.

Per triplet, with margin ``gamma`` and weight ``alpha``:

    ts_i = max(0, exp(-s_p[i]) - exp(-s_n[i]) + gamma / e)
    ns_i = log(1 + exp(s_n[i] - s_p[i]))
    fl   = reduce(ts) + alpha * reduce(ns)

Driving ``ts`` down pushes ``s_p`` up and ``s_n`` down; ``ns`` additionally
penalizes the relative gap, with per-triplet floor ``log(1 + e**-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

NS_FLOOR = math.log1p(math.exp(-1.0))  # minimum per-triplet normalized softmax loss
NS_CEIL = math.log1p(math.exp(1.0))


class LossInputError(ValueError):
    """Raised for mismatched batch sizes or scores outside [0, 1]."""


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.2
    alpha: float = 0.3
    reduction: str = "sum"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    @property
    def margin(self) -> float:
        """Effective hinge margin gamma/e."""
        return self.gamma / math.e


@dataclass(frozen=True)
class LossBreakdown:
    """Batch loss values plus the per-triplet terms they reduce over."""

    l_ts: float
    l_ns: float
    l_fl: float
    per_triplet: list[tuple[float, float]] = field(repr=False)


def _validate_scores(s_p, s_n) -> tuple[np.ndarray, np.ndarray]:
    s_p = np.asarray(s_p, dtype=np.float64).ravel()
    s_n = np.asarray(s_n, dtype=np.float64).ravel()
    if s_p.shape != s_n.shape:
        raise LossInputError(f"score batches differ in length: {s_p.size} vs {s_n.size}")
    if s_p.size == 0:
        raise LossInputError("empty score batch")
    for name, arr in (("s_p", s_p), ("s_n", s_n)):
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            bad = arr[(arr < 0.0) | (arr > 1.0)][0]
            raise LossInputError(f"{name} contains score {bad} outside [0, 1]")
    return s_p, s_n


def _reduce(values: np.ndarray, reduction: str) -> float:
    return float(values.mean()) if reduction == "mean" else float(values.sum())


def triplet_similarity_loss(s_p, s_n, config: LossConfig = LossConfig()):
    """Hinge loss on exponentiated similarity gaps.

    Returns ``(value, per_triplet)`` where ``per_triplet[i] =
    max(0, exp(-s_p[i]) - exp(-s_n[i]) + gamma/e)`` and ``value`` reduces it
    per ``config.reduction``.
    """
    s_p, s_n = _validate_scores(s_p, s_n)
    ts = np.maximum(0.0, np.exp(-s_p) - np.exp(-s_n) + config.margin)
    return _reduce(ts, config.reduction), ts


def normalized_softmax_loss(s_p, s_n, reduction: str = "sum"):
    """Relative-gap loss ``log(1 + exp(s_n - s_p))`` per triplet."""
    s_p, s_n = _validate_scores(s_p, s_n)
    ns = np.log1p(np.exp(s_n - s_p))
    return _reduce(ns, reduction), ns


def forensic_loss(s_p, s_n, config: LossConfig = LossConfig()) -> LossBreakdown:
    """Combined loss ``l_ts + alpha * l_ns`` with per-triplet terms exposed."""
    l_ts, ts = triplet_similarity_loss(s_p, s_n, config)
    l_ns, ns = normalized_softmax_loss(s_p, s_n, config.reduction)
    return LossBreakdown(
        l_ts=l_ts,
        l_ns=l_ns,
        l_fl=l_ts + config.alpha * l_ns,
        per_triplet=list(zip(ts.tolist(), ns.tolist())),
    )


def forensic_loss_grad(s_p, s_n, config: LossConfig = LossConfig()):
    """Analytic gradients of the combined loss w.r.t. each score.

    The hinge uses subgradient 0 at its kink: a triplet with ``ts_i == 0``
    contributes nothing through the triplet term.  Returns
    ``(d_loss/d_s_p, d_loss/d_s_n)`` as float64 arrays.
    """
    s_p, s_n = _validate_scores(s_p, s_n)
    active = (np.exp(-s_p) - np.exp(-s_n) + config.margin) > 0.0
    dts_dp = np.where(active, -np.exp(-s_p), 0.0)
    dts_dn = np.where(active, np.exp(-s_n), 0.0)
    sig = 1.0 / (1.0 + np.exp(s_p - s_n))  # sigmoid(s_n - s_p)
    grad_p = dts_dp + config.alpha * -sig
    grad_n = dts_dn + config.alpha * sig
    if config.reduction == "mean":
        grad_p /= s_p.size
        grad_n /= s_n.size
    return grad_p, grad_n


class _ForensicLossFn(torch.autograd.Function):
    """Autograd bridge: numpy forward/backward from the definitions above."""

    @staticmethod
    def forward(ctx, s_p: torch.Tensor, s_n: torch.Tensor, gamma: float, alpha: float, reduction: str):
        config = LossConfig(gamma=gamma, alpha=alpha, reduction=reduction)
        p = s_p.detach().cpu().double().numpy()
        n = s_n.detach().cpu().double().numpy()
        breakdown = forensic_loss(p, n, config)
        grad_p, grad_n = forensic_loss_grad(p, n, config)
        ctx.save_for_backward(
            torch.from_numpy(grad_p).to(s_p.dtype),
            torch.from_numpy(grad_n).to(s_n.dtype),
        )
        return s_p.new_tensor(breakdown.l_fl)

    @staticmethod
    def backward(ctx, grad_output):
        grad_p, grad_n = ctx.saved_tensors
        return grad_output * grad_p, grad_output * grad_n, None, None, None


def forensic_loss_torch(s_p: torch.Tensor, s_n: torch.Tensor, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Combined loss as a differentiable torch scalar.

    Forward values and backward gradients are exactly those of
    :func:`forensic_loss` / :func:`forensic_loss_grad`.
    """
    return _ForensicLossFn.apply(s_p, s_n, config.gamma, config.alpha, config.reduction)
