"""Trainable similarity subnet over fused embedding pairs.

A pair (a, b) is fused as [a, b, a*b] and mapped through one hidden layer to
a sigmoid score in (0, 1): high means "same forensic trace".  The fusion is
not symmetric in argument order; call sites pass (reference, other).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class SimNetConfig:
    hidden_dim: int = 2048
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")


def pair_features(a, b) -> np.ndarray:
    """Fuse two equal-length vectors as [a, b, a*b] (length 3d)."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "values", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding lengths differ: {a.size} vs {b.size}")
    return np.concatenate([a, b, a * b])


class SimilarityNet(nn.Module):
    def __init__(self, embed_dim: int, config: SimNetConfig = SimNetConfig()):
        super().__init__()
        self.config = config
        self.embed_dim = embed_dim
        self.hidden = nn.Linear(3 * embed_dim, config.hidden_dim)
        self.out = nn.Linear(config.hidden_dim, 1)
        self._init(config.init_seed)

    def _init(self, seed: int):
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        for m in (self.hidden, self.out):
            bound = 1.0 / (m.weight.shape[1] ** 0.5)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)

    def logits(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid pair logits; (B, d) x (B, d) -> (B,)."""
        if a.shape != b.shape or a.shape[-1] != self.embed_dim:
            raise ValueError(f"expected two (B, {self.embed_dim}) batches, got {tuple(a.shape)} and {tuple(b.shape)}")
        fused = torch.cat([a, b, a * b], dim=-1)
        return self.out(torch.relu(self.hidden(fused))).squeeze(-1)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Score batched pairs; (B, d) x (B, d) -> (B,) in (0, 1)."""
        return torch.sigmoid(self.logits(a, b))


def similarity(net: SimilarityNet, a, b) -> float:
    """Similarity score for one (reference, other) embedding pair.

    The sigmoid runs in float64 so near-saturated pairs keep distinct scores.
    """
    a = np.asarray(getattr(a, "values", a), dtype=np.float32).ravel()
    b = np.asarray(getattr(b, "values", b), dtype=np.float32).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding lengths differ: {a.size} vs {b.size}")
    net.eval()
    with torch.no_grad():
        z = float(net.logits(torch.from_numpy(a)[None, :], torch.from_numpy(b)[None, :])[0])
    return float(1.0 / (1.0 + np.exp(-z)))
