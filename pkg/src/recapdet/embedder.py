"""Patch embedder: pluggable convolutional backbone plus a two-layer head.

The same network instance embeds all members of a triplet, so weight sharing
across branches is structural.  Initialization draws from a private generator
seeded by the config, independent of torch's global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import Patch


@dataclass(frozen=True)
class EmbedderConfig:
    backbone: str = "tiny_conv"
    embed_dim: int = 256
    hidden_dim: int = 512
    freeze_backbone: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValueError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; available: {sorted(BACKBONES)}")


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    source: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite embedding for {self.source}")


class TinyConvBackbone(nn.Module):
    """Four stride-2 conv blocks and a global average pool; output dim 64."""

    out_dim = 64

    def __init__(self):
        super().__init__()
        widths = [3, 8, 16, 32, 64]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class _ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, stride=stride) if (stride != 1 or cin != cout) else nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.act(self.conv1(x))
        out = self.conv2(out)
        return self.act(out + self.skip(x))


class ResnetLikeBackbone(nn.Module):
    """Compact residual backbone (no pretrained weights); output dim 128."""

    out_dim = 128

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 16, 5, stride=2, padding=2), nn.ReLU(inplace=True))
        stages = []
        widths = [16, 32, 64, 128]
        cin = 16
        for cout in widths:
            stages.append(_ResidualBlock(cin, cout, stride=2))
            stages.append(_ResidualBlock(cout, cout, stride=1))
            cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(self.stem(x)).mean(dim=(2, 3))


BACKBONES = {
    "tiny_conv": TinyConvBackbone,
    "resnet_like_50": ResnetLikeBackbone,
}


class PatchEmbedder(nn.Module):
    def __init__(self, config: EmbedderConfig):
        super().__init__()
        self.config = config
        self.backbone = BACKBONES[config.backbone]()
        self.head = nn.Sequential(
            nn.Linear(self.backbone.out_dim, config.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.hidden_dim, config.embed_dim),
        )
        _init_parameters(self, config.init_seed)
        if config.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def forward(self, x):
        return self.head(self.backbone(x))


def _init_parameters(module: nn.Module, seed: int):
    """Fan-in-scaled uniform init from a generator seeded only by ``seed``."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.dim() == 4 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def init_embedder(config: EmbedderConfig) -> PatchEmbedder:
    """Build an embedder with deterministic weights given ``config.init_seed``."""
    model = PatchEmbedder(config)
    model.eval()
    return model


def patches_to_tensor(patches) -> torch.Tensor:
    """Stack patches into a float32 batch scaled to [0, 1], NCHW."""
    arrays = [p.pixels for p in patches]
    stacked = np.stack(arrays).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def embed(model: PatchEmbedder, patches: list[Patch], batch_size: int = 32) -> list[Embedding]:
    """Embed patches in input order, deterministically (inference mode)."""
    if not patches:
        raise ValueError("empty patch batch")
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            vectors = model(patches_to_tensor(chunk)).cpu().numpy()
            outputs.extend(
                Embedding(values=vec.copy(), source=p.key) for vec, p in zip(vectors, chunk)
            )
    return outputs
