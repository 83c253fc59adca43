"""The verification model: an embedder and similarity subnet trained jointly.

Checkpoints are directories holding one weights file plus a metadata echo of
both configs; loading validates shapes against the metadata and round-trips
scores to within float precision.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Patch
from .embedder import EmbedderConfig, PatchEmbedder, embed, init_embedder
from .simnet import SimilarityNet, SimNetConfig

WEIGHTS_FILE = "weights.pt"
META_FILE = "meta.json"


class CheckpointError(ValueError):
    """Missing, corrupt, or config-mismatched checkpoint."""


@dataclass
class ForensicModel:
    embedder: PatchEmbedder
    simnet: SimilarityNet
    embedder_config: EmbedderConfig
    simnet_config: SimNetConfig
    step: int = 0

    @classmethod
    def create(cls, embedder_config: EmbedderConfig, simnet_config: SimNetConfig) -> "ForensicModel":
        embedder = init_embedder(embedder_config)
        simnet = SimilarityNet(embedder_config.embed_dim, simnet_config)
        simnet.eval()
        return cls(embedder, simnet, embedder_config, simnet_config)

    def clone(self) -> "ForensicModel":
        return ForensicModel(
            embedder=copy.deepcopy(self.embedder),
            simnet=copy.deepcopy(self.simnet),
            embedder_config=self.embedder_config,
            simnet_config=self.simnet_config,
            step=self.step,
        )

    def train_mode(self):
        self.embedder.train()
        self.simnet.train()

    def eval_mode(self):
        self.embedder.eval()
        self.simnet.eval()

    def trainable_parameters(self):
        params = [p for p in self.embedder.parameters() if p.requires_grad]
        params += [p for p in self.simnet.parameters() if p.requires_grad]
        return params

    def state_dicts(self):
        return {
            "embedder": copy.deepcopy(self.embedder.state_dict()),
            "simnet": copy.deepcopy(self.simnet.state_dict()),
        }

    def load_state_dicts(self, state):
        self.embedder.load_state_dict(state["embedder"])
        self.simnet.load_state_dict(state["simnet"])

    def embed_patches(self, patches: list[Patch], batch_size: int = 32):
        return embed(self.embedder, patches, batch_size=batch_size)

    def score_arrays(self, refs: np.ndarray, others: np.ndarray) -> np.ndarray:
        """Similarity scores for row-aligned (reference, other) embedding arrays.

        The sigmoid is applied to the pair logits in float64: a confident
        model would otherwise pin whole batches to exactly 0.0 or 1.0 in
        float32, erasing the ranking that thresholds and AUC rely on.
        """
        self.eval_mode()
        with torch.no_grad():
            logits = self.simnet.logits(
                torch.from_numpy(np.ascontiguousarray(refs, dtype=np.float32)),
                torch.from_numpy(np.ascontiguousarray(others, dtype=np.float32)),
            )
        z = logits.cpu().numpy().astype(np.float64)
        return 1.0 / (1.0 + np.exp(-z))


class PatchScorer:
    """Similarity between patches under a frozen model, with embedding cache."""

    def __init__(self, model: ForensicModel, batch_size: int = 32):
        self.model = model
        self.batch_size = batch_size
        self._cache: dict[str, np.ndarray] = {}

    def prime(self, patches: list[Patch]):
        fresh = []
        seen = set()
        for p in patches:
            if p.key not in self._cache and p.key not in seen:
                fresh.append(p)
                seen.add(p.key)
        if fresh:
            for e in self.model.embed_patches(fresh, batch_size=self.batch_size):
                self._cache[e.source] = e.values

    def embedding(self, patch: Patch) -> np.ndarray:
        if patch.key not in self._cache:
            self.prime([patch])
        return self._cache[patch.key]

    def __call__(self, reference: Patch, other: Patch) -> float:
        refs = self.embedding(reference)[None, :]
        oth = self.embedding(other)[None, :]
        return float(self.model.score_arrays(refs, oth)[0])

    def score_pairs(self, pairs: list[tuple[Patch, Patch]]) -> np.ndarray:
        self.prime([p for pair in pairs for p in pair])
        refs = np.stack([self._cache[a.key] for a, _ in pairs])
        others = np.stack([self._cache[b.key] for _, b in pairs])
        return self.model.score_arrays(refs, others)


def save_checkpoint(model: ForensicModel, path) -> Path:
    """Write weights + config metadata under ``path`` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dicts(), path / WEIGHTS_FILE)
    meta = {
        "embedder": asdict(model.embedder_config),
        "simnet": asdict(model.simnet_config),
        "step": model.step,
    }
    with open(path / META_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path, expected_embedder: EmbedderConfig | None = None) -> ForensicModel:
    """Rebuild a model from a checkpoint directory.

    Raises CheckpointError for missing files, weight/config shape mismatches,
    or an ``expected_embedder`` config that disagrees with the stored one.
    """
    path = Path(path)
    weights_path = path / WEIGHTS_FILE
    meta_path = path / META_FILE
    if not weights_path.exists() or not meta_path.exists():
        raise CheckpointError(f"checkpoint incomplete or missing at {path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    embedder_config = EmbedderConfig(**meta["embedder"])
    simnet_config = SimNetConfig(**meta["simnet"])
    if expected_embedder is not None and expected_embedder != embedder_config:
        raise CheckpointError(
            f"config mismatch: checkpoint has {embedder_config}, expected {expected_embedder}"
        )
    model = ForensicModel.create(embedder_config, simnet_config)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.embedder.load_state_dict(state["embedder"])
        model.simnet.load_state_dict(state["simnet"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint weights do not match stored config: {exc}") from exc
    model.step = int(meta.get("step", 0))
    model.eval_mode()
    return model
