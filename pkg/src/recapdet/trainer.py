"""Training loop: per-epoch mining refresh, batched triplet optimization.

Each epoch re-scores all candidate triplets with the current model, mines
the training subset, and takes one Adam step per mini-batch.  History rows
log mean per-triplet losses recomputed over the full candidate snapshot with
the end-of-epoch weights, so a logged epoch can be reproduced exactly from
its saved model.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .channelsim import derive_seed
from .corpus import Manifest, PatchStore
from .embedder import patches_to_tensor
from .losses import LossBreakdown, LossConfig, LossInputError, forensic_loss, forensic_loss_torch
from .model import ForensicModel, PatchScorer, load_checkpoint, save_checkpoint  # noqa: F401
from .triplets import MiningConfig, NoValidTripletsError, Triplet, build_candidate_triplets, mine_semi_hard


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 128
    optimizer: str = "adam"
    weight_decay: float = 0.0
    grad_clip_norm: float = 0.0  # 0 disables clipping
    loss: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise ValueError("weight_decay and grad_clip_norm must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_ts: float
    l_ns: float
    l_fl: float
    triplet_count: int
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_ts", "l_ns", "l_fl", "triplet_count", "wall_time"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.l_ts), repr(r.l_ns), repr(r.l_fl), r.triplet_count, f"{r.wall_time:.3f}"])


def evaluate_triplet_loss(model: ForensicModel, triplets: list[Triplet], loss_config: LossConfig) -> LossBreakdown:
    """Mean per-triplet loss of a frozen model over a triplet list."""
    scorer = PatchScorer(model)
    s_p = scorer.score_pairs([(t.reference, t.positive) for t in triplets])
    s_n = scorer.score_pairs([(t.reference, t.negative) for t in triplets])
    config = LossConfig(gamma=loss_config.gamma, alpha=loss_config.alpha, reduction="mean")
    return forensic_loss(np.clip(s_p, 0.0, 1.0), np.clip(s_n, 0.0, 1.0), config)


SIMNET_DECAY_FACTOR = 100.0


def _make_optimizer(model: ForensicModel, config: TrainConfig):
    """Adam over both nets; the similarity head gets much stronger decay.

    Unchecked, the head's logits can saturate the output sigmoid for every
    pair at once, which zeroes all gradients and freezes training.  Decay
    proportional to the logit scale keeps (and pulls) it inside the sigmoid's
    responsive range.
    """
    embed_params = [p for p in model.embedder.parameters() if p.requires_grad]
    sim_params = [p for p in model.simnet.parameters() if p.requires_grad]
    return torch.optim.Adam(
        [
            {"params": embed_params, "weight_decay": config.weight_decay},
            {"params": sim_params, "weight_decay": config.weight_decay * SIMNET_DECAY_FACTOR},
        ],
        lr=config.learning_rate,
    )


def _run_batches(model: ForensicModel, triplets: list[Triplet], optimizer, config: TrainConfig, context: str):
    model.train_mode()
    for start in range(0, len(triplets), config.batch_size):
        batch = triplets[start : start + config.batch_size]
        index: dict[str, int] = {}
        patches = []
        for t in batch:
            for p in (t.reference, t.positive, t.negative):
                if p.key not in index:
                    index[p.key] = len(patches)
                    patches.append(p)
        embeddings = model.embedder(patches_to_tensor(patches))
        ref = embeddings[[index[t.reference.key] for t in batch]]
        pos = embeddings[[index[t.positive.key] for t in batch]]
        neg = embeddings[[index[t.negative.key] for t in batch]]
        s_p = model.simnet(ref, pos)
        s_n = model.simnet(ref, neg)
        try:
            loss = forensic_loss_torch(s_p, s_n, config.loss)
        except LossInputError as exc:
            raise TrainingError(f"invalid similarity scores at {context}, batch starting {start}: {exc}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {float(loss)} at {context}, batch starting {start}")
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), config.grad_clip_norm)
        optimizer.step()
        model.step += 1
    model.eval_mode()


def train(
    model: ForensicModel,
    train_split: Manifest,
    val_split: Manifest,
    store: PatchStore,
    config: TrainConfig,
) -> tuple[ForensicModel, TrainHistory]:
    """Optimize embedder+simnet on mined triplets; restore the best-validation state.

    If the validation split yields no triplets, the final epoch's weights are
    kept instead of a best-validation snapshot.
    """
    candidates = build_candidate_triplets(train_split, store)
    try:
        val_triplets = build_candidate_triplets(val_split, store)
    except NoValidTripletsError:
        val_triplets = []

    optimizer = _make_optimizer(model, config)
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    history = TrainHistory()
    best_val = None
    best_state = None

    for epoch in range(config.epochs):
        start_time = time.perf_counter()
        try:
            mined = mine_semi_hard(
                candidates, PatchScorer(model), config.mining, seed=derive_seed(config.seed, 101, epoch)
            )
        except ValueError as exc:
            raise TrainingError(f"mining failed at epoch {epoch}: {exc}") from exc
        if not mined:
            # past the semi-hard regime: every remaining violation is "hard",
            # so keep optimizing on the full candidate pool
            mined = candidates
        order = rng.permutation(len(mined))
        epoch_triplets = [mined[i] for i in order]
        _run_batches(model, epoch_triplets, optimizer, config, context=f"epoch {epoch}")
        snapshot = evaluate_triplet_loss(model, candidates, config.loss)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                l_ts=snapshot.l_ts,
                l_ns=snapshot.l_ns,
                l_fl=snapshot.l_fl,
                triplet_count=len(mined),
                wall_time=time.perf_counter() - start_time,
            )
        )
        if val_triplets:
            val_loss = evaluate_triplet_loss(model, val_triplets, config.loss).l_fl
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best_state = model.state_dicts()

    if best_state is not None:
        model.load_state_dicts(best_state)
    model.eval_mode()
    return model, history


def finetune(model: ForensicModel, support_triplets: list[Triplet], config: TrainConfig) -> ForensicModel:
    """Adapt a trained model to a target domain on the support triplets only.

    Returns a new model; the input model is left untouched.  No mining: every
    support triplet is used each epoch.
    """
    if not support_triplets:
        raise ValueError("empty support set")
    tuned = model.clone()
    optimizer = _make_optimizer(tuned, config)
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    for epoch in range(config.epochs):
        order = rng.permutation(len(support_triplets))
        _run_batches(
            tuned,
            [support_triplets[i] for i in order],
            optimizer,
            config,
            context=f"finetune epoch {epoch}",
        )
    tuned.eval_mode()
    return tuned
