"""Experiment orchestration: config file schema, protocols, artifacts.

A run is driven by one JSON config with nested sections; unknown keys are
hard errors.  One top-level seed governs every derived seed (corpus
generation, splitting, weight init, batch order, shuffled controls), so a
run regenerates bit-identical numeric outputs from its summary.json echo.

Protocols:
  intra               train and test on splits of one synthetic corpus
  cross               train on print-scan recaptures, test on a same-template
                      corpus recaptured through the display channel
  fine_tune_transfer  train on a source corpus, adapt with a handful of
                      support triplets to a shifted held-out template family
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .channelsim import ChannelBank, ChannelParams, SynthSpec, derive_seed, generate_corpus
from .corpus import (
    Manifest,
    ManifestError,
    PatchFilterConfig,
    PatchStore,
    SplitSpec,
    split_corpus,
    subset_by_ids,
)
from .embedder import EmbedderConfig
from .losses import LossConfig
from .metrics import ScoredSample, apcer_bpcer, auc, bpcer_threshold, eer, roc_points
from .model import ForensicModel, save_checkpoint
from .simnet import SimNetConfig
from .trainer import TrainConfig, train, finetune
from .triplets import MiningConfig, Triplet
from .verifier import SupportSet, score_questioned


class ConfigError(ValueError):
    """Config file is malformed: unknown key, bad value, or missing section."""


@dataclass(frozen=True)
class PatchConfig:
    train_stride: int = 112
    eval_stride: int = 224
    filter: PatchFilterConfig = field(default_factory=PatchFilterConfig)


@dataclass(frozen=True)
class VerificationConfig:
    policy: str = "max_accuracy"
    bpcer_targets: tuple[float, ...] = (0.01, 0.05, 0.10)
    support_k: int = 3


@dataclass(frozen=True)
class CrossConfig:
    test_channel_mix: tuple[float, float] = (0.0, 1.0)
    test_channels: ChannelBank = field(default_factory=ChannelBank)


@dataclass(frozen=True)
class TargetConfig:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(n_templates=2, n_genuine_per_template=8, n_recaptured_per_template=10))
    channels: ChannelBank = field(default_factory=ChannelBank)
    support_triplets: int = 6
    finetune_epochs: int = 15
    finetune_learning_rate: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "intra"
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    channels: ChannelBank = field(default_factory=ChannelBank)
    split: SplitSpec = field(default_factory=SplitSpec)
    patches: PatchConfig = field(default_factory=PatchConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    simnet: SimNetConfig = field(default_factory=SimNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    cross: CrossConfig = field(default_factory=CrossConfig)
    target: TargetConfig = field(default_factory=TargetConfig)

    def derived_seeds(self) -> dict:
        return {
            "synth_master": derive_seed(self.seed, 1),
            "template_master": derive_seed(self.seed, 2),
            "split": derive_seed(self.seed, 3),
            "embedder_init": derive_seed(self.seed, 4),
            "simnet_init": derive_seed(self.seed, 5),
            "train": derive_seed(self.seed, 6),
            "test_synth_master": derive_seed(self.seed, 7),
            "shuffle_control": derive_seed(self.seed, 8),
            "finetune": derive_seed(self.seed, 9),
        }


# ---------------------------------------------------------------------------
# config parsing


def _check_keys(section: dict, known, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object, got {type(section).__name__}")
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")


def _build(cls, section: dict, path: str, **overrides):
    fields = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set()
    _check_keys(section, fields - set(overrides), path)
    try:
        return cls(**{**section, **overrides})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_channel_params(section: dict, path: str, base: ChannelParams) -> ChannelParams:
    known = {"halftone", "halftone_cell", "blur_sigma", "noise_sigma", "color_matrix", "gamma", "grid_period"}
    _check_keys(section, known, path)
    updates = dict(section)
    if "color_matrix" in updates:
        updates["color_matrix"] = tuple(tuple(row) for row in updates["color_matrix"])
    try:
        return replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_channel_bank(section: dict, path: str) -> ChannelBank:
    _check_keys(section, {"capture", "print_scan", "display_capture", "jitter"}, path)
    bank = ChannelBank()
    try:
        return ChannelBank(
            capture=_parse_channel_params(section.get("capture", {}), f"{path}.capture", bank.capture),
            print_scan=_parse_channel_params(section.get("print_scan", {}), f"{path}.print_scan", bank.print_scan),
            display_capture=_parse_channel_params(
                section.get("display_capture", {}), f"{path}.display_capture", bank.display_capture
            ),
            jitter=float(section.get("jitter", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_synth(section: dict, path: str) -> SynthSpec:
    section = dict(section)
    if "channel_mix" in section:
        section["channel_mix"] = tuple(section["channel_mix"])
    if "image_size" in section:
        section["image_size"] = tuple(section["image_size"])
    if "master_seed" in section:
        raise ConfigError(f"{path}: master_seed is derived from the top-level seed")
    return _build(SynthSpec, section, path)


def config_from_dict(data: dict) -> ExperimentConfig:
    top_keys = {
        "protocol", "seed", "synth", "channels", "split", "patches", "embedder",
        "simnet", "loss", "mining", "train", "verification", "cross", "target",
    }
    _check_keys(data, top_keys, "config")
    protocol = data.get("protocol", "intra")
    if protocol not in ("intra", "cross", "fine_tune_transfer"):
        raise ConfigError(f"config.protocol: unknown protocol {protocol!r}")
    seed = int(data.get("seed", 0))

    split_section = dict(data.get("split", {}))
    if "seed" in split_section:
        raise ConfigError("config.split: seed is derived from the top-level seed")
    if "ratios" in split_section:
        split_section["ratios"] = tuple(split_section["ratios"])
    if "stratify_by" in split_section:
        split_section["stratify_by"] = tuple(split_section["stratify_by"])

    patches_section = dict(data.get("patches", {}))
    _check_keys(patches_section, {"train_stride", "eval_stride", "filter"}, "config.patches")
    filter_config = _build(PatchFilterConfig, patches_section.pop("filter", {}), "config.patches.filter")

    embedder_section = dict(data.get("embedder", {}))
    if "init_seed" in embedder_section:
        raise ConfigError("config.embedder: init_seed is derived from the top-level seed")
    simnet_section = dict(data.get("simnet", {}))
    if "init_seed" in simnet_section:
        raise ConfigError("config.simnet: init_seed is derived from the top-level seed")

    loss = _build(LossConfig, data.get("loss", {}), "config.loss")
    mining_section = dict(data.get("mining", {}))
    mining = _build(MiningConfig, mining_section, "config.mining", gamma=mining_section.pop("gamma", loss.gamma))

    train_section = dict(data.get("train", {}))
    if "seed" in train_section:
        raise ConfigError("config.train: seed is derived from the top-level seed")
    _check_keys(
        train_section,
        {"epochs", "learning_rate", "batch_size", "optimizer", "weight_decay", "grad_clip_norm"},
        "config.train",
    )

    verification_section = dict(data.get("verification", {}))
    if "bpcer_targets" in verification_section:
        verification_section["bpcer_targets"] = tuple(verification_section["bpcer_targets"])

    cross_section = dict(data.get("cross", {}))
    _check_keys(cross_section, {"test_channel_mix", "test_channels"}, "config.cross")
    cross = CrossConfig(
        test_channel_mix=tuple(cross_section.get("test_channel_mix", (0.0, 1.0))),
        test_channels=_parse_channel_bank(cross_section.get("test_channels", {}), "config.cross.test_channels"),
    )

    target_section = dict(data.get("target", {}))
    _check_keys(
        target_section,
        {"synth", "channels", "support_triplets", "finetune_epochs", "finetune_learning_rate"},
        "config.target",
    )
    default_target = TargetConfig()
    target = TargetConfig(
        synth=_parse_synth(target_section.get("synth", asdict(default_target.synth)), "config.target.synth")
        if "synth" in target_section
        else default_target.synth,
        channels=_parse_channel_bank(target_section.get("channels", {}), "config.target.channels"),
        support_triplets=int(target_section.get("support_triplets", default_target.support_triplets)),
        finetune_epochs=int(target_section.get("finetune_epochs", default_target.finetune_epochs)),
        finetune_learning_rate=float(
            target_section.get("finetune_learning_rate", default_target.finetune_learning_rate)
        ),
    )

    seeds = {"split": derive_seed(seed, 3), "embedder": derive_seed(seed, 4), "simnet": derive_seed(seed, 5), "train": derive_seed(seed, 6)}
    return ExperimentConfig(
        protocol=protocol,
        seed=seed,
        synth=_parse_synth(data.get("synth", {}), "config.synth"),
        channels=_parse_channel_bank(data.get("channels", {}), "config.channels"),
        split=_build(SplitSpec, split_section, "config.split", seed=seeds["split"]),
        patches=PatchConfig(
            train_stride=int(patches_section.get("train_stride", 112)),
            eval_stride=int(patches_section.get("eval_stride", 224)),
            filter=filter_config,
        ),
        embedder=_build(EmbedderConfig, embedder_section, "config.embedder", init_seed=seeds["embedder"]),
        simnet=_build(SimNetConfig, simnet_section, "config.simnet", init_seed=seeds["simnet"]),
        loss=loss,
        mining=mining,
        train=_build(
            TrainConfig, train_section, "config.train", loss=loss, mining=mining, seed=seeds["train"]
        ),
        verification=_build(VerificationConfig, verification_section, "config.verification"),
        cross=cross,
        target=target,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if "config" in data and "results" in data:
        data = data["config"]  # a summary.json reruns its embedded config
    return config_from_dict(data)


def _channel_dict(p: ChannelParams) -> dict:
    out = {
        "halftone": p.halftone,
        "halftone_cell": p.halftone_cell,
        "blur_sigma": p.blur_sigma,
        "noise_sigma": p.noise_sigma,
        "color_matrix": [list(row) for row in p.color_matrix],
        "gamma": p.gamma,
    }
    if p.grid_period is not None:
        out["grid_period"] = p.grid_period
    return out


def _bank_dict(bank: ChannelBank) -> dict:
    return {
        "capture": _channel_dict(bank.capture),
        "print_scan": _channel_dict(bank.print_scan),
        "display_capture": _channel_dict(bank.display_capture),
        "jitter": bank.jitter,
    }


def _synth_dict(spec: SynthSpec) -> dict:
    return {
        "n_templates": spec.n_templates,
        "n_genuine_per_template": spec.n_genuine_per_template,
        "n_recaptured_per_template": spec.n_recaptured_per_template,
        "channel_mix": list(spec.channel_mix),
        "image_size": list(spec.image_size),
    }


def config_to_dict(config: ExperimentConfig) -> dict:
    """Echo a config as a dict that reloads via config_from_dict unchanged.

    Derived seeds are intentionally absent: they reconstruct from the
    top-level seed.
    """
    return {
        "protocol": config.protocol,
        "seed": config.seed,
        "synth": _synth_dict(config.synth),
        "channels": _bank_dict(config.channels),
        "split": {"ratios": list(config.split.ratios), "stratify_by": list(config.split.stratify_by)},
        "patches": {
            "train_stride": config.patches.train_stride,
            "eval_stride": config.patches.eval_stride,
            "filter": asdict(config.patches.filter),
        },
        "embedder": {
            "backbone": config.embedder.backbone,
            "embed_dim": config.embedder.embed_dim,
            "hidden_dim": config.embedder.hidden_dim,
            "freeze_backbone": config.embedder.freeze_backbone,
        },
        "simnet": {"hidden_dim": config.simnet.hidden_dim},
        "loss": {"gamma": config.loss.gamma, "alpha": config.loss.alpha, "reduction": config.loss.reduction},
        "mining": {
            "gamma": config.mining.gamma,
            "mode": config.mining.mode,
            "max_per_anchor": config.mining.max_per_anchor,
        },
        "train": {
            "epochs": config.train.epochs,
            "learning_rate": config.train.learning_rate,
            "batch_size": config.train.batch_size,
            "optimizer": config.train.optimizer,
            "weight_decay": config.train.weight_decay,
            "grad_clip_norm": config.train.grad_clip_norm,
        },
        "verification": {
            "policy": config.verification.policy,
            "bpcer_targets": list(config.verification.bpcer_targets),
            "support_k": config.verification.support_k,
        },
        "cross": {
            "test_channel_mix": list(config.cross.test_channel_mix),
            "test_channels": _bank_dict(config.cross.test_channels),
        },
        "target": {
            "synth": _synth_dict(config.target.synth),
            "channels": _bank_dict(config.target.channels),
            "support_triplets": config.target.support_triplets,
            "finetune_epochs": config.target.finetune_epochs,
            "finetune_learning_rate": config.target.finetune_learning_rate,
        },
    }


# ---------------------------------------------------------------------------
# evaluation helpers


def _support_triplet(rows, store: PatchStore, index: int) -> Triplet | None:
    genuine = [r for r in rows if r.label == "genuine" and r.id in store.patches]
    recaptured = [r for r in rows if r.label == "recaptured" and r.id in store.patches]
    if not genuine or not recaptured:
        return None
    genuine = sorted(genuine, key=lambda r: r.id)
    recaptured = sorted(recaptured, key=lambda r: r.id)
    ref_row = genuine[index % len(genuine)]
    pos_row = genuine[(index + 1) % len(genuine)] if len(genuine) > 1 else ref_row
    neg_row = recaptured[index % len(recaptured)]
    ref = {p.origin: p for p in store.patches[ref_row.id]}
    pos = {p.origin: p for p in store.patches[pos_row.id]}
    neg = {p.origin: p for p in store.patches[neg_row.id]}
    common = sorted(set(ref) & set(pos) & set(neg))
    if not common:
        return None
    return Triplet(ref[common[0]], pos[common[0]], neg[common[0]])


def build_support(manifest: Manifest, store: PatchStore, template_id: str, k: int, exclude_id: str | None = None) -> SupportSet:
    """Deterministic K-triplet support set for one template.

    References rotate over the template's genuine images (excluding
    ``exclude_id``, so a calibration image never references itself).
    """
    rows = [r for r in manifest.rows if r.template_id == template_id and r.id != exclude_id]
    groups = []
    for i in range(k):
        triplet = _support_triplet(rows, store, i)
        if triplet is None:
            break
        groups.append(triplet)
    if not groups:
        raise ManifestError(f"template {template_id}: cannot build a support set (need genuine and recaptured rows)")
    return SupportSet.from_triplets(groups)


def score_rows(
    model: ForensicModel,
    rows,
    eval_store: PatchStore,
    support_manifest: Manifest,
    support_store: PatchStore,
    k: int,
    exclude_self: bool = False,
) -> tuple[list[ScoredSample], list[dict], list[str]]:
    """Score each row's image against its template's support references.

    Returns (scored samples, per-image detail records, skipped image ids).
    """
    samples: list[ScoredSample] = []
    details: list[dict] = []
    skipped: list[str] = []
    supports: dict[tuple[str, str | None], SupportSet] = {}
    for row in rows:
        patches = eval_store.patches.get(row.id)
        if not patches:
            skipped.append(row.id)
            continue
        key = (row.template_id, row.id if exclude_self else None)
        if key not in supports:
            try:
                supports[key] = build_support(
                    support_manifest, support_store, row.template_id, k, exclude_id=key[1]
                )
            except ManifestError:
                skipped.append(row.id)
                continue
        score = score_questioned(model, patches, supports[key])
        samples.append(ScoredSample(score=score, label="bona_fide" if row.label == "genuine" else "attack"))
        details.append({"id": row.id, "template_id": row.template_id, "label": row.label, "channel": row.channel, "score": score})
    return samples, details, skipped


def shuffled_control_auc(samples: list[ScoredSample], seed: int) -> float:
    """AUC after a seed-deterministic label shuffle: the chance baseline."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    labels = [s.label for s in samples]
    perm = rng.permutation(len(labels))
    return auc([ScoredSample(s.score, labels[perm[i]]) for i, s in enumerate(samples)])


def _metric_rows(protocol, train_tag, test_tag, samples, bpcer_targets):
    eer_value, eer_theta = eer(samples)
    rows = [
        (protocol, train_tag, test_tag, "auc", "", auc(samples)),
        (protocol, train_tag, test_tag, "eer", f"threshold={eer_theta!r}", eer_value),
    ]
    bona = [s.score for s in samples if s.label == "bona_fide"]
    for target in bpcer_targets:
        theta = bpcer_threshold(bona, target)
        apcer_value, bpcer_value = apcer_bpcer(samples, theta)
        op = f"bpcer_target={target:g}"
        rows.append((protocol, train_tag, test_tag, "apcer", op, apcer_value))
        rows.append((protocol, train_tag, test_tag, "bpcer", op, bpcer_value))
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "train_set", "test_set", "metric", "operating_point", "value"])
        for row in rows:
            writer.writerow([*row[:5], repr(float(row[5]))])


def write_roc_csv(samples, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "apcer", "bpcer"])
        for theta, apcer_value, bpcer_value in roc_points(samples):
            writer.writerow([repr(theta), repr(apcer_value), repr(bpcer_value)])


def export_embeddings(model: ForensicModel, manifest: Manifest, out_path, stride: int = 224, filter_config: PatchFilterConfig = PatchFilterConfig()) -> list[str]:
    """Write one CSV row per image: id, label, channel, template_id, then the
    mean embedding over its discriminative patches.  Images with no usable
    patches are omitted and listed in a sidecar ``<out>.skipped.txt``.
    """
    store = PatchStore.from_manifest(manifest, stride=stride, filter_config=filter_config)
    dim = model.embedder_config.embed_dim
    skipped = []
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "channel", "template_id"] + [f"e{i}" for i in range(dim)])
        for row in manifest.rows:
            patches = store.patches.get(row.id)
            if not patches:
                skipped.append(row.id)
                continue
            vectors = np.stack([e.values for e in model.embed_patches(patches)])
            mean = vectors.mean(axis=0)
            writer.writerow([row.id, row.label, row.channel, row.template_id] + [repr(float(v)) for v in mean])
    sidecar = out_path.with_suffix(out_path.suffix + ".skipped.txt")
    if skipped:
        sidecar.write_text("\n".join(skipped) + "\n", encoding="utf-8")
    elif sidecar.exists():
        sidecar.unlink()
    return skipped


# ---------------------------------------------------------------------------
# protocol runners


def _train_model(config: ExperimentConfig, manifest: Manifest):
    splits = split_corpus(manifest, config.split)
    store = PatchStore.from_manifest(manifest, stride=config.patches.train_stride, filter_config=config.patches.filter)
    model = ForensicModel.create(config.embedder, config.simnet)
    model, history = train(model, splits[0], splits[1], store, config.train)
    return model, history, splits, store


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Execute the configured protocol; write all artifacts; return the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = config.derived_seeds()

    corpus_spec = replace(config.synth, master_seed=seeds["synth_master"])
    manifest = generate_corpus(
        corpus_spec,
        out_dir / "corpus",
        channels=config.channels,
        dataset_id="synth-train",
        template_seed_master=seeds["template_master"],
    )
    model, history, (train_split, val_split, test_split), store = _train_model(config, manifest)
    history.to_csv(out_dir / "history.csv")
    save_checkpoint(model, out_dir / "checkpoint")

    eval_filter = config.patches.filter
    k = config.verification.support_k
    results: dict = {"history_final_l_fl": history.records[-1].l_fl if history.records else None}
    metric_rows = []

    if config.protocol == "intra":
        eval_store = PatchStore.from_manifest(
            subset_by_ids(manifest, test_split.ids()), stride=config.patches.eval_stride, filter_config=eval_filter
        )
        samples, details, skipped = score_rows(model, test_split.rows, eval_store, train_split, store, k)
        metric_rows = _metric_rows("intra", "synth-train", "synth-test", samples, config.verification.bpcer_targets)
        results.update(_sample_counts(samples, skipped))

    elif config.protocol == "cross":
        test_spec = replace(
            config.synth, master_seed=seeds["test_synth_master"], channel_mix=config.cross.test_channel_mix
        )
        test_manifest = generate_corpus(
            test_spec,
            out_dir / "corpus_test",
            channels=config.cross.test_channels,
            dataset_id="synth-test",
            template_seed_master=seeds["template_master"],
        )
        eval_store = PatchStore.from_manifest(test_manifest, stride=config.patches.eval_stride, filter_config=eval_filter)
        samples, details, skipped = score_rows(model, test_manifest.rows, eval_store, train_split, store, k)
        metric_rows = _metric_rows(
            "cross", "synth-print-scan", "synth-display", samples, config.verification.bpcer_targets
        )
        control = shuffled_control_auc(samples, seeds["shuffle_control"])
        metric_rows.append(("cross", "synth-print-scan", "synth-display", "auc", "label_shuffled_control", control))
        results.update(_sample_counts(samples, skipped))
        results["auc_shuffled_control"] = control

    elif config.protocol == "fine_tune_transfer":
        target_spec = replace(config.target.synth, master_seed=seeds["test_synth_master"])
        target_manifest = generate_corpus(
            target_spec,
            out_dir / "corpus_test",
            channels=config.target.channels,
            dataset_id="synth-target",
            template_prefix="U",
            template_seed_master=derive_seed(seeds["template_master"], 1),
        )
        target_store = PatchStore.from_manifest(
            target_manifest, stride=config.patches.train_stride, filter_config=eval_filter
        )
        support = _select_support_triplets(target_manifest, target_store, config.target.support_triplets)
        support_ids = sorted({p.source_id for t in support for p in (t.reference, t.positive, t.negative)})
        questioned_rows = [r for r in target_manifest.rows if r.id not in set(support_ids)]
        eval_store = PatchStore.from_manifest(
            subset_by_ids(target_manifest, [r.id for r in questioned_rows]),
            stride=config.patches.eval_stride,
            filter_config=eval_filter,
        )
        support_manifest = subset_by_ids(target_manifest, support_ids)

        ft_config = replace(
            config.train,
            epochs=config.target.finetune_epochs,
            learning_rate=config.target.finetune_learning_rate,
            seed=seeds["finetune"],
        )
        tuned = finetune(model, support, ft_config)
        save_checkpoint(tuned, out_dir / "checkpoint_finetuned")

        for tag, candidate in (("source", model), ("source+ft", tuned)):
            samples, details, skipped = score_rows(
                candidate, questioned_rows, eval_store, support_manifest, target_store, k
            )
            # thresholds are calibrated on source training data, as during training
            calib_samples, _, _ = score_rows(
                candidate,
                [r for r in train_split.rows if r.label == "genuine"],
                PatchStore.from_manifest(
                    subset_by_ids(manifest, [r.id for r in train_split.rows if r.label == "genuine"]),
                    stride=config.patches.eval_stride,
                    filter_config=eval_filter,
                ),
                train_split,
                store,
                k,
                exclude_self=True,
            )
            calib_scores = [s.score for s in calib_samples]
            metric_rows += _metric_rows("fine_tune_transfer", tag, "synth-target", samples, ())
            for target_rate in config.verification.bpcer_targets:
                theta = bpcer_threshold(calib_scores, target_rate)
                apcer_value, bpcer_value = apcer_bpcer(samples, theta)
                op = f"bpcer_target={target_rate:g}"
                metric_rows.append(("fine_tune_transfer", tag, "synth-target", "apcer", op, apcer_value))
                metric_rows.append(("fine_tune_transfer", tag, "synth-target", "bpcer", op, bpcer_value))
            results[f"{tag}_counts"] = _sample_counts(samples, skipped)

    write_metrics_csv(metric_rows, out_dir / "metrics.csv")
    write_roc_csv(samples, out_dir / "roc.csv")
    export_embeddings(
        model, manifest, out_dir / "embeddings.csv", stride=config.patches.eval_stride, filter_config=eval_filter
    )

    results["metrics"] = [
        {"protocol": r[0], "train_set": r[1], "test_set": r[2], "metric": r[3], "operating_point": r[4], "value": float(r[5])}
        for r in metric_rows
    ]
    summary = {
        "protocol": config.protocol,
        "seed": config.seed,
        "derived_seeds": seeds,
        "config": config_to_dict(config),
        "results": results,
        "artifacts": {
            "checkpoint": "checkpoint",
            "history": "history.csv",
            "metrics": "metrics.csv",
            "roc": "roc.csv",
            "embeddings": "embeddings.csv",
        },
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _sample_counts(samples, skipped):
    return {
        "n_bona_fide": sum(1 for s in samples if s.label == "bona_fide"),
        "n_attack": sum(1 for s in samples if s.label == "attack"),
        "n_skipped": len(skipped),
    }


def _select_support_triplets(manifest: Manifest, store: PatchStore, k_total: int) -> list[Triplet]:
    """Exactly ``k_total`` support triplets spread evenly across templates."""
    templates = sorted({r.template_id for r in manifest.rows})
    per_template = {t: k_total // len(templates) for t in templates}
    for t in templates[: k_total % len(templates)]:
        per_template[t] += 1
    support = []
    for template_id in templates:
        rows = [r for r in manifest.rows if r.template_id == template_id]
        for i in range(per_template[template_id]):
            triplet = _support_triplet(rows, store, i)
            if triplet is not None:
                support.append(triplet)
    if len(support) != k_total:
        raise ManifestError(f"could not build {k_total} support triplets (got {len(support)})")
    return support
