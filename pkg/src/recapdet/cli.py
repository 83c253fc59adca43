"""Command-line entry point: each pipeline stage independently invocable.

Subcommands: synth, train, evaluate, verify, export-embeddings, run.
Exit codes: 0 success, 2 config error, 3 data error, 4 training error,
5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import ManifestError, PatchStore, load_manifest, subset_by_ids
from .channelsim import generate_corpus
from .experiment import (
    ConfigError,
    _metric_rows,
    _train_model,
    build_support,
    config_from_dict,
    export_embeddings,
    run_experiment,
    score_rows,
    write_metrics_csv,
    write_roc_csv,
)
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import TrainingError
from .triplets import NoValidTripletsError
from .verifier import verify as verify_decision

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_IO = 5


def _load(args):
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if "config" in data and "results" in data:
        data = data["config"]  # rerun a summary.json's embedded config
    if args.seed is not None:
        data = {**data, "seed": args.seed}
    return config_from_dict(data)


def cmd_synth(args) -> int:
    config = _load(args)
    seeds = config.derived_seeds()
    spec = replace(config.synth, master_seed=seeds["synth_master"])
    manifest = generate_corpus(
        spec,
        args.out,
        channels=config.channels,
        dataset_id="synth-train",
        template_seed_master=seeds["template_master"],
    )
    print(f"wrote {len(manifest)} images under {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    manifest = load_manifest(args.manifest)
    model, history, _, _ = _train_model(config, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint")
    history.to_csv(out / "history.csv")
    print(f"trained {config.train.epochs} epochs; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load(args)
    model = load_checkpoint(args.checkpoint)
    train_manifest = load_manifest(args.train_manifest)
    test_manifest = load_manifest(args.test_manifest)
    support_store = PatchStore.from_manifest(
        train_manifest, stride=config.patches.train_stride, filter_config=config.patches.filter
    )
    eval_store = PatchStore.from_manifest(
        test_manifest, stride=config.patches.eval_stride, filter_config=config.patches.filter
    )
    samples, details, skipped = score_rows(
        model, test_manifest.rows, eval_store, train_manifest, support_store, config.verification.support_k
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _metric_rows("evaluate", args.train_manifest, args.test_manifest, samples, config.verification.bpcer_targets)
    write_metrics_csv(rows, out / "metrics.csv")
    write_roc_csv(samples, out / "roc.csv")
    if skipped:
        (out / "skipped.txt").write_text("\n".join(skipped) + "\n", encoding="utf-8")
    print(f"evaluated {len(samples)} images; metrics at {out / 'metrics.csv'}")
    return 0


def cmd_verify(args) -> int:
    config = _load(args)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    rows = {r.id: r for r in manifest.rows}
    if args.questioned not in rows:
        raise ManifestError(f"questioned id {args.questioned!r} not in manifest")
    row = rows[args.questioned]
    store = PatchStore.from_manifest(
        subset_by_ids(manifest, [row.id]), stride=config.patches.eval_stride, filter_config=config.patches.filter
    )
    patches = store.patches.get(row.id)
    if not patches:
        raise ManifestError(f"questioned image {row.id} has no discriminative patches")
    support_store = PatchStore.from_manifest(
        subset_by_ids(manifest, [r.id for r in manifest.rows if r.template_id == row.template_id and r.id != row.id]),
        stride=config.patches.train_stride,
        filter_config=config.patches.filter,
    )
    support = build_support(manifest, support_store, row.template_id, config.verification.support_k, exclude_id=row.id)
    decision = verify_decision(model, patches, support, args.threshold, mode=args.mode, questioned_id=row.id)
    report = decision.report()
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return 0


def cmd_export_embeddings(args) -> int:
    config = _load(args) if args.config else None
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    stride = config.patches.eval_stride if config else 224
    filter_config = config.patches.filter if config else None
    kwargs = {"stride": stride}
    if filter_config is not None:
        kwargs["filter_config"] = filter_config
    skipped = export_embeddings(model, manifest, args.out, **kwargs)
    print(f"wrote embeddings for {len(manifest) - len(skipped)} images to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = _load(args)
    summary = run_experiment(config, args.out)
    print(f"protocol {summary['protocol']} complete; summary at {Path(args.out) / 'summary.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recapdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config JSON (or a summary.json)")
        p.add_argument("--seed", type=int, default=None, help="override the config's top-level seed")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="split a corpus and train a model")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a test corpus against a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="decide authenticity of one questioned image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--questioned", required=True, help="image id within the manifest")
    p.add_argument("--mode", choices=["seen_template", "few_shot"], default="few_shot")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-embeddings", help="dump per-image mean embeddings to CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("run", help="run the full configured protocol")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, NoValidTripletsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
