#!/usr/bin/env python3
"""Run the checked-in experiment protocols across seeds and tabulate results.

Usage:
    python scripts/run_protocols.py [intra|cross|fine_tune] [--seeds 0 1 2 3 4] [--out DIR]

Each (protocol, seed) run writes its own artifact directory (checkpoint,
history.csv, metrics.csv, roc.csv, embeddings.csv, summary.json); the table
below summarizes the headline numbers.
"""

import argparse
import json
from pathlib import Path

from recapdet.experiment import config_from_dict, run_experiment

CONFIGS = {
    "intra": "intra.json",
    "cross": "cross_channel.json",
    "fine_tune": "fine_tune_transfer.json",
}


def metric(summary, name, operating_point="", train_set=None):
    for row in summary["results"]["metrics"]:
        if row["metric"] == name and row["operating_point"] == operating_point:
            if train_set is None or row["train_set"] == train_set:
                return row["value"]
    return float("nan")


def headline(protocol, summary):
    if protocol == "fine_tune":
        before = metric(summary, "bpcer", "bpcer_target=0.05", "source")
        after = metric(summary, "bpcer", "bpcer_target=0.05", "source+ft")
        return f"bpcer@5% {before:.3f} -> {after:.3f}"
    auc = metric(summary, "auc")
    eer = next(r["value"] for r in summary["results"]["metrics"] if r["metric"] == "eer")
    line = f"auc {auc:.3f}  eer {eer:.3f}"
    if protocol == "cross":
        line += f"  shuffled-control {summary['results']['auc_shuffled_control']:.3f}"
    return line


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("protocol", choices=sorted(CONFIGS), nargs="?", default="intra")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", type=Path, default=Path("out/protocols"))
    args = parser.parse_args()

    config_path = Path(__file__).resolve().parent.parent / "configs" / CONFIGS[args.protocol]
    base = json.loads(config_path.read_text())
    print(f"protocol {args.protocol} ({config_path.name}), seeds {args.seeds}")
    for seed in args.seeds:
        config = config_from_dict({**base, "seed": seed})
        out_dir = args.out / args.protocol / f"seed{seed}"
        summary = run_experiment(config, out_dir)
        print(f"  seed {seed}: {headline(args.protocol, summary)}")


if __name__ == "__main__":
    main()
