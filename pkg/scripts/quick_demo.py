#!/usr/bin/env python3
"""One-seed demo of the intra-channel protocol (about a minute on CPU).

Runs the checked-in configs/intra.json end to end: synthetic corpus,
training, evaluation. Artifacts land under out/quick_demo/ (or argv[1]).
"""

import json
import sys
from pathlib import Path

from recapdet.experiment import config_from_dict, run_experiment


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out/quick_demo")
    config_path = Path(__file__).resolve().parent.parent / "configs" / "intra.json"
    config = config_from_dict({**json.loads(config_path.read_text()), "seed": 0})
    summary = run_experiment(config, out)
    print(f"\nartifacts under {out}/")
    for row in summary["results"]["metrics"]:
        point = f" @ {row['operating_point']}" if row["operating_point"] else ""
        print(f"  {row['metric']:>6}{point}: {row['value']:.4f}")


if __name__ == "__main__":
    main()
