"""Train the default poisoned model once and freeze its numbers as a test fixture.

The acceptance suite compares a fresh run against this file, so rerun it only
when the training pipeline changes on purpose.
"""
import argparse
import json
from pathlib import Path

from awmlab.harness import ExperimentConfig, prepare

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "backdoor_oracle.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--min-acc", type=float, default=0.90)
    ap.add_argument("--min-asr", type=float, default=0.90)
    args = ap.parse_args()

    cfg = ExperimentConfig()
    prep = prepare(cfg)
    b = prep.baseline
    frozen = {
        "config_hash": cfg.digest(),
        "model_checksum": prep.model.params.checksum(),
        "acc": b.acc,
        "asr_inclusive": b.asr_per_trigger,
        "n_eval": b.n_eval,
        "thresholds": {"acc": args.min_acc, "asr": args.min_asr},
    }
    args.out.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    print(json.dumps(frozen, indent=2))


if __name__ == "__main__":
    main()
