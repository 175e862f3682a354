"""Compare the AWM variants (clip and shrink switched on and off) on one seed."""
import argparse
import csv
import sys

from awmlab.defenses.awm import VARIANTS
from awmlab.harness import ONE_SHOT, ExperimentConfig, prepare, run_defense


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS))
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    prep = prepare(cfg)
    w = csv.writer(sys.stdout)
    w.writerow(["variant", "acc", "asr_all", "m_l1"])
    w.writerow(["none", f"{prep.baseline.acc:.4f}", f"{prep.baseline.asr_all:.4f}", ""])
    for v in args.variants:
        r = run_defense(prep, "awm", ONE_SHOT, args.seed, awm_override={"variant": v})
        w.writerow([v, f"{r['report'].acc:.4f}", f"{r['report'].asr_all:.4f}", f"{r['m_l1']:.1f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
