"""Poison, train and defend on the toy BadNets task, then print the aggregate table."""
import argparse

from awmlab.harness import ExperimentConfig, format_table, read_csv, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="config JSON (default: built-in toy config)")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    run = run_experiment(cfg, out_root=args.out, force=args.force)
    print(format_table(read_csv(run / "aggregate.csv")))
    print(run)


if __name__ == "__main__":
    main()
