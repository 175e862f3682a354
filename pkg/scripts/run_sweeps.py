"""Hyperparameter sweeps on the toy task: gamma, tau and alpha, then the per-layer study."""
import argparse

from awmlab.harness import (ExperimentConfig, SweepSpec, format_table, layer_mask_study, prepare, read_csv,
                            run_sweep)

SWEEPS = {
    "gamma": [1e-8, 1e-5, 1e-2],
    "tau": [10, 100, 1000, 3000],
    "alpha": [0.5, 0.6, 0.7, 0.8],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--axes", nargs="+", default=[*SWEEPS, "layers"])
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    prep = prepare(cfg)
    for axis in args.axes:
        if axis == "layers":
            run = layer_mask_study(cfg, out_root=args.out, prepared=prep, seeds=cfg.seeds[:args.repeats])
            print("== layers")
            print(format_table(read_csv(run / "layers.csv")))
            print(format_table(read_csv(run / "histogram.csv")))
            continue
        path = run_sweep(cfg, SweepSpec(axis, SWEEPS[axis], args.repeats), out_root=args.out, prepared=prep)
        print(f"== {axis}")
        print(format_table(read_csv(path)))


if __name__ == "__main__":
    main()
