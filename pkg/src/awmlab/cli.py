"""Command-line entry point: ``awmlab <command> [--config C] [--seed S] [--out DIR] [--force]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .attacks import ALL_TO_ONE, PoisonPlan, TriggerSpec, make_trigger, poison_dataset, write_manifest
from .errors import AWMLabError, ConfigError, FormatError, NumericError, StageError, TrainingError
from .harness import (ExperimentConfig, SweepSpec, format_table, ingest, layer_mask_study, new_run_dir,
                      prepare, read_csv, run_experiment, run_sweep, save_prepared, write_manifest as write_run_manifest)
from .metrics import Attack, evaluate
from .models import MaskState, Model, ModelSpec

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

# --check thresholds for AWM rows: removal in at least 4 of 5 runs, ACC within 15 points
CHECK_REMOVAL_RATE = 0.8
CHECK_ACC_DROP = 0.15


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _print_rows(rows, columns=None):
    print(format_table(rows, columns))


def cmd_train(args):
    cfg = load_config(args)
    prep = prepare(cfg)
    run_dir = new_run_dir(cfg.out_dir, cfg.digest())
    save_prepared(run_dir, prep)
    write_run_manifest(run_dir, cfg, "complete", {"command": "train"})
    print(f"poisoned model: ACC {prep.baseline.acc:.4f}  ASR(all) {prep.baseline.asr_all:.4f}")
    print(run_dir)
    return EXIT_OK


def cmd_poison(args):
    cfg = load_config(args)
    train, _, _ = ingest(cfg)
    triggers = [make_trigger(n, train.image_shape) for n in cfg.poison["triggers"]]
    plan = PoisonPlan(triggers, cfg.poison.get("rate", 0.05), cfg.poison.get("policy", ALL_TO_ONE),
                      cfg.target(), cfg.poison.get("seed", 0))
    poisoned = poison_dataset(train, plan)
    run_dir = new_run_dir(cfg.out_dir, cfg.digest())
    write_manifest(run_dir / "poison_manifest.csv", poisoned)
    checkpoint.save(run_dir / "poisoned_train.ckpt",
                    {"images": poisoned.images, "labels": poisoned.labels.astype(np.float32)})
    for t in triggers:
        t.save(run_dir / "triggers")
    write_run_manifest(run_dir, cfg, "complete", {"command": "poison"})
    print(f"poisoned {int(poisoned.poisoned.sum())} of {len(poisoned)} training samples")
    print(run_dir)
    return EXIT_OK


def check_rows(rows):
    """Failures of the acceptance thresholds in an aggregate table."""
    base = next(r for r in rows if r["defense"] == "none")
    problems = []
    for r in rows:
        if r["defense"] != "awm":
            continue
        if float(r["removal_rate"]) < CHECK_REMOVAL_RATE:
            problems.append(f"awm @ {r['available']}: removal rate {r['removal_rate']} < {CHECK_REMOVAL_RATE}")
        if float(r["acc_mean"]) < float(base["acc_mean"]) - CHECK_ACC_DROP:
            problems.append(f"awm @ {r['available']}: ACC {r['acc_mean']} dropped more than {CHECK_ACC_DROP}")
    return problems


def cmd_defend(args):
    cfg = load_config(args)
    run_dir = run_experiment(cfg, force=args.force)
    rows = read_csv(run_dir / "aggregate.csv")
    _print_rows(rows)
    print(run_dir)
    if args.check:
        problems = check_rows(rows)
        for p in problems:
            print(f"CHECK FAILED: {p}", file=sys.stderr)
        if problems:
            return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args):
    run_dir = Path(args.run)
    meta = json.loads((run_dir / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    _, _, evalset = ingest(cfg)
    spec = ModelSpec.load(run_dir / "poisoned" / "model_spec.json")
    model = Model.load(spec, run_dir / "poisoned" / "model.ckpt")
    attacks = [Attack(TriggerSpec.load(run_dir / "poisoned" / "triggers" / f"{n}.trigger.json"),
                      cfg.poison.get("policy", ALL_TO_ONE), cfg.target()) for n in cfg.poison["triggers"]]
    mask = None
    if args.mask:
        mask = MaskState.from_entries(checkpoint.load(args.mask), model.mask_layout)
    report = evaluate(model, evalset, attacks, mask)
    print(report.to_json())
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args)
    values = json.loads(args.values)
    if not isinstance(values, list):
        raise ConfigError("--values must be a JSON list")
    sweep = SweepSpec(args.axis, values, args.repeats, args.defense)
    path = run_sweep(cfg, sweep)
    _print_rows(read_csv(path))
    print(path)
    return EXIT_OK


def cmd_layers(args):
    cfg = load_config(args)
    run_dir = layer_mask_study(cfg)
    _print_rows(read_csv(run_dir / "layers.csv"))
    print()
    _print_rows(read_csv(run_dir / "histogram.csv"))
    print(run_dir)
    return EXIT_OK


def cmd_report(args):
    run_dir = Path(args.run)
    for name in ("aggregate.csv", "layers.csv", "histogram.csv"):
        if (run_dir / name).exists():
            print(f"== {name}")
            _print_rows(read_csv(run_dir / name))
    for path in sorted(run_dir.glob("sweep_*.csv")):
        print(f"== {path.name}")
        _print_rows(read_csv(path))
    if args.check and (run_dir / "aggregate.csv").exists():
        problems = check_rows(read_csv(run_dir / "aggregate.csv"))
        for p in problems:
            print(f"CHECK FAILED: {p}", file=sys.stderr)
        if problems:
            return EXIT_CHECK
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--force", action="store_true", help="rerun even if a completed run exists")
    common.add_argument("--check", action="store_true", help="exit 4 when acceptance thresholds fail")

    p = argparse.ArgumentParser(prog="awmlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="poison the training split and train a model")
    sub.add_parser("poison", parents=[common], help="write the poisoned training set and its manifest")
    sub.add_parser("defend", parents=[common], help="run every configured defense and aggregate")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained run, optionally with a mask")
    ev.add_argument("--run", required=True, help="run directory produced by train or defend")
    ev.add_argument("--mask", help="mask checkpoint to apply")
    sw = sub.add_parser("sweep", parents=[common], help="one-axis hyperparameter sweep")
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help='JSON list, e.g. "[10, 100, 1000]"')
    sw.add_argument("--repeats", type=int, default=5)
    sw.add_argument("--defense", default="awm", choices=["awm", "anp"])
    sub.add_parser("layers", parents=[common], help="per-layer mask restriction study")
    rp = sub.add_parser("report", parents=[common], help="print the tables of a run directory")
    rp.add_argument("--run", required=True)
    return p


COMMANDS = {"train": cmd_train, "poison": cmd_poison, "defend": cmd_defend, "eval": cmd_eval,
            "sweep": cmd_sweep, "layers": cmd_layers, "report": cmd_report}


def _exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, (ConfigError, FormatError)):
        return EXIT_CONFIG
    if isinstance(cause, (NumericError, TrainingError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (AWMLabError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
