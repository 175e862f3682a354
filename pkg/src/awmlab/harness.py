"""Config-driven experiment runner.

One experiment: ingest data, poison the training split, train a backdoored
model, then run every (defense, available-data size, seed) combination and
aggregate the results. Sweeps and the per-layer mask study reuse the same
prepared model.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .attacks import ALL_TO_ONE, DEFAULT_TARGETS, PoisonPlan, make_trigger, poison_dataset
from .attacks import write_manifest as write_poison_manifest
from .data import generate_synthetic, load_csv, load_idx, split_per_class
from .defenses.anp import ANPConfig, anp_defend, select_threshold
from .defenses.awm import AWMConfig, awm_defend, batch_size_for
from .defenses.finetune import finetune_defend
from .errors import AWMLabError, ConfigError, StageError
from .metrics import Attack, evaluate, mask_histogram
from .models import ZOO, ModelSpec, TrainConfig, build_model, train_model

ONE_SHOT = "one_shot"
DEFENSES = ("awm", "anp", "finetune")
SWEEP_AXES = ("available_data", "alpha", "gamma", "tau", "prune_threshold", "layer_restriction")
COMPLETE = "complete"


@dataclass
class ExperimentConfig:
    name: str = "toy_badnets"
    dataset: dict = field(default_factory=lambda: {
        "source": "synthetic", "classes": 10, "per_class": 300, "image_size": 32, "seed": 0})
    train_per_class: int = 100
    pool_per_class: int = 20          # defense pool; the rest of the held-out split is for evaluation
    eval_size: int | None = None      # cap on evaluation samples (None: all remaining)
    model: str = "small_cnn"          # zoo name or path to a spec JSON
    model_seed: int = 0
    train: dict = field(default_factory=lambda: {"epochs": 30, "lr": 0.01, "batch_size": 64})
    poison: dict = field(default_factory=lambda: {
        "triggers": ["badnets-square"], "rate": 0.05, "policy": ALL_TO_ONE, "target": None, "seed": 0})
    defenses: list = field(default_factory=lambda: ["awm"])
    awm: dict = field(default_factory=dict)
    anp: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=lambda: {"epochs": 20, "lr": 0.01})
    available: list = field(default_factory=lambda: [ONE_SHOT])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"

    def __post_init__(self):
        unknown = [d for d in self.defenses if d not in DEFENSES]
        if unknown:
            raise ConfigError(f"unknown defenses {unknown}; choose from {DEFENSES}")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        for a in self.available:
            if a != ONE_SHOT and (not isinstance(a, int) or a < 1):
                raise ConfigError(f"available size must be a positive int or {ONE_SHOT!r}, got {a!r}")
        if self.dataset.get("source") not in ("synthetic", "idx", "csv"):
            raise ConfigError(f"unknown dataset source {self.dataset.get('source')!r}")
        if not self.poison.get("triggers"):
            raise ConfigError("poison plan names no triggers")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        base = cls()
        merged = {}
        for k, v in d.items():
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) and isinstance(v, dict) else v
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Hash over everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def target(self):
        t = self.poison.get("target")
        if t is not None:
            return int(t)
        trig = self.poison["triggers"]
        return DEFAULT_TARGETS.get(trig[0], 0) if len(trig) == 1 else 0


@dataclass
class SweepSpec:
    axis: str
    values: list
    repeats: int = 5
    defense: str = "awm"

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass
class Prepared:
    config: ExperimentConfig
    train: object
    pool: object
    eval: object
    attacks: list
    model: object
    train_curve: list
    baseline: object


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except AWMLabError as exc:
        raise StageError(name, exc) from exc
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def ingest(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["source"] == "synthetic":
        data = generate_synthetic(ds.get("classes", 10), ds.get("per_class", 300), ds.get("image_size", 32),
                                  seed=ds.get("seed", 0), channels=ds.get("channels", 1))
    elif ds["source"] == "idx":
        data = load_idx(ds["images"], ds["labels"], ds.get("classes"))
    else:
        data = load_csv(ds["path"], tuple(ds["image_shape"]), ds.get("classes"))
    train, held = split_per_class(data, cfg.train_per_class)
    pool, evalset = split_per_class(held, cfg.pool_per_class)
    if cfg.eval_size is not None:
        evalset = evalset.subset(np.arange(min(cfg.eval_size, len(evalset))))
    if len(evalset) == 0:
        raise ConfigError("no samples left for evaluation")
    return train, pool, evalset


def model_spec(cfg: ExperimentConfig, image_shape, classes):
    if cfg.model in ZOO:
        return ZOO[cfg.model](image_shape, classes)
    return ModelSpec.load(cfg.model)


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Ingest, poison and train; everything a defense run needs."""
    train, pool, evalset = _stage("ingest", ingest, cfg)
    shape = train.image_shape
    triggers = [make_trigger(n, shape) for n in cfg.poison["triggers"]]
    target = cfg.target()
    policy = cfg.poison.get("policy", ALL_TO_ONE)
    plan = _stage("poison", PoisonPlan, triggers, cfg.poison.get("rate", 0.05), policy, target,
                  cfg.poison.get("seed", 0))
    poisoned = _stage("poison", poison_dataset, train, plan)
    spec = _stage("train", model_spec, cfg, shape, train.classes)
    model, _ = _stage("train", build_model, spec, cfg.model_seed)
    tcfg = TrainConfig(**cfg.train)
    model, curve = _stage("train", train_model, model, poisoned, config=tcfg, seed=cfg.model_seed)
    attacks = [Attack(t, policy, target) for t in triggers]
    baseline = evaluate(model, evalset, attacks)
    prep = Prepared(cfg, poisoned, pool, evalset, attacks, model, curve, baseline)
    return prep


def defense_subset(pool, available, seed):
    """Clean data granted to a defense: one image per class for one-shot, else a random subset."""
    rng = np.random.default_rng(seed)
    if available == ONE_SHOT:
        idx = [rng.choice(np.flatnonzero(pool.labels == k)) for k in range(pool.classes)
               if np.any(pool.labels == k)]
        if len(idx) < pool.classes:
            raise ConfigError("one-shot needs at least one pool sample per class")
        return pool.subset(np.sort(np.asarray(idx)))
    if available > len(pool):
        raise ConfigError(f"available size {available} exceeds the defense pool ({len(pool)})")
    return pool.subset(np.sort(rng.choice(len(pool), size=available, replace=False)))


def awm_config(cfg: ExperimentConfig, available, seed, **override):
    kw = dict(cfg.awm)
    kw.update(override)
    one_shot = available == ONE_SHOT
    kw.setdefault("augment", one_shot)
    if kw.get("batch_size") is None:
        n = cfg.dataset.get("classes", 10) if one_shot else available
        kw["batch_size"] = batch_size_for(n, one_shot)
    kw["seed"] = seed
    return AWMConfig(**kw)


def run_defense(prep: Prepared, defense, available, seed, awm_override=None, anp_override=None):
    """One defense run; returns a result dict (plus arrays for on-disk artifacts)."""
    cfg = prep.config
    data = defense_subset(prep.pool, available, seed)
    out = {"defense": defense, "available": available, "seed": seed, "n_defense": len(data)}
    if defense == "awm":
        acfg = awm_config(cfg, available, seed, **(awm_override or {}))
        monitor = lambda m: (lambda r: (r.acc, r.asr_per_trigger))(evaluate(prep.model, prep.eval, prep.attacks, m))
        mask, trace = awm_defend(prep.model, data, acfg, monitor=monitor, eval_every=10)
        report = evaluate(prep.model, prep.eval, prep.attacks, mask)
        out.update(report=report, mask=mask, trace=trace, m_l1=mask.l1(), config=acfg.to_dict())
    elif defense == "anp":
        kw = dict(cfg.anp)
        kw.update(anp_override or {})
        kw.setdefault("batch_size", batch_size_for(len(data), available == ONE_SHOT))
        acfg = ANPConfig(seed=seed, **kw)
        res = anp_defend(prep.model, data, acfg)
        sweep = []
        for t, pruned in zip(res.thresholds, res.pruned):
            r = evaluate(pruned, prep.eval, prep.attacks)
            sweep.append((t, r.acc, r.asr_all, r))
        best = select_threshold([s[:3] for s in sweep], prep.baseline.acc)
        report = next(s[3] for s in sweep if s[0] == best[0])
        out.update(report=report, threshold=best[0], sweep=[(t, a, s) for t, a, s, _ in sweep],
                   neuron_mask=res.neuron_mask, config=acfg.to_dict())
    elif defense == "finetune":
        kw = dict(cfg.finetune)
        tuned = finetune_defend(prep.model, data, seed=seed, **kw)
        report = evaluate(tuned, prep.eval, prep.attacks)
        out.update(report=report, model=tuned, config=kw)
    else:
        raise ConfigError(f"unknown defense {defense!r}")
    return out


def _worker(args):
    prep, defense, available, seed = args
    return run_defense(prep, defense, available, seed)


def _workers():
    try:
        return max(1, int(os.environ.get("AWM_THREADS", "1")))
    except ValueError:
        raise ConfigError("AWM_THREADS must be an integer") from None


def parallel_map(fn, jobs):
    """Order-preserving map over a process pool sized by AWM_THREADS."""
    jobs = list(jobs)
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# -------------------------------------------------------------- aggregation

def _fmt(v):
    return f"{v:.6f}"


def aggregate_rows(results, baseline, trigger_names):
    """Mean and population std over seeds per (defense, available)."""
    rows = [{"defense": "none", "available": "all", "n": 1, "acc_mean": _fmt(baseline.acc), "acc_std": _fmt(0.0),
             **{f"asr_{t}_mean": _fmt(baseline.asr_per_trigger[t]) for t in trigger_names},
             **{f"asr_{t}_std": _fmt(0.0) for t in trigger_names},
             "asr_all_mean": _fmt(baseline.asr_all), "asr_all_std": _fmt(0.0),
             "removal_rate": _fmt(float(all(baseline.removal_success.values())))}]
    groups = {}
    for r in results:
        groups.setdefault((r["defense"], str(r["available"])), []).append(r)
    for (defense, available), rs in groups.items():
        reps = [r["report"] for r in sorted(rs, key=lambda r: r["seed"])]
        row = {"defense": defense, "available": available, "n": len(reps)}
        acc = np.array([r.acc for r in reps])
        row["acc_mean"], row["acc_std"] = _fmt(acc.mean()), _fmt(acc.std())
        for t in trigger_names:
            v = np.array([r.asr_per_trigger[t] for r in reps])
            row[f"asr_{t}_mean"], row[f"asr_{t}_std"] = _fmt(v.mean()), _fmt(v.std())
        v = np.array([r.asr_all for r in reps])
        row["asr_all_mean"], row["asr_all_std"] = _fmt(v.mean()), _fmt(v.std())
        row["removal_rate"] = _fmt(np.mean([all(r.removal_success.values()) for r in reps]))
        rows.append(row)
    return rows


def write_csv(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    header = list(rows[0])
    for r in rows[1:]:
        header += [k for k in r if k not in header]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------ run directory

def _run_order(d):
    # "<stamp>_<hash>" then "<stamp>-1_<hash>", "<stamp>-2_<hash>", ... within one second
    stamp = d.name.rsplit("_", 1)[0]
    base, _, k = stamp.partition("-")[2].partition("-")
    return stamp.split("-")[0], base, int(k or 0)


def find_completed(out_root, digest):
    root = Path(out_root)
    if not root.is_dir():
        return None
    for d in sorted(root.glob(f"*_{digest[:8]}"), key=_run_order, reverse=True):
        man = d / "manifest.json"
        if man.exists():
            try:
                meta = json.loads(man.read_text())
            except json.JSONDecodeError:
                continue
            if meta.get("status") == COMPLETE and meta.get("config_hash") == digest:
                return d
    return None


def new_run_dir(out_root, digest):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = Path(out_root) / f"{stamp}_{digest[:8]}"
    k = 1
    while d.exists():
        d = Path(out_root) / f"{stamp}-{k}_{digest[:8]}"
        k += 1
    d.mkdir(parents=True)
    return d


def write_manifest(run_dir, cfg, status, extra=None):
    meta = {"name": cfg.name, "config_hash": cfg.digest(), "config": cfg.to_dict(), "status": status,
            "versions": {"awmlab": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "updated": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        meta.update(extra)
    (Path(run_dir) / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _run_tag(r):
    return f"{r['defense']}_{r['available']}_s{r['seed']}"


def save_run(run_dir, r):
    run_dir = Path(run_dir)
    tag = _run_tag(r)
    rep = r["report"]
    payload = {"defense": r["defense"], "available": r["available"], "seed": r["seed"],
               "n_defense": r["n_defense"], "config": r.get("config"), "report": json.loads(rep.to_json())}
    if "threshold" in r:
        payload["threshold"] = r["threshold"]
        payload["sweep"] = [{"threshold": t, "acc": a, "asr_all": s} for t, a, s in r["sweep"]]
    if "m_l1" in r:
        payload["m_l1"] = r["m_l1"]
    (run_dir / "runs").mkdir(exist_ok=True)
    (run_dir / "runs" / f"{tag}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    ck = run_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    if "mask" in r:
        checkpoint.save(ck / f"{tag}.mask.ckpt", r["mask"].to_entries())
        (run_dir / "traces").mkdir(exist_ok=True)
        r["trace"].write_csv(run_dir / "traces" / f"{tag}.csv")
        hist = mask_histogram(r["mask"])
        (run_dir / "histograms").mkdir(exist_ok=True)
        write_csv(run_dir / "histograms" / f"{tag}.csv", histogram_rows(hist))
    if "neuron_mask" in r:
        checkpoint.save(ck / f"{tag}.neurons.ckpt", {"neuron_mask": r["neuron_mask"]})
    if "model" in r:
        r["model"].save(ck / f"{tag}.model.ckpt")


def histogram_rows(hist):
    edges = hist.edges
    labels = [f"{edges[i]:.1f}-{edges[i + 1]:.1f}" for i in range(len(edges) - 1)]
    return [{"layer": li, **{lab: _fmt(v) for lab, v in zip(labels, pct)}}
            for li, pct in hist.percentages().items()]


def save_prepared(run_dir, prep: Prepared):
    d = Path(run_dir) / "poisoned"
    d.mkdir(exist_ok=True)
    prep.model.save(d / "model.ckpt")
    prep.model.spec.save(d / "model_spec.json")
    write_poison_manifest(d / "poison_manifest.csv", prep.train)
    for atk in prep.attacks:
        atk.trigger.save(d / "triggers")
    (d / "baseline.json").write_text(prep.baseline.to_json())
    (d / "train_curve.json").write_text(json.dumps([float(v) for v in prep.train_curve]))


def run_experiment(config, out_root=None, force=False, prepared: Prepared | None = None):
    """Full pipeline; returns the run directory (an existing one if already complete)."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out_root = Path(out_root or cfg.out_dir)
    digest = cfg.digest()
    done = find_completed(out_root, digest)
    if done is not None and not force:
        return done
    run_dir = new_run_dir(out_root, digest)
    write_manifest(run_dir, cfg, "running")
    try:
        prep = prepared or prepare(cfg)
        _stage("report", save_prepared, run_dir, prep)
        jobs = [(prep, d, a, s) for d in cfg.defenses for a in cfg.available for s in cfg.seeds]
        results = []
        for r in _stage("defend", parallel_map, _worker, jobs):
            _stage("report", save_run, run_dir, r)
            results.append(r)
        names = [a.name for a in prep.attacks]
        rows = aggregate_rows(results, prep.baseline, names)
        _stage("report", write_csv, run_dir / "aggregate.csv", rows)
    except StageError as exc:
        write_manifest(run_dir, cfg, "failed", {"failed_stage": exc.stage, "error": str(exc.cause)})
        raise
    write_manifest(run_dir, cfg, COMPLETE)
    return run_dir


# ------------------------------------------------------------------- sweeps

def _awm_job(args):
    prep, available, seed, override = args
    r = run_defense(prep, "awm", available, seed, awm_override=override)
    r.pop("trace")
    return r


def _anp_job(args):
    prep, available, seed, override = args
    return run_defense(prep, "anp", available, seed, anp_override=override)


def sweep_seeds(cfg: ExperimentConfig, repeats):
    seeds = list(cfg.seeds)[:repeats]
    nxt = max(cfg.seeds) + 1
    while len(seeds) < repeats:
        seeds.append(nxt)
        nxt += 1
    return seeds


def _override(axis, value):
    if axis == "alpha":
        return {"alpha": float(value), "beta": 1.0 - float(value)}
    if axis in ("gamma", "tau"):
        return {axis: float(value)}
    if axis == "layer_restriction":
        return {"layer_restriction": tuple(value) if isinstance(value, (list, tuple)) else (int(value),)}
    return {}


def _summary_row(label, reports, trigger_names, extra=None):
    row = dict(label)
    row["n"] = len(reports)
    acc = np.array([r.acc for r in reports])
    row["acc_mean"], row["acc_std"] = _fmt(acc.mean()), _fmt(acc.std())
    for t in trigger_names:
        v = np.array([r.asr_per_trigger[t] for r in reports])
        row[f"asr_{t}_mean"], row[f"asr_{t}_std"] = _fmt(v.mean()), _fmt(v.std())
    v = np.array([r.asr_all for r in reports])
    row["asr_all_mean"], row["asr_all_std"] = _fmt(v.mean()), _fmt(v.std())
    for k, vals in (extra or {}).items():
        vals = np.asarray(vals, dtype=np.float64)
        row[f"{k}_mean"], row[f"{k}_std"] = _fmt(vals.mean()), _fmt(vals.std())
    return row


def sweep_rows(prep: Prepared, sweep: SweepSpec):
    """Mean/std rows, one per swept value, with every other setting at its default."""
    cfg = prep.config
    seeds = sweep_seeds(cfg, sweep.repeats)
    names = [a.name for a in prep.attacks]
    default_avail = cfg.available[0]
    rows = []
    if sweep.axis == "prune_threshold":
        thresholds = [float(v) for v in sweep.values]
        res = parallel_map(_anp_job, [(prep, default_avail, s, {"prune_thresholds": thresholds}) for s in seeds])
        for v in thresholds:
            reps = []
            for r in res:
                pruned = dict((t, (a, s)) for t, a, s in r["sweep"])
                reps.append((pruned[v][0], pruned[v][1]))
            acc = np.array([a for a, _ in reps])
            asr = np.array([s for _, s in reps])
            rows.append({"axis": sweep.axis, "value": v, "n": len(reps),
                         "acc_mean": _fmt(acc.mean()), "acc_std": _fmt(acc.std()),
                         "asr_all_mean": _fmt(asr.mean()), "asr_all_std": _fmt(asr.std())})
        return rows
    for v in sweep.values:
        avail = v if sweep.axis == "available_data" else default_avail
        job = _awm_job if sweep.defense == "awm" else _anp_job
        override = _override(sweep.axis, v) if sweep.defense == "awm" else {}
        res = parallel_map(job, [(prep, avail, s, override) for s in seeds])
        extra = {"m_l1": [r["m_l1"] for r in res]} if sweep.defense == "awm" else None
        rows.append(_summary_row({"axis": sweep.axis, "value": json.dumps(v)},
                                 [r["report"] for r in res], names, extra))
    return rows


def _aux_dir(out_root, cfg, tag):
    digest = hashlib.sha256((cfg.digest() + tag).encode()).hexdigest()
    return new_run_dir(out_root or cfg.out_dir, digest)


def run_sweep(config, sweep: SweepSpec, out_root=None, prepared: Prepared | None = None):
    """Run a one-axis sweep and write ``sweep_<axis>.csv``; returns its path."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    prep = prepared or prepare(cfg)
    run_dir = _aux_dir(out_root, cfg, f"sweep:{sweep.axis}:{json.dumps(sweep.values)}:{sweep.repeats}")
    write_manifest(run_dir, cfg, "running", {"sweep": asdict(sweep)})
    rows = _stage("defend", sweep_rows, prep, sweep)
    path = run_dir / f"sweep_{sweep.axis}.csv"
    write_csv(path, rows)
    write_manifest(run_dir, cfg, COMPLETE, {"sweep": asdict(sweep)})
    return path


def layer_rows(prep: Prepared, seeds=None):
    """AWM restricted to one maskable layer at a time, plus the unrestricted run.

    Returns (rows, histogram rows of the unrestricted masks averaged over seeds).
    """
    cfg = prep.config
    seeds = list(seeds if seeds is not None else cfg.seeds)
    layers = [li for li, *_ in prep.model.mask_layout]
    if len(layers) < 2:
        raise ConfigError("the layer study needs at least two maskable layers")
    names = [a.name for a in prep.attacks]
    avail = cfg.available[0]
    rows = []
    for li in layers:
        res = parallel_map(_awm_job, [(prep, avail, s, {"layer_restriction": (li,)}) for s in seeds])
        rows.append(_summary_row({"restriction": str(li)}, [r["report"] for r in res], names))
    res = parallel_map(_awm_job, [(prep, avail, s, {}) for s in seeds])
    rows.append(_summary_row({"restriction": "all"}, [r["report"] for r in res], names))
    hists = [mask_histogram(r["mask"]) for r in res]
    pct = {li: np.mean([h.percentages()[li] for h in hists], axis=0) for li in layers}
    edges = hists[0].edges
    labels = [f"{edges[i]:.1f}-{edges[i + 1]:.1f}" for i in range(len(edges) - 1)]
    heat = [{"layer": li, **{lab: _fmt(v) for lab, v in zip(labels, pct[li])}} for li in layers]
    return rows, heat


def layer_mask_study(config, out_root=None, prepared: Prepared | None = None, seeds=None):
    """Per-layer restriction table and mask histogram heat table; returns the run directory."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    prep = prepared or prepare(cfg)
    run_dir = _aux_dir(out_root, cfg, "layers")
    write_manifest(run_dir, cfg, "running")
    rows, heat = _stage("defend", layer_rows, prep, seeds)
    write_csv(run_dir / "layers.csv", rows)
    write_csv(run_dir / "histogram.csv", heat)
    write_manifest(run_dir, cfg, COMPLETE)
    return run_dir


def format_table(rows, columns=None):
    """Plain-text table of CSV-like rows."""
    if not rows:
        return "(empty)"
    columns = columns or list(rows[0])
    widths = [max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)
