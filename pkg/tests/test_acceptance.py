"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runs the full desk-scale pipeline on the default toy task (about 9 minutes on
one CPU core). The lines are repeated in the terminal summary.
"""
import csv
import json
import time

import numpy as np
import pytest

from awmlab.attacks import ALL_TO_ONE, DEFAULT_TARGETS, TRIGGER_NAMES, make_trigger
from awmlab.data import load_idx
from awmlab.defenses.awm import scaled_tau
from awmlab.errors import FormatError
from awmlab.harness import (ONE_SHOT, ExperimentConfig, SweepSpec, ingest, prepare, read_csv, run_defense,
                            run_experiment, run_sweep)
from awmlab.metrics import Attack, asr_pair, removal_success
from awmlab.models import TrainConfig, ZOO, build_model, masked_forward, train_model

from helpers import (ACCEPTANCE_LINES, FD_TOL, FIXTURES, byte_loop_idx, check_case, gradient_cases,
                     model_grad_errors)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    """Record and echo one criterion line; returns the ok flag for asserting."""
    def record(n, title, ok, detail, started=None):
        took = f", {time.perf_counter() - started:.0f} s" if started is not None else ""
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}: {detail}{took}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


@pytest.fixture(scope="module")
def awm_run(tmp_path_factory):
    """The default experiment (AWM, one-shot, five seeds), run end to end."""
    out = tmp_path_factory.mktemp("acceptance_runs")
    t0 = time.perf_counter()
    run = run_experiment(ExperimentConfig(), out_root=out)
    return out, run, time.perf_counter() - t0


def _run_json(run, seed):
    return json.loads((run / "runs" / f"awm_one_shot_s{seed}.json").read_text())


def _trace(run, seed):
    with open(run / "traces" / f"awm_one_shot_s{seed}.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_c01_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for kind, case in sorted(gradient_cases().items()):
        worst[kind] = max(check_case(*case(rng)) for _ in range(20))
    model_errs = [model_grad_errors(rng) for _ in range(20)]
    for k in ("theta", "m", "x"):
        worst[f"model/{k}"] = max(e[k] for e in model_errs)
    top = max(worst, key=worst.get)
    ok = worst[top] < FD_TOL
    assert verdict(1, "gradient fidelity", ok, f"max rel err {worst[top]:.2e} ({top}) < {FD_TOL:g}", t0), worst


def test_c02_masked_forward_identity(verdict, toy_prep):
    t0 = time.perf_counter()
    model = toy_prep.model
    x = np.random.default_rng(7).uniform(0, 1, (100,) + model.spec.input_shape).astype(np.float32)
    plain = model.forward(x).data
    masked = masked_forward(model, model.new_mask(), x).data
    ok = plain.tobytes() == masked.tobytes()
    assert verdict(2, "masked forward with m=1", ok, f"bitwise equal on {len(x)} inputs: {ok}", t0)


def test_c03_backdoor_injection(verdict, toy_prep):
    t0 = time.perf_counter()
    oracle = json.loads((FIXTURES / "backdoor_oracle.json").read_text())
    b = toy_prep.baseline
    asr = b.asr_per_trigger["badnets-square"]
    same_run = (toy_prep.config.digest() == oracle["config_hash"]
                and toy_prep.model.params.checksum() == oracle["model_checksum"])
    ok = (same_run and b.acc >= oracle["thresholds"]["acc"] and asr >= oracle["thresholds"]["asr"])
    detail = (f"ACC {b.acc:.4f} >= {oracle['thresholds']['acc']}, ASR {asr:.4f} >= {oracle['thresholds']['asr']}, "
              f"matches frozen run: {same_run}")
    assert verdict(3, "backdoor injection", ok, detail, t0)


def test_c04_awm_one_shot_removal(verdict, toy_prep, awm_run):
    _, run, took = awm_run
    t0 = time.perf_counter() - took   # the five-seed run happens in the fixture
    cfg = ExperimentConfig()
    base = json.loads((run / "poisoned" / "baseline.json").read_text())
    classes = cfg.dataset["classes"]
    wins, parts = 0, []
    for s in cfg.seeds:
        rep = _run_json(run, s)["report"]
        win = rep["asr_all"] < 1.5 / classes and base["acc"] - rep["acc"] <= 0.15
        wins += win
        parts.append(f"s{s} ASR {rep['asr_all']:.3f} ACC {rep['acc']:.3f}")
    ok = wins >= 4 and base["acc"] == toy_prep.baseline.acc
    assert verdict(4, "AWM one-shot removal", ok, f"{wins}/5 successes [{'; '.join(parts)}]", t0)


def test_c05_clip_contract(verdict, awm_run):
    _, run, _ = awm_run
    cfg = ExperimentConfig()
    tau = scaled_tau((1, 32, 32))
    epochs = _run_json(run, 0)["config"]["epochs"]
    worst, n = 0.0, 0
    for s in cfg.seeds:
        rows = _trace(run, s)
        assert len(rows) == epochs
        worst = max(worst, max(float(r["delta_l1"]) for r in rows))
        n += len(rows)
    ok = worst <= tau * (1 + 1e-6)
    assert verdict(5, "clip contract", ok, f"max ||delta||_1 {worst:.3f} <= tau {tau:g} over {n} epochs")


def test_c06_mask_bounds(verdict, awm_run):
    _, run, _ = awm_run
    lo, hi = 1.0, 0.0
    for s in ExperimentConfig().seeds:
        rows = _trace(run, s)
        lo = min(lo, min(float(r["m_min"]) for r in rows))
        hi = max(hi, max(float(r["m_max"]) for r in rows))
    ok = lo >= 0.0 and hi <= 1.0
    assert verdict(6, "mask bounds", ok, f"min(m) {lo:.4g} >= 0, max(m) {hi:.4g} <= 1")


def test_c07_ablation_ordering(verdict, toy_prep):
    t0 = time.perf_counter()
    asr = {v: run_defense(toy_prep, "awm", ONE_SHOT, 0, awm_override={"variant": v})["report"].asr_all
           for v in ("full", "no_clip", "no_shrink", "nc_ns")}
    ok = asr["full"] <= asr["no_clip"] and asr["nc_ns"] >= asr["no_shrink"]
    detail = ", ".join(f"{k} {v:.4f}" for k, v in asr.items())
    assert verdict(7, "ablation ordering", ok, detail, t0)


def test_c08_anp_comparison(verdict, toy_prep, awm_run):
    t0 = time.perf_counter()
    _, run, _ = awm_run
    parts, ok = [], True
    for s in ExperimentConfig().seeds:
        awm = _run_json(run, s)["report"]["asr_all"]
        anp = min(a for _, _, a in run_defense(toy_prep, "anp", ONE_SHOT, s)["sweep"])
        ok &= awm <= anp
        parts.append(f"s{s} AWM {awm:.3f} vs ANP {anp:.3f}")
    assert verdict(8, "AWM vs ANP (one-shot)", ok, "; ".join(parts), t0)


def test_c09_sparsity_response(verdict, toy_prep, tmp_path):
    t0 = time.perf_counter()
    gammas = [1e-8, 1e-5, 1e-2]
    rows = read_csv(run_sweep(toy_prep.config, SweepSpec("gamma", gammas, repeats=1), out_root=tmp_path,
                              prepared=toy_prep))
    l1 = [float(r["m_l1_mean"]) for r in rows]
    ok = all(b <= a for a, b in zip(l1, l1[1:]))
    detail = ", ".join(f"gamma {g:g}: {v:.1f}" for g, v in zip(gammas, l1))
    assert verdict(9, "sparsity response ||m||_1", ok, detail, t0)


def test_c10_benign_asr(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    train, _, evalset = ingest(cfg)
    lo, hi, parts = 1.0, 0.0, []
    for seed in (0, 1, 2):
        model, _ = build_model(ZOO[cfg.model](train.image_shape, train.classes), seed)
        model, _ = train_model(model, train, config=TrainConfig(**cfg.train), seed=seed)
        asr = [asr_pair(model, evalset, Attack(make_trigger(n, train.image_shape), ALL_TO_ONE,
                                               DEFAULT_TARGETS[n]))[0] for n in TRIGGER_NAMES]
        lo, hi = min(lo, *asr), max(hi, *asr)
        parts.append(f"s{seed} [{min(asr):.3f}, {max(asr):.3f}]")
    ok = 0.02 <= lo and hi <= 0.20
    assert verdict(10, "benign ASR sanity", ok, f"inclusive ASR over {len(TRIGGER_NAMES)} triggers: "
                   + "; ".join(parts), t0)


def test_c11_multi_trigger(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(FIXTURES.parent.parent / "configs" / "toy_multitrigger.json")
    prep = prepare(cfg)
    asr = [run_defense(prep, "awm", ONE_SHOT, s)["report"].asr_all for s in cfg.seeds]
    ok = all(a < 0.15 for a in asr)
    detail = (f"poisoned asr_all {prep.baseline.asr_all:.3f}; AWM asr_all "
              + ", ".join(f"s{s} {a:.3f}" for s, a in zip(cfg.seeds, asr)) + " < 0.15")
    assert verdict(11, "multi-trigger defense", ok, detail, t0)


def test_c12_idx_bit_exactness(verdict):
    t0 = time.perf_counter()
    ds = load_idx(FIXTURES / "four-images-idx3-ubyte", FIXTURES / "four-labels-idx1-ubyte")
    dims, pixels = byte_loop_idx(FIXTURES / "four-images-idx3-ubyte")
    _, labels = byte_loop_idx(FIXTURES / "four-labels-idx1-ubyte")
    exact = (ds.images.shape == (dims[0], 1, dims[1], dims[2]) and ds.labels.tolist() == labels
             and np.round(ds.images.reshape(-1) * 255).astype(int).tolist() == pixels)
    try:
        load_idx(FIXTURES / "bad-magic-idx3-ubyte", FIXTURES / "four-labels-idx1-ubyte")
        offset = None
    except FormatError as exc:
        offset = exc.offset
    ok = exact and offset == 1
    assert verdict(12, "IDX ingestion", ok, f"byte-loop equal: {exact}, bad magic offset: {offset}", t0)


def test_c13_determinism(verdict, awm_run):
    t0 = time.perf_counter()
    out, first, _ = awm_run
    second = run_experiment(ExperimentConfig(), out_root=out, force=True)
    a = (first / "aggregate.csv").read_bytes()
    b = (second / "aggregate.csv").read_bytes()
    ok = second != first and a == b
    assert verdict(13, "end-to-end determinism", ok, f"aggregate.csv identical ({len(a)} bytes): {a == b}", t0)


def test_default_config_reports_a_removing_awm_row(awm_run):
    _, run, _ = awm_run
    rows = read_csv(run / "aggregate.csv")
    awm = [r for r in rows if r["defense"] == "awm" and r["available"] == ONE_SHOT]
    assert awm and float(awm[0]["removal_rate"]) > 0
    assert removal_success(float(awm[0]["asr_all_mean"]), 10)
