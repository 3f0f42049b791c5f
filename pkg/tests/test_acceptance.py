"""Acceptance criteria, one test each.

Every test records a single ``CRITERION n: PASS|FAIL ...`` line; the lines
are printed in the pytest terminal summary (and directly when this file is
run as a script).
"""
import json
import math
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from _oracles import auprc_exhaustive, balanced_accuracy_at, best_balanced_accuracy, gradient_errors, mahalanobis_dense
from oodbench.datasets import SampleSet, SyntheticSpec, make_synthetic_benchmark
from oodbench.detectors import (
    AUXILIARY_METHODS,
    METHODS,
    DetectorSpec,
    FittedDetector,
    Models,
    calibrate_threshold,
    fit,
)
from oodbench.evaluation import (
    DEFAULT_TRIALS,
    ExperimentSpec,
    Workbench,
    aggregate,
    assemble_trial_data,
    auprc,
    prepare_workbench,
    run_grid,
    vary_val_breadth,
)
from oodbench.cli import mask_timing, parse_config
from oodbench.nnet import ClassifierModel, Mlp, TrainConfig, train_classifier
from oodbench.numeric import RngStream

SEED = 0
REPORT = []


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    REPORT.append(line)
    print(line)
    return ok


def default_benchmark(seed=SEED):
    return make_synthetic_benchmark(SyntheticSpec(), RngStream(seed).child("benchmark"))


@pytest.fixture(scope="module")
def default_run():
    """The full default grid (every method, every use case, 10 trials)."""
    t0 = time.perf_counter()
    bench = default_benchmark()
    wb = prepare_workbench(bench, METHODS, seed=SEED)
    results = run_grid(wb, METHODS, ["uc1", "uc2", "uc3"], DEFAULT_TRIALS, SEED)
    return wb, results, aggregate(results), time.perf_counter() - t0


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    gen = np.random.default_rng(1)
    auprc_bad = calib_bad = 0
    for _ in range(1000):
        n = int(gen.integers(2, 13))
        y = gen.random(n) < gen.uniform(0.2, 0.8)
        if y.all() or not y.any():
            y[0] = not y[0]
        s = np.round(gen.standard_normal(n), int(gen.integers(0, 3)))  # rounding makes ties
        auprc_bad += auprc(s, y) != auprc_exhaustive(s.tolist(), y.tolist())
    for _ in range(1000):
        n = int(gen.integers(2, 21))
        y = np.arange(n) % 2 == 0
        gen.shuffle(y)
        s = np.round(gen.standard_normal(n), int(gen.integers(0, 3)))
        t = calibrate_threshold(s, y)
        calib_bad += balanced_accuracy_at(s.tolist(), y.tolist(), t) != best_balanced_accuracy(s.tolist(), y.tolist())
    max_rel = 0.0
    for case in range(100):
        d, k, n = int(gen.integers(2, 7)), int(gen.integers(1, 4)), int(gen.integers(8, 30))
        clf = ClassifierModel(Mlp([np.eye(d), np.ones((d, 2))], [np.zeros(d), np.zeros(2)]))
        x = gen.uniform(0.0, 1.0, (n, d))
        labels = np.arange(n) % k
        d_tr = SampleSet.build(x, labels, "in", False, np.arange(n))
        d_val = SampleSet.build(gen.random((6, d)), -1, "v", np.arange(6) % 2 == 0, np.arange(6))
        det = fit(DetectorSpec("mahalanobis_single", {"eps": 0.0}), Models(classifier=clf), d_tr, d_val, RngStream(case))
        means = np.array([x[labels == c].mean(0) for c in range(k)])
        scatter = sum(np.outer(v - means[c], v - means[c]) for v, c in zip(x, labels)) / n
        cov = scatter + 1e-6 * np.trace(scatter) / d * np.eye(d)
        q = gen.random((10, d))
        ref = mahalanobis_dense(q, means, cov)
        max_rel = max(max_rel, float(np.max(np.abs(det.score(q) - ref) / np.maximum(1.0, np.abs(ref)))))
    elapsed = time.perf_counter() - t0
    ok = auprc_bad == 0 and calib_bad == 0 and max_rel <= 1e-8 and elapsed < 30
    assert record(1, ok, f"auprc mismatches={auprc_bad}/1000 calibration mismatches={calib_bad}/1000 "
                         f"mahalanobis max rel err={max_rel:.2e} (tol 1e-8) time={elapsed:.1f}s (limit 30s)")


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    errs = [gradient_errors(seed) for seed in range(50)]
    worst = max(e for _, e in errs)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    assert record(2, ok, f"50 networks ({', '.join(sorted({k for k, _ in errs}))}) max rel err={worst:.2e} "
                         f"(tol 1e-4) time={elapsed:.1f}s (limit 60s)")


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_odin_reduction():
    bench = default_benchmark()
    clf = train_classifier(bench.d_tr, TrainConfig(rng=RngStream(SEED).child("models", "classifier")))
    models = Models(classifier=clf)
    x = np.random.default_rng(3).random((1000, bench.d_tr.dim))
    odin = FittedDetector(DetectorSpec("odin", {"T": 1.0, "eps": 0.0}), {}, 0.0, models)
    prob = FittedDetector(DetectorSpec("prob_threshold"), {}, 0.0, models)
    diff = float(np.max(np.abs(odin.score(x) - prob.score(x))))
    assert record(3, diff <= 1e-12, f"max |odin - prob_threshold| over 1000 inputs={diff:.1e} (tol 1e-12)")


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_difficulty_ordering(default_run):
    _, _, report, elapsed = default_run
    acc = {(c.use_case, c.method): c.mean_accuracy for c in report.cells}
    uc1_worst = min(METHODS, key=lambda m: acc["uc1", m])
    a = all(acc["uc1", m] >= 0.90 for m in METHODS)
    uc2_good = [m for m in METHODS if acc["uc2", m] >= 0.75]
    b = len(uc2_good) >= 3
    c = acc["uc3", "reconst_ae_mse"] <= 0.65 and acc["uc3", "prob_threshold"] <= 0.65
    ok = a and b and c and elapsed < 600
    assert record(4, ok,
                  f"(a) min uc1 acc={acc['uc1', uc1_worst]:.3f} [{uc1_worst}] (>=0.90) "
                  f"(b) {len(uc2_good)} methods with uc2 acc>=0.75 (need 3) "
                  f"(c) uc3 reconst_ae_mse={acc['uc3', 'reconst_ae_mse']:.3f} "
                  f"prob_threshold={acc['uc3', 'prob_threshold']:.3f} (<=0.65) "
                  f"time={elapsed:.0f}s (limit 600s)")


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_protocol_audit(default_run):
    wb = Workbench(default_benchmark(), Models())
    problems = []
    for t in range(100):
        uc = ("uc1", "uc2", "uc3", "uc1")[t % 4]
        data = assemble_trial_data(wb, uc, t, seed=1000 + t)
        n_val_in = int((~data.fit.is_out).sum() + (~data.hold.is_out).sum())
        n_val_out = int(data.fit.is_out.sum() + data.hold.is_out.sum())
        n_val = n_val_in + n_val_out
        if n_val_in != n_val_out:
            problems.append(f"trial {t}: d_val unbalanced")
        if int(data.test.is_out.sum()) != int((~data.test.is_out).sum()):
            problems.append(f"trial {t}: d_test unbalanced")
        if abs(len(data.fit) - 0.8 * n_val) > 1 or abs(len(data.hold) - 0.2 * n_val) > 1:
            problems.append(f"trial {t}: 80/20 sizes {len(data.fit)}/{len(data.hold)}")
        if set(np.concatenate([data.fit.uid, data.hold.uid])) & set(data.test.uid):
            problems.append(f"trial {t}: sample shared between d_val and d_test")
        if uc == "uc1" and (len(data.val_partitions) != 3 or set(data.val_partitions) & set(data.test_partitions)):
            problems.append(f"trial {t}: uc1 partitions {data.val_partitions}")
    _, results, _, _ = default_run
    counts = {}
    for r in results:
        counts[(r.use_case, r.method)] = counts.get((r.use_case, r.method), 0) + 1
    spec_default = ExperimentSpec("prob_threshold", "uc1", wb).n_trials
    cli_default = parse_config().trials
    if set(counts.values()) != {10} or spec_default != 10 or cli_default != 10:
        problems.append(f"trials per cell {sorted(set(counts.values()))}, defaults {spec_default}/{cli_default}")
    assert record(5, not problems, f"100 audited trials, {len(problems)} violations"
                                   + (f": {problems[:3]}" if problems else "; 10 trials per cell by default"))


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_cli_determinism(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 11, "trials": 2, "use_cases": [1, 2, 3]}), encoding="utf-8")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "oodbench", "--config", str(cfg), "--out", str(out)],
                              capture_output=True, text=True, timeout=600)
        assert proc.returncode == 0, proc.stderr
        outs.append(json.loads((out / "summary.json").read_text(encoding="utf-8")))
    same = mask_timing(outs[0]) == mask_timing(outs[1])
    assert record(6, same, f"two CLI runs (13 methods, 3 use cases, seed 11) masked summary.json "
                           f"{'identical' if same else 'DIFFER'}")


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_val_breadth():
    by_breadth = {1: [], 3: []}
    for seed in range(10):
        bench = default_benchmark(seed)
        wb = prepare_workbench(bench, ["binary_classifier"], seed=seed)
        reports = vary_val_breadth(wb, ["binary_classifier"], (1, 3), n_trials=10, seed=seed)
        for b in (1, 3):
            by_breadth[b].append(reports[b][0].cell("uc1", "binary_classifier").mean_accuracy)
    m1, m3 = statistics.median(by_breadth[1]), statistics.median(by_breadth[3])
    assert record(7, m3 >= m1, f"binary_classifier median uc1 acc over 10 seeds: breadth 1={m1:.3f} "
                               f"breadth 3={m3:.3f} (need breadth 3 >= breadth 1)")


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_timing(default_run):
    _, _, report, _ = default_run
    setup = {(c.use_case, c.method): c.setup_time_s for c in report.cells}
    slow = [(uc, m) for uc in ("uc1", "uc2", "uc3") for m in AUXILIARY_METHODS
            if not setup[uc, m] > setup[uc, "prob_threshold"]]
    bad_run = [c.method for c in report.cells
               if not (math.isfinite(c.run_time_per_sample_s) and c.run_time_per_sample_s > 0)]
    ok = not slow and not bad_run
    worst = min(setup[uc, m] / setup[uc, "prob_threshold"] for uc in ("uc1", "uc2", "uc3") for m in AUXILIARY_METHODS)
    assert record(8, ok, f"auxiliary setup > prob_threshold setup in all {3 * len(AUXILIARY_METHODS)} cells "
                         f"(min ratio {worst:.1f}x), violations={slow}; non-positive run times={bad_run}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
