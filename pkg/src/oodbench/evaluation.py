"""Experiment orchestration: train models once per benchmark, then for each
trial assemble calibration/test data, sweep hyperparameters, and score.

A trial follows the protocol

1. pick out-of-distribution partitions for calibration and test (sampled
   for use-case 1, enumerated for use-cases 2 and 3),
2. balance in/out counts in both sets,
3. split the calibration set 80/20,
4. fit every grid point on the 80% and keep the best by balanced accuracy
   on the 20%,
5. report accuracy and AUPRC on the test set plus setup and run times.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .datasets import SampleSet, assemble_split, balance, split_each_partition_half
from .detectors import (
    CLASSIFIER_METHODS,
    METHODS,
    DetectorSpec,
    Models,
    _as_out,
    balanced_accuracy,
    fit,
    is_auxiliary,
    required_autoencoder,
)
from .errors import BadPartitionCount, EmptyInput, SingleClassInput, TooFewValues
from .nnet import AutoencoderSpec, TrainConfig, train_autoencoder, train_classifier
from .numeric import RngStream

log = logging.getLogger(__name__)

DEFAULT_TRIALS = 10
DEFAULT_VAL_PARTITIONS = 3
FIT_FRACTION = 0.8
Z_95 = 1.96

EPS_GRID = (0.0, 0.001, 0.005, 0.01, 0.05)
SWEEP_GRIDS = {
    "odin": {"T": (1.0, 10.0, 100.0, 1000.0), "eps": EPS_GRID},
    "mahalanobis_single": {"eps": EPS_GRID},
    "mahalanobis_multi": {"eps": EPS_GRID},
    "score_svm": {"C": (0.1, 1.0, 10.0)},
}
KNN_GRID = {"k": (1, 4, 8, 16)}
KNN_METHODS = ("image_knn", "feature_knn", "ae_knn")

AUTOENCODER_ARCHS = {
    "ae_mse": AutoencoderSpec(False, "mse"),
    "ae_bce": AutoencoderSpec(False, "bce"),
    "vae_mse": AutoencoderSpec(True, "mse"),
    "vae_bce": AutoencoderSpec(True, "bce"),
}


# -- metrics ---------------------------------------------------------------


def accuracy(predictions, labels):
    pred = _as_out(predictions)
    truth = _as_out(labels)
    if pred.size == 0:
        raise EmptyInput("no predictions")
    if pred.shape != truth.shape:
        raise ValueError("predictions and labels differ in length")
    return int((pred == truth).sum()) / pred.size


def auprc(scores, labels):
    """Average precision with "out" as the positive class.

    Samples with equal scores form one cut point; the result is the sum of
    precision times recall increment over the distinct descending cuts,
    accumulated in rational arithmetic and rounded once.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_out(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D of equal length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClassInput("AUPRC needs both in and out samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.append(np.nonzero(np.diff(s))[0], s.size - 1)
    tp = np.cumsum(y)[ends]
    gained = np.diff(tp, prepend=0)
    total = sum((Fraction(int(g) * int(t), int(e) + 1) for g, t, e in zip(gained, tp, ends) if g),
                Fraction(0))
    return float(total / n_pos)


def _fmean(values):
    return math.fsum(values) / len(values)


def confidence_interval_95(values):
    """``(mean, half_width)`` of a normal-approximation 95% interval."""
    v = [float(x) for x in values]
    if len(v) < 2:
        raise TooFewValues("need at least two values")
    if all(x == v[0] for x in v):
        return v[0], 0.0
    m = _fmean(v)
    var = math.fsum((x - m) ** 2 for x in v) / (len(v) - 1)
    return m, Z_95 * math.sqrt(var) / math.sqrt(len(v))


def measure_timing(fit_closure, score_closure, batch, extra_setup=0.0):
    """Wall-clock ``(setup_time, run_time_per_sample, fitted)``.

    ``fit_closure()`` returns the fitted object handed to ``score_closure``;
    ``extra_setup`` (auxiliary model training) is added to the setup time.
    """
    if len(batch) == 0:
        raise EmptyInput("timing batch is empty")
    t0 = time.perf_counter()
    fitted = fit_closure()
    setup = time.perf_counter() - t0 + extra_setup
    t0 = time.perf_counter()
    score_closure(fitted, batch)
    run = (time.perf_counter() - t0) / len(batch)
    return setup, run, fitted


# -- models ----------------------------------------------------------------


@dataclass
class Workbench:
    """A benchmark plus the networks trained on its D_tr, with their training times."""

    benchmark: object
    models: Models
    train_times: dict = field(default_factory=dict)

    def aux_time(self, method, params=None):
        key = required_autoencoder(method, params)
        return self.train_times.get(key, 0.0) if key else 0.0


def prepare_workbench(benchmark, methods=METHODS, seed=0, train_overrides=None):
    """Train the classifier and every autoencoder ``methods`` need, timing each."""
    root = RngStream(seed).child("models")
    over = dict(train_overrides or {})
    models = Models()
    times = {}
    if any(m in CLASSIFIER_METHODS for m in methods):
        t0 = time.perf_counter()
        models.classifier = train_classifier(benchmark.d_tr, TrainConfig(rng=root.child("classifier"), **over))
        times["classifier"] = time.perf_counter() - t0
        log.info("trained classifier in %.2fs", times["classifier"])
    keys = []
    for m in methods:
        key = required_autoencoder(m)
        if key and key not in keys:
            keys.append(key)
    for key in keys:
        t0 = time.perf_counter()
        models.autoencoders[key] = train_autoencoder(
            benchmark.d_tr, TrainConfig(rng=root.child(key), **over), AUTOENCODER_ARCHS[key])
        times[key] = time.perf_counter() - t0
        log.info("trained %s in %.2fs", key, times[key])
    return Workbench(benchmark, models, times)


# -- trials ----------------------------------------------------------------


def grid_points(method, sweep=True, sweep_knn=False):
    """Hyperparameter points in declared order (a single empty point if not swept)."""
    grid = {}
    if sweep:
        grid.update(SWEEP_GRIDS.get(method, {}))
    if sweep_knn and method in KNN_METHODS:
        grid.update(KNN_GRID)
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass(frozen=True)
class ExperimentSpec:
    method: str
    use_case: str
    workbench: Workbench = field(compare=False, repr=False)
    n_val_partitions: int = DEFAULT_VAL_PARTITIONS
    mode: str | None = None
    n_trials: int = DEFAULT_TRIALS
    sweep: bool = True
    sweep_knn: bool = False
    seed: int = 0
    timing_batch: int = 256
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.use_case not in ("uc1", "uc2", "uc3"):
            raise ValueError(f"unknown use case {self.use_case!r}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if self.resolved_mode not in ("sample", "enumerate", "half"):
            raise ValueError(f"unknown assemble mode {self.mode!r}")

    @property
    def resolved_mode(self):
        if self.mode is not None:
            return self.mode
        return "sample" if self.use_case == "uc1" else "enumerate"

    @property
    def evaluation(self):
        return self.workbench.benchmark.name


@dataclass
class TrialData:
    fit: SampleSet
    hold: SampleSet
    test: SampleSet
    val_partitions: list
    test_partitions: list


@dataclass
class TrialResult:
    evaluation: str
    use_case: str
    method: str
    trial_index: int
    accuracy: float
    auprc: float
    setup_time: float
    run_time_per_sample: float
    params: dict
    val_partitions: list
    test_partitions: list
    audit: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.accuracy <= 1 and 0 <= self.auprc <= 1):
            raise ValueError("metrics out of range")
        if self.setup_time < 0 or self.run_time_per_sample < 0:
            raise ValueError("times must be nonnegative")


def _stratified_split(samples, frac, gen):
    fit_idx, hold_idx = [], []
    for flag in (False, True):
        idx = np.nonzero(samples.is_out == flag)[0]
        idx = idx[gen.permutation(idx.size)]
        n_fit = min(max(1, int(round(frac * idx.size))), idx.size - 1)
        fit_idx.append(idx[:n_fit])
        hold_idx.append(idx[n_fit:])
    return (samples.subset(np.sort(np.concatenate(fit_idx))),
            samples.subset(np.sort(np.concatenate(hold_idx))))


def assemble_trial_data(workbench, use_case, trial_index, seed=0, n_val_partitions=DEFAULT_VAL_PARTITIONS,
                        mode=None):
    """Calibration (80/20) and test sets for one trial.

    Depends only on ``(seed, use_case, trial_index)`` and the assembly
    settings, so every method sees the same data in a given trial.
    """
    bench = workbench.benchmark
    mode = mode or ("sample" if use_case == "uc1" else "enumerate")
    gen = RngStream(seed).child("data", use_case, trial_index).generator()
    parts = bench.partitions(use_case)
    if mode == "half":
        val_parts, test_parts = split_each_partition_half(parts, gen)
    elif mode == "sample":
        val_parts, test_parts = assemble_split(parts, n_val_partitions, "sample", gen)
    else:
        val_parts, test_parts = assemble_split(parts, mode="enumerate", index=trial_index % len(parts))
    val_out = SampleSet.concat(p.samples for p in val_parts)
    test_out = SampleSet.concat(p.samples for p in test_parts)
    val_in, val_out = balance(bench.d_val_in, val_out, gen)
    test_in, test_out = balance(bench.d_test_in, test_out, gen)
    val = SampleSet.concat([val_in, val_out])
    fit_set, hold_set = _stratified_split(val, FIT_FRACTION, gen)
    return TrialData(fit_set, hold_set, SampleSet.concat([test_in, test_out]),
                     [p.name for p in val_parts], [p.name for p in test_parts])


def _audit(data):
    val_uid = np.concatenate([data.fit.uid, data.hold.uid])
    return {
        "n_val_in": int((~data.fit.is_out).sum() + (~data.hold.is_out).sum()),
        "n_val_out": int(data.fit.is_out.sum() + data.hold.is_out.sum()),
        "n_fit": len(data.fit),
        "n_hold": len(data.hold),
        "n_test_in": int((~data.test.is_out).sum()),
        "n_test_out": int(data.test.is_out.sum()),
        "val_test_shared": int(np.intersect1d(val_uid, data.test.uid).size),
    }


def run_trial(spec, trial_index, data=None):
    """Run one trial of ``spec``; ``data`` may be pre-assembled to share it across methods."""
    wb = spec.workbench
    if data is None:
        data = assemble_trial_data(wb, spec.use_case, trial_index, spec.seed,
                                   spec.n_val_partitions, spec.resolved_mode)
    fit_rng = RngStream(spec.seed).child("fit", spec.method, spec.use_case, trial_index)
    points = grid_points(spec.method, spec.sweep, spec.sweep_knn)
    d_tr = wb.benchmark.d_tr

    def sweep():
        best, best_ba, best_params = None, -1.0, None
        for point in points:
            params = {**spec.params, **point}
            det = fit(DetectorSpec(spec.method, params), wb.models, d_tr, data.fit, fit_rng.generator())
            ba = balanced_accuracy(det.predict_out(data.hold.x), data.hold.is_out)
            if ba > best_ba:
                best, best_ba, best_params = det, ba, params
        return best, best_params

    batch = data.test.x[:spec.timing_batch]
    setup, run, (det, params) = measure_timing(
        sweep, lambda fitted, b: fitted[0].score(b), batch,
        extra_setup=wb.aux_time(spec.method, spec.params) if is_auxiliary(spec.method) else 0.0)
    scores = det.score(data.test.x)
    preds = scores > det.threshold
    return TrialResult(
        evaluation=spec.evaluation,
        use_case=spec.use_case,
        method=spec.method,
        trial_index=trial_index,
        accuracy=accuracy(preds, data.test.is_out),
        auprc=auprc(scores, data.test.is_out),
        setup_time=setup,
        run_time_per_sample=run,
        params=det.spec.params,
        val_partitions=data.val_partitions,
        test_partitions=data.test_partitions,
        audit=_audit(data),
    )


def run_experiment(spec):
    return [run_trial(spec, t) for t in range(spec.n_trials)]


def run_grid(workbench, methods, use_cases, n_trials=DEFAULT_TRIALS, seed=0,
             n_val_partitions=DEFAULT_VAL_PARTITIONS, sweep=True, sweep_knn=False, timing_batch=256,
             params=None):
    """All (use case, method) cells; trial data is assembled once and shared by every method.

    ``params`` optionally maps a method name to fixed hyperparameters for it.
    """
    params = params or {}
    results = []
    for uc in use_cases:
        for t in range(n_trials):
            data = assemble_trial_data(workbench, uc, t, seed, n_val_partitions)
            for method in methods:
                spec = ExperimentSpec(method, uc, workbench, n_val_partitions, None, n_trials,
                                      sweep, sweep_knn, seed, timing_batch, dict(params.get(method, {})))
                results.append(run_trial(spec, t, data))
            log.info("%s trial %d/%d done", uc, t + 1, n_trials)
    return results


# -- aggregation -------------------------------------------------------------


@dataclass
class CellSummary:
    evaluation: str
    use_case: str
    method: str
    n_trials: int
    mean_accuracy: float
    ci_accuracy: float
    mean_auprc: float
    ci_auprc: float
    setup_time_s: float
    run_time_per_sample_s: float


@dataclass
class SummaryReport:
    cells: list
    overall: list  # CellSummary rows with evaluation/use_case "all", sorted by accuracy

    def method_order(self):
        return [row.method for row in self.overall]

    def cell(self, use_case, method, evaluation=None):
        for c in self.cells:
            if c.use_case == use_case and c.method == method and evaluation in (None, c.evaluation):
                return c
        raise KeyError((evaluation, use_case, method))


def _mean_ci(values):
    if len(values) == 1:
        return float(values[0]), 0.0
    return confidence_interval_95(values)


def aggregate(results):
    """Per-cell means with 95% CIs, plus unweighted per-method means over cells."""
    results = list(results)
    if not results:
        raise EmptyInput("no trial results")
    groups = {}
    for r in results:
        groups.setdefault((r.evaluation, r.use_case, r.method), []).append(r)
    cells = []
    for (ev, uc, m), rs in groups.items():
        acc, acc_ci = _mean_ci([r.accuracy for r in rs])
        ap, ap_ci = _mean_ci([r.auprc for r in rs])
        cells.append(CellSummary(ev, uc, m, len(rs), acc, acc_ci, ap, ap_ci,
                                 _fmean([r.setup_time for r in rs]),
                                 _fmean([r.run_time_per_sample for r in rs])))
    overall = []
    for m in sorted({c.method for c in cells}):
        mine = [c for c in cells if c.method == m]
        overall.append(CellSummary(
            "all", "all", m, sum(c.n_trials for c in mine),
            _fmean([c.mean_accuracy for c in mine]), 0.0,
            _fmean([c.mean_auprc for c in mine]), 0.0,
            _fmean([c.setup_time_s for c in mine]),
            _fmean([c.run_time_per_sample_s for c in mine])))
    overall.sort(key=lambda c: (-c.mean_accuracy, c.method))
    rank = {c.method: i for i, c in enumerate(overall)}
    cells.sort(key=lambda c: (rank[c.method], c.evaluation, c.use_case))
    return SummaryReport(cells, overall)


def vary_val_breadth(workbench, methods, breadths=(1, 2, 3), n_trials=DEFAULT_TRIALS, seed=0,
                     sweep=True, timing_batch=256, params=None):
    """Re-run the use-case 1 protocol with each number of calibration partitions."""
    n_parts = len(workbench.benchmark.partitions("uc1"))
    reports = {}
    for b in breadths:
        if not 1 <= b < n_parts:
            raise BadPartitionCount(f"breadth {b} needs at least {b + 1} partitions, have {n_parts}")
        res = run_grid(workbench, methods, ["uc1"], n_trials, seed, b, sweep, False, timing_batch, params)
        reports[b] = (aggregate(res), res)
    return reports
