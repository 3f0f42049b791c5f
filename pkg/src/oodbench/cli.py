"""Command-line entry point.

A run is described by a flat JSON object; command-line flags override the
file. The run trains the shared models once, executes every
(use case, method) cell for the requested number of trials, and writes

- ``summary.csv`` / ``summary.json``: per-cell means with 95% CIs plus the
  per-method overall rows, sorted by overall accuracy,
- ``trials.csv``: one row per trial with the chosen hyperparameters,
- ``timing.csv``: per-trial setup and run times.

Example::

    oodbench --seed 1 --methods prob_threshold,odin --use-cases 1,3 --trials 5 --out results/
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datasets import (
    USE_CASES,
    BenchmarkData,
    Partition,
    SyntheticSpec,
    load_csv,
    make_synthetic_benchmark,
    split_in_data,
)
from .detectors import METHODS
from .errors import ConfigError, OodBenchError
from .evaluation import aggregate, prepare_workbench, run_grid
from .numeric import RngStream

log = logging.getLogger("oodbench")

SUMMARY_COLUMNS = ("evaluation", "use_case", "method", "mean_accuracy", "ci_accuracy",
                   "mean_auprc", "ci_auprc", "setup_time_s", "run_time_per_sample_s")
TRIAL_COLUMNS = ("evaluation", "use_case", "method", "trial_index", "accuracy", "auprc",
                 "setup_time_s", "run_time_per_sample_s", "params", "val_partitions",
                 "test_partitions")
TIMING_COLUMNS = ("evaluation", "use_case", "method", "trial_index", "setup_time_s",
                  "run_time_per_sample_s")
TIMING_FIELDS = ("setup_time_s", "run_time_per_sample_s", "train_times_s")

KNN_METHODS = ("image_knn", "feature_knn", "ae_knn")
SYNTHETIC_KEYS = ("n_classes", "n_held_out", "dim", "n_per_class", "n_per_out_partition",
                  "blur_window", "contrast_factor", "held_out_radius", "lattice_step")


@dataclass
class RunConfig:
    seed: int = 0
    methods: tuple = METHODS
    use_cases: tuple = USE_CASES
    trials: int = 10
    val_breadth: int = 3
    sweep: bool = True
    sweep_knn: bool = False
    k: int = 8
    timing_batch: int = 256
    epochs: int = 50
    out: str = "oodbench-out"
    benchmark: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    in_csv: str | None = None
    in_fractions: tuple = (0.6, 0.2, 0.2)
    uc1_csv: tuple = ()
    uc2_csv: tuple = ()
    uc3_csv: tuple = ()

    def echo(self):
        """The config as JSON-ready data, without the output location."""
        d = asdict(self)
        d.pop("out")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- parsing -----------------------------------------------------------------


def _int(key, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, str) and v.strip().lstrip("-").isdigit():
            v = int(v)
        else:
            raise ConfigError(key, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be at least {lo}, got {v}")
    return v


def _bool(key, v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
        return v.lower() in ("true", "1", "yes")
    raise ConfigError(key, f"expected a boolean, got {v!r}")


def _list(key, v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    if isinstance(v, (list, tuple)):
        return list(v)
    raise ConfigError(key, f"expected a list or comma-separated string, got {v!r}")


def _methods(v):
    out = []
    for m in _list("methods", v):
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if m not in out:
            out.append(m)
    if not out:
        raise ConfigError("methods", "no methods given")
    return tuple(out)


def _use_cases(v):
    out = []
    for u in _list("use_cases", v):
        name = f"uc{u}" if isinstance(u, int) or str(u).isdigit() else str(u)
        if name not in USE_CASES:
            raise ConfigError("use_cases", f"unknown use case {u!r}; choose from 1, 2, 3")
        if name not in out:
            out.append(name)
    if not out:
        raise ConfigError("use_cases", "no use cases given")
    return tuple(out)


def _paths(key, v):
    if v is None:
        return ()
    return tuple(str(p) for p in _list(key, v))


def _check_synthetic(synthetic):
    # blame the first key that is invalid on its own, else the combination
    for key, v in synthetic.items():
        try:
            SyntheticSpec(**{key: v}).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, str(exc)) from None
    try:
        SyntheticSpec(**synthetic).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(",".join(synthetic), str(exc)) from None


def build_config(values):
    """Validate a flat mapping of settings and fill defaults."""
    if not isinstance(values, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = RunConfig()
    synthetic = {}
    for key, v in values.items():
        if key in SYNTHETIC_KEYS:
            synthetic[key] = v
        elif key == "seed":
            cfg.seed = _int(key, v, 0)
        elif key == "methods":
            cfg.methods = _methods(v)
        elif key == "use_cases":
            cfg.use_cases = _use_cases(v)
        elif key in ("trials", "k", "timing_batch", "epochs", "val_breadth"):
            setattr(cfg, key, _int(key, v, 1))
        elif key in ("sweep", "sweep_knn"):
            setattr(cfg, key, _bool(key, v))
        elif key == "out":
            if not isinstance(v, str) or not v:
                raise ConfigError(key, "expected a directory path")
            cfg.out = v
        elif key == "benchmark":
            if v not in ("synthetic", "csv"):
                raise ConfigError(key, f"expected 'synthetic' or 'csv', got {v!r}")
            cfg.benchmark = v
        elif key == "in_csv":
            cfg.in_csv = None if v is None else str(v)
        elif key == "in_fractions":
            fr = _list(key, v)
            try:
                cfg.in_fractions = tuple(float(f) for f in fr)
            except (TypeError, ValueError):
                raise ConfigError(key, f"expected three numbers, got {v!r}") from None
            if len(cfg.in_fractions) != 3:
                raise ConfigError(key, f"expected three numbers, got {v!r}")
        elif key in ("uc1_csv", "uc2_csv", "uc3_csv"):
            setattr(cfg, key, _paths(key, v))
        else:
            raise ConfigError(key, "unknown setting")
    if synthetic:
        _check_synthetic(synthetic)
    cfg.synthetic = synthetic
    if cfg.benchmark == "csv":
        if not cfg.in_csv:
            raise ConfigError("in_csv", "required when benchmark is 'csv'")
        for uc in cfg.use_cases:
            if not getattr(cfg, f"{uc}_csv"):
                raise ConfigError(f"{uc}_csv", f"required for use case {uc}")
    return cfg


def parse_config(path=None, overrides=None):
    """Read the JSON file at ``path`` (if any) and apply ``overrides`` on top."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            values = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        for key, v in values.items():
            if isinstance(v, dict):
                raise ConfigError(key, "nested objects are not allowed; use flat keys")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


# -- benchmark ---------------------------------------------------------------


def _load_partitions(paths, use_case):
    parts = []
    for p in paths:
        samples = load_csv(p)
        for name in dict.fromkeys(samples.partition.tolist()):
            mask = samples.partition == name
            parts.append(Partition(str(name), samples.subset(mask.nonzero()[0]), use_case))
    return parts


def build_benchmark(cfg):
    root = RngStream(cfg.seed).child("benchmark")
    if cfg.benchmark == "synthetic":
        return make_synthetic_benchmark(SyntheticSpec(**cfg.synthetic), root)
    in_samples = load_csv(cfg.in_csv)
    if in_samples.is_out.any():
        raise ConfigError("in_csv", "in-distribution file contains samples labelled 'out'")
    d_tr, d_val, d_test = split_in_data(in_samples, cfg.in_fractions, root.child("split"))
    out = {uc: _load_partitions(getattr(cfg, f"{uc}_csv"), uc) for uc in USE_CASES}
    return BenchmarkData(Path(cfg.in_csv).stem, d_tr, d_val, d_test, out)


# -- reports -----------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def render_reports(cfg, report, results, train_times):
    summary_rows = [[c.evaluation, c.use_case, c.method, _fmt(c.mean_accuracy), _fmt(c.ci_accuracy),
                     _fmt(c.mean_auprc), _fmt(c.ci_auprc), _fmt(c.setup_time_s),
                     _fmt(c.run_time_per_sample_s)]
                    for c in report.overall + report.cells]
    trial_rows = [[r.evaluation, r.use_case, r.method, r.trial_index, _fmt(r.accuracy), _fmt(r.auprc),
                   _fmt(r.setup_time), _fmt(r.run_time_per_sample), json.dumps(r.params, sort_keys=True),
                   ";".join(r.val_partitions), ";".join(r.test_partitions)] for r in results]
    timing_rows = [[r.evaluation, r.use_case, r.method, r.trial_index, _fmt(r.setup_time),
                    _fmt(r.run_time_per_sample)] for r in results]
    summary = {
        "config": cfg.echo(),
        "method_order": report.method_order(),
        "overall": [_row_dict(c) for c in report.overall],
        "cells": [_row_dict(c) for c in report.cells],
        "train_times_s": dict(sorted(train_times.items())),
    }
    return {
        "summary.csv": _csv_text(SUMMARY_COLUMNS, summary_rows),
        "summary.json": json.dumps(summary, indent=2, sort_keys=False) + "\n",
        "trials.csv": _csv_text(TRIAL_COLUMNS, trial_rows),
        "timing.csv": _csv_text(TIMING_COLUMNS, timing_rows),
    }


def _row_dict(c):
    return {f.name: getattr(c, f.name) for f in fields(c)}


def mask_timing(obj):
    """Copy of parsed ``summary.json`` data with every timing field replaced by None."""
    if isinstance(obj, dict):
        return {k: (None if k in TIMING_FIELDS else mask_timing(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [mask_timing(v) for v in obj]
    return obj


def write_outputs(out_dir, files):
    """Write every file to a temporary name first, then rename them all into place."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            staged.append((tmp, out_dir / name))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


# -- driver ------------------------------------------------------------------


def execute(cfg):
    """Run the configured experiment; returns ``(report, results, train_times)``."""
    bench = build_benchmark(cfg)
    log.info("benchmark %s: %d training samples", bench.name, len(bench.d_tr))
    wb = prepare_workbench(bench, cfg.methods, cfg.seed, {"epochs": cfg.epochs})
    params = {m: {"k": cfg.k} for m in cfg.methods if m in KNN_METHODS}
    results = run_grid(wb, cfg.methods, cfg.use_cases, cfg.trials, cfg.seed, cfg.val_breadth,
                       cfg.sweep, cfg.sweep_knn, cfg.timing_batch, params)
    return aggregate(results), results, wb.train_times


def run(cfg):
    """Execute ``cfg`` and write the four report files; returns a process exit code."""
    try:
        report, results, train_times = execute(cfg)
        write_outputs(cfg.out, render_reports(cfg, report, results, train_times))
    except ConfigError as exc:
        print(f"oodbench: configuration error: {exc}", file=sys.stderr)
        return 2
    except (OodBenchError, OSError, ValueError, RuntimeError) as exc:
        print(f"oodbench: run failed: {exc}", file=sys.stderr)
        return 1
    log.info("wrote reports to %s", cfg.out)
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="oodbench", description="Out-of-distribution detection benchmark")
    p.add_argument("--config", metavar="PATH", help="flat JSON config file")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--methods", metavar="a,b,c", help="comma-separated method names")
    p.add_argument("--use-cases", dest="use_cases", metavar="1,2,3")
    p.add_argument("--trials", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--val-breadth", dest="val_breadth", type=int, metavar="N",
                   help="number of use-case 1 partitions used for calibration")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    log.setLevel(logging.INFO)
    overrides = {k: getattr(args, k) for k in ("seed", "methods", "use_cases", "trials", "out", "val_breadth")}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"oodbench: configuration error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
