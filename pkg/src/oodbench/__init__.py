"""Out-of-distribution detection benchmark toolkit.

Modules:

- ``numeric``: seeded random streams, Cholesky solves, softmax, k-NN, tied covariance
- ``datasets``: sample containers, split assembly, synthetic benchmark, CSV/raw loaders
- ``nnet``: numpy MLP classifier and (variational) autoencoder with training
- ``detectors``: the detector roster, threshold calibration, persistence
- ``evaluation``: trials, sweeps, metrics, timing and aggregation
- ``cli``: command-line driver
"""
from .datasets import BenchmarkData, SampleSet, SyntheticSpec, make_synthetic_benchmark
from .detectors import METHODS, DetectorSpec, FittedDetector, calibrate_threshold, fit
from .evaluation import aggregate, auprc, prepare_workbench, run_grid, run_trial
from .numeric import RngStream

__version__ = "0.1.0"

__all__ = [
    "BenchmarkData", "SampleSet", "SyntheticSpec", "make_synthetic_benchmark",
    "METHODS", "DetectorSpec", "FittedDetector", "calibrate_threshold", "fit",
    "aggregate", "auprc", "prepare_workbench", "run_grid", "run_trial",
    "RngStream",
]
