"""Sample containers, the synthetic benchmark generator, and the split /
partition / balancing logic used to assemble calibration and test sets.

Samples are stored column-wise in a :class:`SampleSet` (one array per field)
rather than as a list of objects; :class:`LabeledSample` is the row view.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import (
    BadFractions,
    BadPartitionCount,
    BadSpec,
    EmptyInput,
    SchemaError,
    TooFewSamples,
)
from .numeric import RngStream

IN = "in"
OUT = "out"
OUT_TASK_CLASS = -1
USE_CASES = ("uc1", "uc2", "uc3")
UC1_NOISE_RANGE = (0.5, 1.0)


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray
    task_class: int
    partition_tag: str
    ood_label: str

    def __post_init__(self):
        x = np.asarray(self.input, dtype=np.float64)
        if x.ndim != 1 or not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
            raise ValueError("input must be a finite 1-D vector within [0, 1]")
        if not self.partition_tag:
            raise ValueError("partition_tag must be nonempty")
        if self.ood_label not in (IN, OUT):
            raise ValueError(f"ood_label must be 'in' or 'out', got {self.ood_label!r}")
        object.__setattr__(self, "input", x)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Column-oriented batch of labeled samples.

    ``uid`` identifies a sample across subsets so disjointness of splits can
    be checked; ``is_out`` is the in/out ground truth.
    """

    x: np.ndarray
    task_class: np.ndarray
    partition: np.ndarray
    is_out: np.ndarray
    uid: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("task_class", "partition", "is_out", "uid"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if self.x.ndim != 2:
            raise ValueError("x must be 2-D")
        if n and (not np.all(np.isfinite(self.x)) or self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("inputs must be finite and within [0, 1]")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def labels(self):
        return np.where(self.is_out, OUT, IN)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SampleSet(self.x[idx], self.task_class[idx], self.partition[idx],
                         self.is_out[idx], self.uid[idx])

    def samples(self):
        return [LabeledSample(self.x[i], int(self.task_class[i]), str(self.partition[i]),
                              OUT if self.is_out[i] else IN) for i in range(len(self))]

    @classmethod
    def build(cls, x, task_class, partition, is_out, uid):
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        return cls(
            x=x,
            task_class=np.broadcast_to(np.asarray(task_class, dtype=np.int64), (n,)).copy(),
            partition=np.broadcast_to(np.asarray(partition, dtype=object), (n,)).copy(),
            is_out=np.broadcast_to(np.asarray(is_out, dtype=bool), (n,)).copy(),
            uid=np.asarray(uid, dtype=np.int64),
        )

    @classmethod
    def from_samples(cls, samples, uid_start=0):
        if not samples:
            raise EmptyInput("no samples")
        return cls.build(
            np.vstack([s.input for s in samples]),
            [s.task_class for s in samples],
            [s.partition_tag for s in samples],
            [s.ood_label == OUT for s in samples],
            np.arange(uid_start, uid_start + len(samples)),
        )

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise EmptyInput("nothing to concatenate")
        return cls(
            np.vstack([s.x for s in sets]),
            np.concatenate([s.task_class for s in sets]),
            np.concatenate([s.partition for s in sets]),
            np.concatenate([s.is_out for s in sets]),
            np.concatenate([s.uid for s in sets]),
        )


@dataclass(frozen=True, eq=False)
class Partition:
    name: str
    samples: SampleSet
    use_case: str

    def __post_init__(self):
        if self.use_case not in ("in",) + USE_CASES:
            raise ValueError(f"unknown use case {self.use_case!r}")
        if len(self.samples) == 0:
            raise ValueError(f"partition {self.name!r} is empty")
        expect_out = self.use_case != "in"
        if not np.all(self.samples.is_out == expect_out):
            raise ValueError(f"partition {self.name!r} has samples with the wrong ood label")


@dataclass(frozen=True, eq=False)
class BenchmarkData:
    name: str
    d_tr: SampleSet
    d_val_in: SampleSet
    d_test_in: SampleSet
    out_partitions: dict
    meta: dict = field(default_factory=dict)

    def partitions(self, use_case):
        return self.out_partitions[use_case]

    @property
    def n_classes(self):
        return int(np.unique(self.d_tr.task_class).size)


# -- splitting -------------------------------------------------------------


def split_in_data(samples, fractions, rng):
    """Shuffle and cut ``samples`` into ``(d_tr, d_val_in, d_test_in)``.

    Validation and test get ``floor(fraction * N)`` samples; the remainder
    goes to the training split.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be three positive values summing to 1, got {fractions}")
    n = len(samples)
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples, got {n}")
    n_val = math.floor(fr[1] * n + 1e-9)
    n_test = math.floor(fr[2] * n + 1e-9)
    perm = as_generator(rng).permutation(n)
    n_tr = n - n_val - n_test
    return (samples.subset(perm[:n_tr]),
            samples.subset(perm[n_tr:n_tr + n_val]),
            samples.subset(perm[n_tr + n_val:]))


def assemble_split(partitions, n_val_partitions=3, mode="sample", rng=None, index=None):
    """Assign whole partitions to validation or test.

    ``mode="sample"`` draws ``n_val_partitions`` without replacement;
    ``mode="enumerate"`` puts partition ``index`` in validation and the rest in test.
    Returns ``(val_partitions, test_partitions)``.
    """
    parts = list(partitions)
    if mode == "sample":
        if not 1 <= n_val_partitions < len(parts):
            raise BadPartitionCount(
                f"need 1 <= n_val_partitions < {len(parts)}, got {n_val_partitions}")
        chosen = as_generator(rng).choice(len(parts), size=n_val_partitions, replace=False)
        val_idx = sorted(int(i) for i in chosen)
    elif mode == "enumerate":
        if index is None or not 0 <= index < len(parts) or len(parts) < 2:
            raise BadPartitionCount(f"enumerate index {index} invalid for {len(parts)} partitions")
        val_idx = [index]
    else:
        raise ValueError(f"unknown assemble mode {mode!r}")
    val = [parts[i] for i in val_idx]
    test = [p for i, p in enumerate(parts) if i not in val_idx]
    return val, test


def split_each_partition_half(partitions, rng):
    """Split every partition into two disjoint halves; odd extras go to validation."""
    gen = as_generator(rng)
    val, test = [], []
    for p in partitions:
        n = len(p.samples)
        if n < 2:
            raise TooFewSamples(f"partition {p.name!r} has {n} sample(s)")
        perm = gen.permutation(n)
        cut = (n + 1) // 2
        val.append(Partition(p.name, p.samples.subset(perm[:cut]), p.use_case))
        test.append(Partition(p.name, p.samples.subset(perm[cut:]), p.use_case))
    return val, test


def balance(in_samples, out_samples, rng):
    """Subsample both sets without replacement down to the smaller size."""
    if len(in_samples) == 0 or len(out_samples) == 0:
        raise EmptyInput("both in and out samples are required")
    gen = as_generator(rng)
    m = min(len(in_samples), len(out_samples))
    in_idx = np.sort(gen.choice(len(in_samples), size=m, replace=False))
    out_idx = np.sort(gen.choice(len(out_samples), size=m, replace=False))
    return in_samples.subset(in_idx), out_samples.subset(out_idx)


# -- synthetic benchmark ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic benchmark.

    Every class mean is a shared dark two-level template plus an offset in a
    two-dimensional lattice plane. In-distribution classes sit on the inner
    ring of that plane; held-out classes sit further out along the same
    directions (``held_out_radius`` times the inner radius).
    """

    n_classes: int = 4
    n_held_out: int = 4
    dim: int = 16
    n_per_class: int = 500
    n_per_out_partition: int = 200
    in_fractions: tuple = (0.6, 0.2, 0.2)
    template_levels: tuple = (0.25, 0.5)
    lattice_step: float = 0.1
    held_out_radius: float = 1.5
    blur_window: int = 5
    contrast_factor: float = 0.3
    name: str = "synthetic"

    def validate(self):
        if self.n_classes < 2:
            raise BadSpec("need at least 2 in-distribution classes")
        if self.n_held_out < 1:
            raise BadSpec("need at least 1 held-out class")
        side = math.isqrt(self.dim)
        if self.dim < 4 or side * side != self.dim:
            raise BadSpec(f"dim must be a perfect square >= 4 (image side), got {self.dim}")
        if self.n_per_class < 4 or self.n_per_out_partition < 2:
            raise BadSpec("sample counts too small")
        if not self.lattice_step > 0 or not self.held_out_radius > 0:
            raise BadSpec("lattice_step and held_out_radius must be positive")
        lo, hi = self.template_levels
        if not 0 <= lo < hi <= 1:
            raise BadSpec("template levels must satisfy 0 <= low < high <= 1")
        if self.blur_window < 1 or not 0 <= self.contrast_factor <= 1:
            raise BadSpec("bad corruption strengths")


def blur(x, window=5):
    """Moving-average blur along the flattened pixel axis."""
    if window <= 1:
        return np.array(x, dtype=np.float64, copy=True)
    return uniform_filter1d(np.asarray(x, dtype=np.float64), size=window, axis=-1, mode="nearest")


def reduce_contrast(x, factor=0.3):
    """Affine squash toward 0.5; ``factor=0`` is the identity."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 + (1.0 - factor) * (x - 0.5)


def transpose_image(x):
    x = np.asarray(x, dtype=np.float64)
    side = math.isqrt(x.shape[-1])
    if side * side != x.shape[-1]:
        raise BadSpec(f"dimension {x.shape[-1]} is not a square image")
    return x.reshape(x.shape[:-1] + (side, side)).swapaxes(-1, -2).reshape(x.shape)


def _ring(n, radius):
    ang = np.pi / 4 + 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _template(dim, levels, gen):
    lo, hi = levels
    bright = np.zeros(dim, dtype=bool)
    bright[gen.choice(dim, size=dim // 2, replace=False)] = True
    return np.where(bright, hi, lo)


def _lattice_basis(dim, template, gen):
    # two directions orthonormal to each other, to the constant image and to
    # the template, rescaled to unit RMS per pixel
    fixed = np.stack([np.ones(dim), template - template.mean()], axis=1)
    raw = np.hstack([fixed, gen.standard_normal((dim, 2))])
    q, _ = np.linalg.qr(raw)
    return q[:, 2:] * math.sqrt(dim)


def make_synthetic_benchmark(spec, rng):
    """Generate a benchmark with in-distribution data and three use-case rosters.

    * uc1 (unrelated inputs): uniform noise, flat gray and flat bright
      images, and two bright bimodal mixtures whose support is disjoint
      from the dark in-distribution images;
    * uc2 (badly prepared inputs): fresh in-distribution draws that are
      blurred, contrast-reduced or transposed;
    * uc3 (unseen classes): one partition per held-out class.
    """
    spec.validate()
    gen = as_generator(rng)
    d = spec.dim
    template = _template(d, spec.template_levels, gen)
    basis = _lattice_basis(d, template, gen)
    inner = math.sqrt(2.0)
    in_coords = _ring(spec.n_classes, inner)
    out_coords = _ring(spec.n_held_out, inner * spec.held_out_radius)
    in_means = template + spec.lattice_step * in_coords @ basis.T
    out_means = template + spec.lattice_step * out_coords @ basis.T
    gaps = [np.linalg.norm(a - b) for i, a in enumerate(in_means) for b in in_means[i + 1:]]
    sigma = 0.5 * min(gaps) / math.sqrt(d)

    next_uid = [0]

    def ids(n):
        out = np.arange(next_uid[0], next_uid[0] + n, dtype=np.int64)
        next_uid[0] += n
        return out

    def draw(mean, n):
        return np.clip(mean + sigma * gen.standard_normal((n, d)), 0.0, 1.0)

    n = spec.n_per_class
    x_in = np.vstack([draw(mu, n) for mu in in_means])
    y_in = np.repeat(np.arange(spec.n_classes), n)
    in_set = SampleSet.build(x_in, y_in, "in", False, ids(len(y_in)))
    d_tr, d_val_in, d_test_in = split_in_data(in_set, spec.in_fractions, gen)

    m = spec.n_per_out_partition

    def out_part(name, x, use_case):
        return Partition(name, SampleSet.build(x, OUT_TASK_CLASS, name, True, ids(len(x))), use_case)

    def flat(lo, hi):
        return np.repeat(gen.uniform(lo, hi, (m, 1)), d, axis=1)

    def bimodal(p_top):
        top = gen.random((m, d)) < p_top
        return np.where(top, gen.uniform(0.9, 1.0, (m, d)), gen.uniform(0.6, 0.7, (m, d)))

    uc1 = [
        out_part("uniform_noise", gen.uniform(*UC1_NOISE_RANGE, (m, d)), "uc1"),
        out_part("constant_gray", flat(0.65, 0.8), "uc1"),
        out_part("constant_bright", flat(0.85, 1.0), "uc1"),
        out_part("mixture_sparse", bimodal(0.25), "uc1"),
        out_part("mixture_dense", bimodal(0.75), "uc1"),
    ]

    def fresh_in(count):
        cls = gen.integers(spec.n_classes, size=count)
        return np.clip(in_means[cls] + sigma * gen.standard_normal((count, d)), 0.0, 1.0)

    uc2 = [
        out_part("blur", blur(fresh_in(m), spec.blur_window), "uc2"),
        out_part("low_contrast", reduce_contrast(fresh_in(m), spec.contrast_factor), "uc2"),
        out_part("transposed", transpose_image(fresh_in(m)), "uc2"),
    ]
    uc3 = [out_part(f"held_out_{h}", draw(mu, m), "uc3") for h, mu in enumerate(out_means)]

    meta = {"in_means": in_means, "held_out_means": out_means, "sigma": sigma,
            "template": template, "basis": basis}
    return BenchmarkData(spec.name, d_tr, d_val_in, d_test_in,
                         {"uc1": uc1, "uc2": uc2, "uc3": uc3}, meta)


# -- file formats ----------------------------------------------------------


def _parse_ood(value, where):
    v = value.strip().lower()
    if v not in (IN, OUT):
        raise SchemaError(f"{where}: ood_label must be 'in' or 'out', got {value!r}")
    return v


def _parse_task(value, where):
    try:
        return int(value)
    except ValueError:
        raise SchemaError(f"{where}: task_class must be an integer, got {value!r}") from None


def load_csv(path, partition=None):
    """Read samples from ``f0..f{d-1},task_class,ood_label`` CSV (optional ``partition`` column)."""
    path = Path(path)
    tag_default = partition or path.stem
    try:
        fh = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        if [header[i] for i in feat_cols] != [f"f{j}" for j in range(len(feat_cols))] or not feat_cols:
            raise SchemaError(f"{path}: header must start with f0..f{{d-1}}")
        try:
            t_col, o_col = header.index("task_class"), header.index("ood_label")
        except ValueError:
            raise SchemaError(f"{path}: header needs task_class and ood_label columns") from None
        p_col = header.index("partition") if "partition" in header else None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:row {lineno}"
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{where}: expected {len(header)} fields, got {len(row)}")
            try:
                x = np.array([float(row[i]) for i in feat_cols])
            except ValueError:
                raise SchemaError(f"{where}: non-numeric feature") from None
            if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
                raise SchemaError(f"{where}: features must lie in [0, 1]")
            ood = _parse_ood(row[o_col], where)
            task = _parse_task(row[t_col], where)
            tag = row[p_col].strip() if p_col is not None and row[p_col].strip() else tag_default
            rows.append(LabeledSample(x, task if ood == IN else OUT_TASK_CLASS, tag, ood))
    return SampleSet.from_samples(rows)


def load_raw_u8(path, width, height, labels_path=None, partition=None):
    """Read concatenated 8-bit grayscale records plus an ``index,task_class,ood_label`` sidecar."""
    path = Path(path)
    labels_path = Path(labels_path) if labels_path else path.with_name(path.name + ".labels.csv")
    rec = int(width) * int(height)
    if rec <= 0:
        raise SchemaError("width and height must be positive")
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    if raw.size % rec:
        raise SchemaError(f"{path}: trailing partial record at byte offset {raw.size - raw.size % rec}")
    x = raw.reshape(-1, rec).astype(np.float64) / 255.0
    labels = {}
    try:
        fh = labels_path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IOError(f"cannot read {labels_path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"index", "task_class", "ood_label"} <= set(reader.fieldnames):
            raise SchemaError(f"{labels_path}: header must be index,task_class,ood_label")
        for lineno, row in enumerate(reader, start=2):
            where = f"{labels_path}:row {lineno}"
            idx = _parse_task(row["index"], where)
            labels[idx] = (_parse_task(row["task_class"], where), _parse_ood(row["ood_label"], where))
    tag = partition or path.stem
    samples = []
    for i in range(x.shape[0]):
        if i not in labels:
            raise SchemaError(f"{labels_path}: no label for record {i} (byte offset {i * rec})")
        task, ood = labels[i]
        samples.append(LabeledSample(x[i], task if ood == IN else OUT_TASK_CLASS, tag, ood))
    return SampleSet.from_samples(samples)
