import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oodbench.datasets import (
    OUT_TASK_CLASS,
    LabeledSample,
    Partition,
    SampleSet,
    SyntheticSpec,
    assemble_split,
    balance,
    blur,
    load_csv,
    load_raw_u8,
    make_synthetic_benchmark,
    reduce_contrast,
    split_each_partition_half,
    split_in_data,
    transpose_image,
)
from oodbench.errors import (
    BadFractions,
    BadPartitionCount,
    BadSpec,
    EmptyInput,
    SchemaError,
    TooFewSamples,
)
from oodbench.numeric import RngStream


def make_set(n, out=False, dim=3, start=0, tag="p"):
    gen = np.random.default_rng(start + n)
    return SampleSet.build(gen.random((n, dim)), OUT_TASK_CLASS if out else 0, tag, out,
                           np.arange(start, start + n))


def make_parts(count, size=10):
    return [Partition(f"p{i}", make_set(size, True, start=100 * i, tag=f"p{i}"), "uc1")
            for i in range(count)]


# -- containers --------------------------------------------------------------


def test_labeled_sample_validation():
    LabeledSample([0.0, 1.0], 1, "a", "in")
    with pytest.raises(ValueError):
        LabeledSample([1.5], 1, "a", "in")
    with pytest.raises(ValueError):
        LabeledSample([0.5], 1, "", "in")
    with pytest.raises(ValueError):
        LabeledSample([0.5], 1, "a", "maybe")


def test_partition_label_consistency():
    with pytest.raises(ValueError):
        Partition("bad", make_set(3, out=False), "uc1")
    with pytest.raises(ValueError):
        Partition("bad", make_set(3, out=True), "in")


def test_sample_roundtrip():
    s = make_set(5)
    back = SampleSet.from_samples(s.samples())
    assert np.array_equal(back.x, s.x)
    assert list(back.labels) == ["in"] * 5


# -- split_in_data -----------------------------------------------------------


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (101, (81, 10, 10))])
def test_split_sizes(n, sizes):
    parts = split_in_data(make_set(n), (0.8, 0.1, 0.1), RngStream(0))
    assert tuple(len(p) for p in parts) == sizes


def test_split_disjoint_cover():
    s = make_set(57)
    parts = split_in_data(s, (0.5, 0.3, 0.2), RngStream(1))
    uids = np.concatenate([p.uid for p in parts])
    assert sorted(uids.tolist()) == sorted(s.uid.tolist())


def test_split_determinism():
    s = make_set(50)
    a = split_in_data(s, (0.6, 0.2, 0.2), RngStream(3))
    b = split_in_data(s, (0.6, 0.2, 0.2), RngStream(3))
    c = split_in_data(s, (0.6, 0.2, 0.2), RngStream(4))
    assert all(np.array_equal(x.uid, y.uid) for x, y in zip(a, b))
    assert not np.array_equal(a[0].uid, c[0].uid)


def test_split_errors():
    with pytest.raises(BadFractions):
        split_in_data(make_set(20), (0.5, 0.2, 0.2), RngStream(0))
    with pytest.raises(BadFractions):
        split_in_data(make_set(20), (1.0, 0.0, 0.0), RngStream(0))
    with pytest.raises(TooFewSamples):
        split_in_data(make_set(9), (0.6, 0.2, 0.2), RngStream(0))


# -- assemble_split ----------------------------------------------------------


def test_assemble_sample_14():
    val, test = assemble_split(make_parts(14, 2), 3, "sample", RngStream(0))
    assert len(val) == 3 and len(test) == 11
    assert not {p.name for p in val} & {p.name for p in test}


def test_assemble_enumerate():
    parts = make_parts(4, 2)
    val, test = assemble_split(parts, mode="enumerate", index=2)
    assert [p.name for p in val] == ["p2"]
    assert [p.name for p in test] == ["p0", "p1", "p3"]


def test_assemble_errors():
    with pytest.raises(BadPartitionCount):
        assemble_split(make_parts(3, 2), 3, "sample", RngStream(0))
    with pytest.raises(BadPartitionCount):
        assemble_split(make_parts(3, 2), 0, "sample", RngStream(0))
    with pytest.raises(BadPartitionCount):
        assemble_split(make_parts(3, 2), mode="enumerate", index=3)


@given(st.integers(2, 14), st.data())
def test_assemble_partitions_cover(n, data):
    k = data.draw(st.integers(1, n - 1))
    seed = data.draw(st.integers(0, 2**32 - 1))
    parts = make_parts(n, 2)
    val, test = assemble_split(parts, k, "sample", RngStream(seed))
    names = [p.name for p in val] + [p.name for p in test]
    assert len(val) == k and sorted(names) == sorted(p.name for p in parts)


# -- halves / balance --------------------------------------------------------


@pytest.mark.parametrize("n,sizes", [(10, (5, 5)), (11, (6, 5))])
def test_half_split(n, sizes):
    val, test = split_each_partition_half(make_parts(1, n), RngStream(0))
    assert (len(val[0].samples), len(test[0].samples)) == sizes
    assert not set(val[0].samples.uid) & set(test[0].samples.uid)


def test_half_split_deterministic_and_guarded():
    a = split_each_partition_half(make_parts(2, 9), RngStream(5))
    b = split_each_partition_half(make_parts(2, 9), RngStream(5))
    assert np.array_equal(a[0][1].samples.uid, b[0][1].samples.uid)
    with pytest.raises(TooFewSamples):
        split_each_partition_half(make_parts(1, 1), RngStream(0))


def test_balance_min_rule():
    i, o = balance(make_set(200), make_set(50, True, start=1000), RngStream(0))
    assert len(i) == len(o) == 50


def test_balance_already_balanced():
    a, b = make_set(30), make_set(30, True, start=1000)
    i, o = balance(a, b, RngStream(0))
    assert set(i.uid) == set(a.uid) and set(o.uid) == set(b.uid)


def test_balance_empty():
    with pytest.raises(EmptyInput):
        balance(make_set(3), make_set(0, True), RngStream(0))


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_balance_property(n_in, n_out, seed):
    i, o = balance(make_set(n_in), make_set(n_out, True, start=1000), RngStream(seed))
    assert len(i) == len(o) == min(n_in, n_out)
    assert len(set(i.uid)) == len(i)


# -- corruptions -------------------------------------------------------------


def test_contrast_zero_is_identity():
    x = np.random.default_rng(0).random((4, 16))
    assert np.array_equal(reduce_contrast(x, 0.0), x)


def test_contrast_squashes_toward_half():
    assert np.allclose(reduce_contrast(np.array([0.0, 1.0]), 0.3), [0.15, 0.85])


def test_blur_and_transpose():
    x = np.arange(16, dtype=float) / 15
    assert np.array_equal(blur(x, 1), x)
    b = blur(x, 3)
    assert b[5] == pytest.approx((x[4] + x[5] + x[6]) / 3)
    t = transpose_image(x)
    assert np.array_equal(t.reshape(4, 4), x.reshape(4, 4).T)
    assert np.array_equal(transpose_image(t), x)


def test_corruptions_reproducible():
    x = np.random.default_rng(0).random((3, 16))
    assert np.array_equal(blur(x, 5), blur(x.copy(), 5))
    assert not np.array_equal(blur(blur(x, 5), 5), blur(x, 5))


# -- synthetic benchmark -----------------------------------------------------


def test_synthetic_structure(small_bench):
    b = small_bench
    assert len(b.partitions("uc3")) == 4
    assert len(b.partitions("uc1")) == 5
    assert [p.name for p in b.partitions("uc2")] == ["blur", "low_contrast", "transposed"]
    uids = [b.d_tr.uid, b.d_val_in.uid, b.d_test_in.uid]
    uids += [p.samples.uid for uc in ("uc1", "uc2", "uc3") for p in b.partitions(uc)]
    allu = np.concatenate(uids)
    assert len(set(allu.tolist())) == allu.size
    assert set(np.unique(b.d_tr.task_class)) == {0, 1, 2, 3}
    for uc in ("uc1", "uc2", "uc3"):
        for p in b.partitions(uc):
            assert p.samples.is_out.all()
            assert 0 <= p.samples.x.min() and p.samples.x.max() <= 1
            assert (p.samples.task_class == OUT_TASK_CLASS).all()


def test_synthetic_reproducible():
    spec = SyntheticSpec(n_per_class=20, n_per_out_partition=10)
    a = make_synthetic_benchmark(spec, RngStream(2))
    b = make_synthetic_benchmark(spec, RngStream(2))
    assert np.array_equal(a.d_tr.x, b.d_tr.x)
    for uc in ("uc1", "uc2", "uc3"):
        for pa, pb in zip(a.partitions(uc), b.partitions(uc)):
            assert np.array_equal(pa.samples.x, pb.samples.x)


def test_uc3_closer_to_centroids_than_uc1():
    spec = SyntheticSpec(n_per_class=50, n_per_out_partition=500)
    b = make_synthetic_benchmark(spec, RngStream(11))
    means = b.meta["in_means"]

    def nearest(x):
        return np.min(np.linalg.norm(x[:, None, :] - means[None], axis=2), axis=1)

    uc3 = b.partitions("uc3")[0].samples.x
    noise = next(p for p in b.partitions("uc1") if p.name == "uniform_noise").samples.x
    assert np.median(nearest(uc3)) < np.median(nearest(noise))


@pytest.mark.parametrize("kw", [{"n_classes": 1}, {"n_held_out": 0}, {"dim": 15},
                                {"n_per_class": 1}, {"contrast_factor": 1.5}])
def test_synthetic_bad_spec(kw):
    with pytest.raises(BadSpec):
        make_synthetic_benchmark(SyntheticSpec(**kw), RngStream(0))


# -- file formats ------------------------------------------------------------


def test_load_csv_echo(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("f0,f1,task_class,partition,ood_label\n0.5,0.25,1,classA,in\n", encoding="utf-8")
    s = load_csv(p)
    assert np.array_equal(s.x[0], [0.5, 0.25])
    assert s.task_class[0] == 1 and s.partition[0] == "classA" and not s.is_out[0]


def test_load_csv_crlf_without_partition(tmp_path):
    p = tmp_path / "noise.csv"
    p.write_bytes(b"f0,task_class,ood_label\r\n0.1,0,out\r\n0.9,0,out\r\n")
    s = load_csv(p)
    assert len(s) == 2 and s.is_out.all() and s.partition[0] == "noise"


@pytest.mark.parametrize("body,needle", [
    ("f0,task_class,ood_label\n0.1,0,in\nx,0,in\n", "row 3"),
    ("f0,task_class,ood_label\n0.1,0,in\n1.5,0,in\n", "row 3"),
    ("f0,task_class,ood_label\n0.1,0,unknown\n", "row 2"),
    ("f0,task_class,ood_label\n0.1,0\n", "row 2"),
    ("g0,task_class,ood_label\n0.1,0,in\n", "header"),
])
def test_load_csv_schema_errors(tmp_path, body, needle):
    p = tmp_path / "bad.csv"
    p.write_text(body, encoding="utf-8")
    with pytest.raises(SchemaError, match=needle):
        load_csv(p)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_csv(tmp_path / "nope.csv")


def test_load_raw_u8(tmp_path):
    p = tmp_path / "img.raw"
    p.write_bytes(bytes([0, 255, 128, 64, 255, 0, 1, 2]))
    (tmp_path / "img.raw.labels.csv").write_text(
        "index,task_class,ood_label\n0,3,in\n1,0,out\n", encoding="utf-8")
    s = load_raw_u8(p, 2, 2)
    assert s.x.shape == (2, 4)
    assert s.x[0, 0] == 0.0 and s.x[0, 1] == 1.0
    assert s.task_class.tolist() == [3, OUT_TASK_CLASS]
    assert s.is_out.tolist() == [False, True]


def test_load_raw_u8_errors(tmp_path):
    p = tmp_path / "img.raw"
    p.write_bytes(bytes(5))
    (tmp_path / "img.raw.labels.csv").write_text("index,task_class,ood_label\n0,0,in\n")
    with pytest.raises(SchemaError, match="byte offset 4"):
        load_raw_u8(p, 2, 2)
    p.write_bytes(bytes(8))
    with pytest.raises(SchemaError, match="record 1"):
        load_raw_u8(p, 2, 2)
