import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltcmh.dataset import (LongTailSpec, MultiModalDataset, build_affinity,
                           load_csv, load_dataset, primary_labels,
                           save_dataset, split_head_tail,
                           split_query_retrieval, synthesize_long_tailed,
                           trim_labels)
from ltcmh.errors import ConfigError, FormatError, ShapeError

label_matrices = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 6)),
                        elements=st.integers(0, 1)).filter(
                            lambda m: bool(np.all(m.sum(axis=1) >= 1)))


# --- synthesis ------------------------------------------------------------------

def test_synthesize_single_class():
    data = synthesize_long_tailed(LongTailSpec(groups=[(1, 5)], d_x=4, d_y=3),
                                  seed=0)
    assert data.n == 5
    assert data.num_classes == 1
    assert np.all(data.labels == 1)
    assert np.all(build_affinity(data.labels, data.labels) == 1)


def test_synthesize_flickr_shape():
    spec = LongTailSpec(groups=[(4, 2000), (10, 200), (10, 50)], d_x=8, d_y=6)
    data = synthesize_long_tailed(spec, seed=0)
    assert data.n == 10500
    assert data.num_classes == 24


def test_synthesize_deterministic(tiny_dataset):
    from conftest import tiny_spec
    again = synthesize_long_tailed(tiny_spec(), seed=0)
    assert np.array_equal(tiny_dataset.X, again.X)
    assert np.array_equal(tiny_dataset.Y, again.Y)
    assert np.array_equal(tiny_dataset.labels, again.labels)


def test_synthesize_class_label_counts():
    from conftest import tiny_spec
    spec = tiny_spec()
    data = synthesize_long_tailed(spec, seed=3)
    expect = spec.class_counts() + spec.extra_per_class
    assert data.n == int(expect.sum())
    # every class-k sample carries label k, so column sums dominate the
    # planted per-class counts
    assert np.all(data.labels.sum(axis=0) >= expect)


def test_synthesize_modalities_share_class_structure():
    # class centroids in X-space must be farther apart than within-class spread
    spec = LongTailSpec(groups=[(2, 50)], d_x=16, d_y=12, noise_std=0.2,
                        mixed_fraction=0.0)
    data = synthesize_long_tailed(spec, seed=1)
    prim = primary_labels(data.labels)
    c0, c1 = data.X[prim == 0].mean(0), data.X[prim == 1].mean(0)
    within = np.linalg.norm(data.X[prim == 0] - c0, axis=1).mean()
    assert np.linalg.norm(c0 - c1) > within


def test_spec_rejects_unsorted_groups():
    with pytest.raises(ConfigError):
        LongTailSpec(groups=[(2, 5), (2, 50)])


def test_spec_rejects_nonpositive_counts():
    with pytest.raises(ConfigError):
        LongTailSpec(groups=[(2, 0)])


# --- trim_labels -----------------------------------------------------------------

def test_trim_single_label_row_unchanged():
    labels = np.array([[0, 1, 0, 0]], dtype=np.uint8)
    assert np.array_equal(trim_labels(labels), labels)


def test_trim_keeps_globally_rarest_labels():
    # global counts: a=4, b=3, c=2, d=1 -> rarest-first order d, c, b, a
    labels = np.array([
        [1, 1, 1, 1],
        [1, 1, 1, 0],
        [1, 1, 0, 0],
        [1, 0, 0, 0],
    ], dtype=np.uint8)
    out = trim_labels(labels, seed=0)
    row = out[0]
    kept = set(np.flatnonzero(row))
    assert 2 <= len(kept) <= 3
    # the rarest labels (3, then 2) must be kept; label 0 only if 3 kept... and
    # even then label 1 precedes label 0
    assert 3 in kept and 2 in kept
    if len(kept) == 3:
        assert kept == {1, 2, 3}


def test_trim_identity_when_all_rows_small():
    labels = np.array([[1, 1, 0], [0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    assert np.array_equal(trim_labels(labels), labels)


def test_trim_tie_broken_by_class_index():
    # all classes equally common; keep must prefer the smallest indices
    labels = np.tile(np.ones(5, dtype=np.uint8), (4, 1))
    out = trim_labels(labels, seed=0)
    for row in out:
        kept = np.flatnonzero(row)
        assert np.array_equal(kept, np.arange(len(kept)))


@settings(max_examples=50, deadline=None)
@given(label_matrices, st.integers(0, 10))
def test_trim_monotonicity_property(labels, seed):
    out = trim_labels(labels, seed=seed)
    orig = labels.sum(axis=1)
    trimmed = out.sum(axis=1)
    small = orig <= 3
    assert np.array_equal(out[small], labels[small])
    assert np.all(trimmed[~small] >= 2)
    assert np.all(trimmed[~small] <= 3)
    # kept labels are a subset of the original ones
    assert np.all(labels[out.astype(bool)] == 1)


def test_trim_rejects_empty_row():
    with pytest.raises(ValueError):
        trim_labels(np.zeros((1, 3), dtype=np.uint8))


# --- affinity --------------------------------------------------------------------

def test_affinity_identical_single_label_rows():
    labels = np.array([[0, 1], [0, 1]], dtype=np.uint8)
    assert np.all(build_affinity(labels, labels) == 1)


def test_affinity_disjoint_rows_zero():
    a = np.array([[1, 0, 0]], dtype=np.uint8)
    b = np.array([[0, 1, 1]], dtype=np.uint8)
    assert build_affinity(a, b)[0, 0] == 0


def test_affinity_matches_brute_force(rng):
    labels_a = (rng.random((10, 6)) < 0.4).astype(np.uint8)
    labels_b = (rng.random((10, 6)) < 0.4).astype(np.uint8)
    labels_a[labels_a.sum(1) == 0, 0] = 1
    labels_b[labels_b.sum(1) == 0, 0] = 1
    A = build_affinity(labels_a, labels_b)
    for i in range(10):
        for j in range(10):
            share = any(labels_a[i, k] and labels_b[j, k] for k in range(6))
            assert A[i, j] == int(share)


def test_affinity_width_mismatch_raises():
    with pytest.raises(ShapeError):
        build_affinity(np.ones((2, 3), np.uint8), np.ones((2, 4), np.uint8))


@settings(max_examples=50, deadline=None)
@given(label_matrices)
def test_affinity_symmetric_unit_diagonal(labels):
    A = build_affinity(labels, labels)
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 1)


# --- head/tail partition -----------------------------------------------------------

def test_split_head_tail_flickr_counts():
    counts = np.array([2000] * 4 + [200] * 10 + [50] * 10)
    part = split_head_tail(counts, threshold=2000)
    assert part.is_head.sum() == 4
    assert (~part.is_head).sum() == 20


def test_split_head_tail_extremes():
    counts = np.array([5, 10, 20])
    assert np.all(split_head_tail(counts, 1).is_head)
    assert not np.any(split_head_tail(counts, 21).is_head)


def test_split_head_tail_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        split_head_tail(np.array([1]), 0)


# --- query/retrieval splits ---------------------------------------------------------

def test_split_query_retrieval_counts_and_disjointness(tiny_dataset):
    from conftest import tiny_spec
    spec = tiny_spec()
    train, query, retrieval = split_query_retrieval(
        tiny_dataset, spec.class_counts(), queries_per_class=2, seed=0)
    # per primary class: min(2, pool size minus training draw) queries
    prim = primary_labels(tiny_dataset.labels)
    pool = np.bincount(prim, minlength=spec.num_classes)
    spare = np.maximum(pool - spec.class_counts(), 0)
    assert len(query) == int(np.minimum(spare, 2).sum())
    assert not (set(train) & set(query))
    assert not (set(query) & set(retrieval))
    assert not (set(train) & set(retrieval))
    assert len(train) + len(query) + len(retrieval) == tiny_dataset.n


def test_split_zero_queries(tiny_dataset):
    from conftest import tiny_spec
    spec = tiny_spec()
    train, query, retrieval = split_query_retrieval(
        tiny_dataset, spec.class_counts(), queries_per_class=0, seed=0)
    assert len(query) == 0
    assert len(train) + len(retrieval) == tiny_dataset.n


def test_split_retrieval_includes_queries_flag(tiny_dataset):
    from conftest import tiny_spec
    spec = tiny_spec()
    _, query, retrieval = split_query_retrieval(
        tiny_dataset, spec.class_counts(), queries_per_class=2, seed=0,
        retrieval_includes_queries=True)
    assert set(query) <= set(retrieval)


def test_split_errors_when_class_has_no_spare_samples():
    data = synthesize_long_tailed(LongTailSpec(groups=[(1, 4)], d_x=3, d_y=3),
                                  seed=0)
    with pytest.raises(ConfigError):
        split_query_retrieval(data, np.array([4]), queries_per_class=1, seed=0)


# --- file I/O --------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path, tiny_dataset):
    path = tmp_path / "d.lcmd"
    save_dataset(tiny_dataset, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.X, tiny_dataset.X)
    assert np.array_equal(loaded.Y, tiny_dataset.Y)
    assert np.array_equal(loaded.labels, tiny_dataset.labels)


def test_dataset_save_byte_deterministic(tmp_path, tiny_dataset):
    p1, p2 = tmp_path / "a.lcmd", tmp_path / "b.lcmd"
    save_dataset(tiny_dataset, p1)
    save_dataset(tiny_dataset, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_truncated_raises(tmp_path, tiny_dataset):
    path = tmp_path / "d.lcmd"
    save_dataset(tiny_dataset, path)
    (tmp_path / "t.lcmd").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "t.lcmd")


def test_dataset_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.lcmd"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_dataset_hand_built_bytes():
    # 2 samples, d_x=2, d_y=1, L=3; labels rows [1,0,1] and [0,1,0]
    X = np.array([[1.5, -2.0], [0.0, 3.25]])
    Y = np.array([[4.0], [-1.0]])
    raw = b"LCMD" + struct.pack("<I", 1) + struct.pack("<QQQQ", 2, 2, 1, 3)
    raw += X.astype("<f8").tobytes() + Y.astype("<f8").tobytes()
    raw += bytes([0b101, 0b010])   # packed little-endian bit rows
    import os
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "hand.lcmd")
        with open(path, "wb") as f:
            f.write(raw)
        data = load_dataset(path)
    assert np.array_equal(data.X, X)
    assert np.array_equal(data.Y, Y)
    assert np.array_equal(data.labels, [[1, 0, 1], [0, 1, 0]])


def test_load_csv(tmp_path):
    (tmp_path / "x.csv").write_text("1.0,2.0\n3.0,4.0\n")
    (tmp_path / "y.csv").write_text("5.0\n6.0\n")
    (tmp_path / "labels.txt").write_text("0;2\n1\n")
    data = load_csv(tmp_path / "x.csv", tmp_path / "y.csv",
                    tmp_path / "labels.txt")
    assert data.n == 2
    assert np.array_equal(data.labels, [[1, 0, 1], [0, 1, 0]])


# --- invariants -------------------------------------------------------------------

def test_dataset_rejects_mismatched_rows():
    with pytest.raises(ShapeError):
        MultiModalDataset(X=np.zeros((2, 2)), Y=np.zeros((3, 2)),
                          labels=np.ones((2, 1), np.uint8))


def test_dataset_rejects_unlabeled_sample():
    with pytest.raises(ValueError):
        MultiModalDataset(X=np.zeros((1, 2)), Y=np.zeros((1, 2)),
                          labels=np.zeros((1, 2), np.uint8))
