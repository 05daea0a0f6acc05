import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from openinc.errors import DuplicateClass, EmptyClass, MemoryTooSmall, QuotaExceedsClass
from openinc.exemplar import (
    ClassExemplars,
    ExemplarStore,
    isometric_select,
    refresh_features,
    shrink_old_classes,
    update_memory,
    write_exemplar_csv,
)
from openinc.model import encode, init_model


def class_data(rng, n, d=3, offset=0):
    feats = rng.standard_normal((n, d))
    return feats.copy(), feats, np.arange(offset, offset + n)


def filled_store(counts, capacity):
    rng = np.random.default_rng(0)
    per = {}
    for c, n in enumerate(counts):
        x = rng.standard_normal((n, 2))
        per[c] = ClassExemplars(x, x.copy(), np.arange(n) + 100 * c, np.arange(n))
    return ExemplarStore(capacity, per)


def test_isometric_stride_two():
    # 20 points mirrored about 0, so the mean is 0; quota 10 gives stride 2
    dist = np.array([0.0, 1, 2, 3, 4, 5, 6, 7, 8, 9]) + 0.5
    feats = np.concatenate([dist, -dist])[:, None]
    order = np.argsort(np.abs(feats[:, 0]), kind="stable")
    idx, ranks = isometric_select(feats, 10)
    assert ranks.tolist() == [0, 2, 4, 6, 8, 10, 12, 14, 16, 18]
    assert idx.tolist() == order[ranks].tolist()


def test_isometric_ten_points_quota_five():
    feats = np.array([[0.0], [1], [2], [3], [4], [5], [6], [7], [8], [9]])
    idx, ranks = isometric_select(feats, 5)
    assert ranks.tolist() == [0, 2, 4, 6, 8]
    assert oracles.distance_ranks(feats, idx.tolist()) == [0, 2, 4, 6, 8]


def test_isometric_full_and_single():
    feats = np.random.default_rng(1).standard_normal((7, 2))
    idx, ranks = isometric_select(feats, 7)
    assert sorted(idx.tolist()) == list(range(7)) and ranks.tolist() == list(range(7))
    idx1, _ = isometric_select(feats, 1)
    d = np.linalg.norm(feats - feats.mean(axis=0), axis=1)
    assert idx1.tolist() == [int(np.argmin(d))]


def test_isometric_errors():
    with pytest.raises(QuotaExceedsClass):
        isometric_select(np.zeros((3, 2)), 4)
    with pytest.raises(EmptyClass):
        isometric_select(np.zeros((0, 2)), 1)


def test_isometric_ties_keep_index_order():
    feats = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    idx, _ = isometric_select(feats, 4)
    assert idx.tolist() == [0, 1, 2, 3]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.data())
def test_isometric_ranks_match_brute_force(n, seed, data):
    quota = data.draw(st.integers(1, n))
    feats = np.random.default_rng(seed).standard_normal((n, 3))
    idx, ranks = isometric_select(feats, quota)
    s = n // quota
    assert ranks.tolist() == list(range(0, n, s))[:quota]
    assert len(set(idx.tolist())) == quota
    assert oracles.distance_ranks(feats, idx.tolist()) == ranks.tolist()


def test_shrink_hand_trace():
    store = filled_store([5, 5], capacity=10)
    shrunk = shrink_old_classes(store, 5, np.random.default_rng(0))
    assert shrunk.counts() == {0: 2, 1: 2}
    for c in (0, 1):
        assert set(shrunk.per_class[c].source_rows) <= set(store.per_class[c].source_rows)


def test_shrink_without_new_classes_is_identity():
    store = filled_store([5, 5], capacity=10)
    assert shrink_old_classes(store, 2, np.random.default_rng(0)).counts() == store.counts()


def test_shrink_memory_too_small():
    with pytest.raises(MemoryTooSmall):
        shrink_old_classes(filled_store([1, 1], capacity=3), 5, np.random.default_rng(0))


def test_update_empty_store():
    rng = np.random.default_rng(2)
    store = update_memory(
        ExemplarStore(8), {0: class_data(rng, 20), 1: class_data(rng, 20, offset=20)}, np.random.default_rng(0)
    )
    assert store.counts() == {0: 4, 1: 4}
    assert store.per_class[0].distance_ranks.tolist() == [0, 5, 10, 15]


def test_update_errors():
    rng = np.random.default_rng(3)
    store = update_memory(ExemplarStore(4), {0: class_data(rng, 5)}, rng)
    with pytest.raises(DuplicateClass):
        update_memory(store, {0: class_data(rng, 5)}, rng)
    with pytest.raises(MemoryTooSmall):
        update_memory(store, {c: class_data(rng, 5) for c in (1, 2, 3, 4)}, rng)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(4, 60),
    st.lists(st.integers(1, 3), min_size=1, max_size=6),
    st.integers(0, 1000),
)
def test_update_sequence_invariants(capacity, session_sizes, seed):
    rng = np.random.default_rng(seed)
    store = ExemplarStore(capacity)
    next_class = 0
    source = {}
    for size in session_sizes:
        total = len(store.per_class) + size
        if capacity // total < 1:
            break
        before = store.counts()
        new = {}
        for c in range(next_class, next_class + size):
            new[c] = class_data(rng, int(rng.integers(capacity // total, capacity // total + 10)), offset=1000 * c)
            source[c] = set(new[c][2].tolist())
        next_class += size
        store = update_memory(store, new, rng)
        counts = store.counts()
        assert sum(counts.values()) <= capacity
        assert max(counts.values()) - min(counts.values()) <= 1
        assert all(counts[c] <= before[c] for c in before)
        for c, ex in store.per_class.items():
            assert set(ex.source_rows.tolist()) <= source[c]


def test_update_is_deterministic():
    def build():
        rng = np.random.default_rng(7)
        store = update_memory(ExemplarStore(12), {0: class_data(rng, 9), 1: class_data(rng, 9, offset=9)}, rng)
        return update_memory(store, {2: class_data(rng, 9, offset=18), 3: class_data(rng, 9, offset=27)}, rng)

    a, b = build(), build()
    for c in a.per_class:
        assert a.per_class[c].source_rows.tolist() == b.per_class[c].source_rows.tolist()


def test_refresh_features():
    state = init_model(3, hidden_dims=(4,), feature_dim=2, seed=0)
    rng = np.random.default_rng(4)
    store = update_memory(ExemplarStore(6), {0: class_data(rng, 5), 1: class_data(rng, 5, offset=5)}, rng)
    fresh = refresh_features(store, state)
    for c, ex in fresh.per_class.items():
        assert np.array_equal(ex.features, encode(state, ex.inputs).data)
        assert np.array_equal(ex.inputs, store.per_class[c].inputs)
    again = refresh_features(fresh, state)
    assert all(np.array_equal(again.per_class[c].features, fresh.per_class[c].features) for c in fresh.per_class)
    state.encoder.layers[0].weight += 0.5
    moved = refresh_features(fresh, state)
    assert not np.array_equal(moved.per_class[0].features, fresh.per_class[0].features)


def test_stacked_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    store = update_memory(ExemplarStore(6), {3: class_data(rng, 6), 1: class_data(rng, 6, offset=50)}, rng)
    inputs, feats, labels = store.stacked()
    assert len(inputs) == len(feats) == len(labels) == 6
    assert labels.tolist() == [3, 3, 3, 1, 1, 1]
    path = tmp_path / "ex.csv"
    write_exemplar_csv(store, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["class_id", "exemplar_index", "source_row_index", "distance_rank"]
    assert [int(r["distance_rank"]) for r in rows if r["class_id"] == "3"] == [0, 2, 4]
    assert {int(r["source_row_index"]) for r in rows if r["class_id"] == "1"} <= set(range(50, 56))
