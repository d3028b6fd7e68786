import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from adaptmerge.replay import (ReplayBuffer, ReplayError, build_balanced_set, class_quotas, draw_other_samples,
                               load_buffer, save_buffer, update_buffer)


def task_data(classes, per_class, start_id=0, size=3):
    labels = np.repeat(np.asarray(classes), per_class)
    ids = np.arange(start_id, start_id + len(labels))
    # the id is written into the pixels so selections can be traced back
    images = np.broadcast_to(ids[:, None, None, None], (len(ids), 1, size, size)).astype(np.float32).copy()
    return images, labels, ids


def fill(budget, tasks, per_class=20, seed=0):
    buf = ReplayBuffer(budget, seed)
    start = 0
    for classes in tasks:
        x, y, ids = task_data(classes, per_class, start)
        start += len(ids)
        buf = update_buffer(buf, x, y, ids)
    return buf


# --- quotas and update ----------------------------------------------------

def test_first_task_even_split():
    buf = fill(10, [[0, 1]])
    assert buf.counts() == {0: 5, 1: 5}


def test_remainder_goes_to_lowest_ids():
    assert list(class_quotas(40, range(6)).values()) == [7, 7, 7, 7, 6, 6]
    buf = fill(40, [[0, 1], [2, 3], [4, 5]])
    assert buf.counts() == {0: 7, 1: 7, 2: 7, 3: 7, 4: 6, 5: 6}


def test_budget_below_class_count_rejected():
    with pytest.raises(ReplayError, match="cannot hold"):
        fill(3, [[0, 1], [2, 3]])


def test_nonpositive_budget_rejected():
    with pytest.raises(ReplayError):
        ReplayBuffer(0)


def test_existing_class_rejected():
    buf = fill(10, [[0, 1]])
    x, y, ids = task_data([1, 2], 4, 100)
    with pytest.raises(ReplayError, match="disjoint"):
        update_buffer(buf, x, y, ids)


def test_same_seed_same_identities():
    a = fill(12, [[0, 1], [2, 3], [4, 5]], seed=7)
    b = fill(12, [[0, 1], [2, 3], [4, 5]], seed=7)
    c = fill(12, [[0, 1], [2, 3], [4, 5]], seed=8)
    assert all(np.array_equal(a.ids[k], b.ids[k]) for k in a.classes)
    assert any(not np.array_equal(a.ids[k], c.ids[k]) for k in a.classes)


def test_downsampling_keeps_a_subset():
    before = fill(20, [[0, 1]])
    x, y, ids = task_data([2, 3], 20, 1000)
    after = update_buffer(before, x, y, ids)
    for c in (0, 1):
        assert set(after.ids[c]) <= set(before.ids[c])
    assert len(before) == 20     # input left untouched


def test_images_follow_ids():
    buf = fill(12, [[0, 1], [2, 3]])
    for c in buf.classes:
        np.testing.assert_array_equal(buf.images[c][:, 0, 0, 0], buf.ids[c])


def test_small_class_keeps_everything():
    buf = ReplayBuffer(100)
    x, y, ids = task_data([0, 1], 3)
    buf = update_buffer(buf, x, y, ids)
    assert buf.counts() == {0: 3, 1: 3}


@settings(max_examples=60, deadline=None)
@given(budget=st.integers(1, 120), sizes=st.lists(st.integers(1, 5), min_size=1, max_size=6),
       seed=st.integers(0, 2 ** 31))
def test_budget_balance_and_coverage(budget, sizes, seed):
    buf = ReplayBuffer(budget, seed)
    nxt, start = 0, 0
    for s in sizes:
        classes = list(range(nxt, nxt + s))
        nxt += s
        x, y, ids = task_data(classes, 30, start)
        start += len(ids)
        if budget < nxt:
            with pytest.raises(ReplayError):
                update_buffer(buf, x, y, ids)
            return
        buf = update_buffer(buf, x, y, ids)
        counts = list(buf.counts().values())
        assert len(buf) <= budget
        assert max(counts) - min(counts) <= 1
        assert min(counts) >= 1 and len(counts) == nxt


# --- drawing "other" samples ----------------------------------------------

def test_empty_buffer_draw_signals_no_replay(rng):
    draw = draw_other_samples(ReplayBuffer(10), 4, rng, other_label=2)
    assert not draw.available and len(draw.labels) == 0


def test_draw_requires_positive_n(rng):
    with pytest.raises(ReplayError):
        draw_other_samples(fill(10, [[0, 1]]), 0, rng, other_label=2)


def test_exhaustive_draw_without_replacement(rng):
    buf = fill(10, [[0, 1]])
    draw = draw_other_samples(buf, len(buf), rng, other_label=2, replace=False)
    stored = np.concatenate([buf.ids[c] for c in buf.classes])
    assert sorted(draw.images[:, 0, 0, 0].tolist()) == sorted(stored.tolist())
    assert set(draw.labels.tolist()) == {2}


def test_oversized_draw_uses_replacement(rng):
    buf = fill(4, [[0, 1]])
    draw = draw_other_samples(buf, 50, rng, other_label=9)
    assert len(draw.labels) == 50 and draw.available


def test_draw_is_uniform_over_class_origins(rng):
    # equal quotas, so class of origin should be uniform
    buf = fill(40, [[0, 1], [2, 3]])
    stored = {int(i): c for c in buf.classes for i in buf.ids[c]}
    counts = np.zeros(4)
    for _ in range(100):
        draw = draw_other_samples(buf, 100, rng, other_label=4, replace=True)
        for v in draw.images[:, 0, 0, 0]:
            counts[stored[int(v)]] += 1
    assert counts.sum() == 10_000
    assert chisquare(counts).pvalue > 0.01


# --- balanced fine-tuning set ---------------------------------------------

def test_first_task_cap_is_budget_over_classes():
    x, y, ids = task_data([0, 1], 100)
    bx, by = build_balanced_set(ReplayBuffer(10), x, y, seed=0)
    assert np.bincount(by).tolist() == [5, 5]


def test_current_task_undersampled_to_stored_quota():
    buf = fill(10, [[0, 1]])          # quota 5 per stored class
    x, y, ids = task_data([2, 3], 100, 1000)
    bx, by = build_balanced_set(buf, x, y, seed=3)
    assert np.bincount(by).tolist() == [5, 5, 5, 5]
    stored = set(np.concatenate([buf.ids[0], buf.ids[1]]).tolist())
    assert stored <= set(bx[:, 0, 0, 0].astype(int).tolist())


@settings(max_examples=40, deadline=None)
@given(budget=st.integers(8, 60), tasks=st.integers(1, 4), seed=st.integers(0, 2 ** 31))
def test_balanced_histogram_within_one(budget, tasks, seed):
    buf = ReplayBuffer(budget, seed)
    for t in range(tasks):
        x, y, ids = task_data([2 * t, 2 * t + 1], 40, 1000 * t)
        _, by = build_balanced_set(buf, x, y, seed)
        hist = np.bincount(by, minlength=2 * t + 2)
        assert hist.min() >= 1 and hist.max() - hist.min() <= 1
        buf = update_buffer(buf, x, y, ids)


def test_balanced_set_is_deterministic():
    buf = fill(10, [[0, 1]])
    x, y, _ = task_data([2, 3], 50, 500)
    a = build_balanced_set(buf, x, y, seed=11)
    b = build_balanced_set(buf, x, y, seed=11)
    np.testing.assert_array_equal(a[0], b[0])


# --- persistence ----------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    buf = fill(12, [[0, 1], [2, 3]], seed=5)
    manifest = save_buffer(buf, tmp_path / "buffer")
    meta = json.loads(manifest.read_text())
    assert sorted(meta["classes"]) == ["0", "1", "2", "3"]
    back = load_buffer(tmp_path / "buffer")
    assert back.budget == 12 and back.seed == 5
    for c in buf.classes:
        np.testing.assert_array_equal(back.ids[c], buf.ids[c])
        np.testing.assert_array_equal(back.images[c], buf.images[c])


def test_manifest_is_byte_stable(tmp_path):
    buf = fill(12, [[0, 1], [2, 3]], seed=5)
    a = save_buffer(buf, tmp_path / "a").read_bytes()
    b = save_buffer(fill(12, [[0, 1], [2, 3]], seed=5), tmp_path / "b").read_bytes()
    assert a == b


def test_load_detects_modified_sample(tmp_path):
    buf = fill(8, [[0, 1]])
    save_buffer(buf, tmp_path)
    images = np.load(tmp_path / "class_0.npy")
    images[0] += 1
    np.save(tmp_path / "class_0.npy", images)
    with pytest.raises(ValueError, match="hash mismatch"):
        load_buffer(tmp_path)
