import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcil.data import (AccessAuditor, ConfigurationError, CoresetStore, LabeledDataset, Normalizer,
                        build_task_schedule, iterate_batches, load_array_dataset, make_toy_dataset,
                        read_cifar100_binary, resolve_data_root, save_array_dataset, task_subset,
                        update_coreset)


def _fake(num_classes=10, per_class=30, size=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = rng.normal(size=(len(labels), size, size, 3)).astype(np.float32)
    return LabeledDataset(images, labels, num_classes)


# --- schedules ---------------------------------------------------------------------------

def test_cifar_scale_split_has_ten_tasks_of_ten():
    s = build_task_schedule(100, 10, seed=4)
    assert s.task_sizes() == [10] * 10


def test_single_task_holds_the_whole_permutation():
    s = build_task_schedule(100, 1, seed=2)
    assert s.tasks == (s.class_order,)
    assert sorted(s.class_order) == list(range(100))


def test_schedule_is_reproducible_and_seed_sensitive():
    a, b = build_task_schedule(6, 3, 7), build_task_schedule(6, 3, 7)
    c = build_task_schedule(6, 3, 8)
    assert a == b
    assert c.class_order != a.class_order
    assert c.task_sizes() == a.task_sizes() == [2, 2, 2]


def test_non_divisible_split_names_both_values():
    with pytest.raises(ConfigurationError, match="num_classes=10.*num_tasks=3"):
        build_task_schedule(10, 3, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_schedule_partitions_the_classes(per_task, num_tasks, seed):
    m = per_task * num_tasks
    s = build_task_schedule(m, num_tasks, seed)
    flat = [c for t in s.tasks for c in t]
    assert sorted(flat) == list(range(m))
    assert len(set(flat)) == m
    assert s.cumulative(num_tasks - 1) == s.class_order
    assert s == build_task_schedule(m, num_tasks, seed)


# --- subsets -------------------------------------------------------------------------------

def test_task_subset_filters_by_label():
    d = _fake()
    sub = task_subset(d, [3, 7])
    assert set(sub.labels.tolist()) == {3, 7}
    assert len(sub) == 60
    assert len(task_subset(d, range(10))) == len(d)
    only = task_subset(d, [5])
    assert (only.labels == 5).all()


def test_task_subset_rejects_empty_and_unknown():
    d = _fake()
    with pytest.raises(ValueError):
        task_subset(d, [])
    with pytest.raises(ValueError):
        task_subset(d, [10])


def test_cifar_sized_task_count():
    # 500 train images per class and 10-class tasks give 5000 images per task
    labels = np.repeat(np.arange(100), 500)
    d = LabeledDataset(np.zeros((len(labels), 1, 1, 3), np.float32), labels, 100)
    assert len(task_subset(d, build_task_schedule(100, 10, 0).tasks[0])) == 5000


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4, 3)), np.array([0, 5]), 5)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4)), np.array([0, 1]), 5)


# --- batches & normalization -----------------------------------------------------------------

def test_batches_are_a_function_of_the_seed():
    d = _fake()
    run = lambda seed: [(x.copy(), y.copy()) for x, y in iterate_batches(d, 32, seed, augment=True, pad=1)]
    a, b, c = run((0, 1, 2)), run((0, 1, 2)), run((0, 1, 3))
    assert all(np.array_equal(xa, xb) and np.array_equal(ya, yb) for (xa, ya), (xb, yb) in zip(a, b))
    assert not all(np.array_equal(ya, yc) for (_, ya), (_, yc) in zip(a, c))
    assert sum(len(y) for _, y in a) == len(d)


def test_normalizer_standardizes_channels():
    d = _fake()
    n = Normalizer.fit(d)
    out = n(d).images.reshape(-1, 3)
    np.testing.assert_allclose(out.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(0), 1, atol=1e-4)


# --- coreset ------------------------------------------------------------------------------------

def test_coreset_quotas_follow_seen_classes():
    labels = np.repeat(np.arange(100), 250)
    d = LabeledDataset(np.zeros((len(labels), 1, 1, 1), np.float32), labels, 100)
    s = build_task_schedule(100, 10, 0)
    store = CoresetStore(2000)
    store = update_coreset(store, task_subset(d, s.tasks[0]), seed=0)
    assert set(store.class_counts().values()) == {200}
    for n in range(1, 10):
        store = update_coreset(store, task_subset(d, s.tasks[n]), seed=n)
        assert len(store) <= 2000
        assert set(store.class_counts()) == set(s.cumulative(n))
    assert set(store.class_counts().values()) == {20}


def test_coreset_balance_with_remainder():
    d = _fake(num_classes=7, per_class=50)
    store = update_coreset(CoresetStore(100), task_subset(d, [0, 1, 2]), 0)
    store = update_coreset(store, task_subset(d, [3, 4, 5, 6]), 1)
    counts = store.class_counts().values()
    assert max(counts) - min(counts) <= 1
    assert len(store) == 100


def test_coreset_rejects_nonpositive_capacity():
    with pytest.raises(ConfigurationError):
        CoresetStore(0)


def test_coreset_roundtrip(tmp_path):
    d = _fake()
    store = update_coreset(CoresetStore(40), task_subset(d, [1, 2]), 0)
    store.save(tmp_path / "core.npz")
    back = CoresetStore.load(tmp_path / "core.npz")
    assert back.capacity == 40
    np.testing.assert_array_equal(back.images, store.images)
    np.testing.assert_array_equal(back.labels, store.labels)


# --- auditing -----------------------------------------------------------------------------------

def test_auditor_flags_past_reads():
    s = build_task_schedule(6, 3, 0)
    a = AccessAuditor()
    a.record(0, list(s.tasks[0]))
    a.record(1, list(s.tasks[1]))
    assert a.violations(s) == {}
    a.record(2, [s.tasks[0][0]])
    assert a.violations(s) == {2: {s.tasks[0][0]: 1}}


# --- sources ----------------------------------------------------------------------------------------

def test_toy_dataset_shapes_and_determinism():
    tr, te = make_toy_dataset(num_classes=4, train_per_class=5, test_per_class=3, seed=1)
    assert tr.images.shape == (20, 16, 16, 3) and te.images.shape == (12, 16, 16, 3)
    assert tr.split == "train" and te.split == "test"
    tr2, _ = make_toy_dataset(num_classes=4, train_per_class=5, test_per_class=3, seed=1)
    np.testing.assert_array_equal(tr.images, tr2.images)


def test_array_container_roundtrip(tmp_path):
    d = _fake()
    save_array_dataset(tmp_path / "d.npz", d)
    back = load_array_dataset(tmp_path / "d.npz")
    np.testing.assert_array_equal(back.images, d.images)
    assert back.num_classes == d.num_classes and back.split == d.split


def test_cifar_binary_layout(tmp_path):
    rng = np.random.default_rng(0)
    recs = np.zeros((3, 3074), np.uint8)
    recs[:, 0] = [1, 2, 3]
    recs[:, 1] = [10, 55, 99]
    recs[:, 2:] = rng.integers(0, 256, size=(3, 3072))
    recs.tofile(tmp_path / "train.bin")
    d = read_cifar100_binary(tmp_path / "train.bin", "train")
    assert d.labels.tolist() == [10, 55, 99]
    # plane-major: red plane first, then green, then blue
    assert d.images[1, 0, 0, 0] == pytest.approx(recs[1, 2] / 255)
    assert d.images[1, 0, 0, 1] == pytest.approx(recs[1, 2 + 1024] / 255)
    assert d.images[1, 31, 31, 2] == pytest.approx(recs[1, 3073] / 255)


def test_data_root_env_fallback(monkeypatch):
    monkeypatch.setenv("DFCIL_DATA_ROOT", "/some/where")
    assert str(resolve_data_root("")) == "/some/where"
    assert str(resolve_data_root("/explicit")) == "/explicit"
    monkeypatch.delenv("DFCIL_DATA_ROOT")
    with pytest.raises(ConfigurationError):
        resolve_data_root("")
