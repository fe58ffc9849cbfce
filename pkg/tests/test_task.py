import numpy as np
import pytest

from moelab.exceptions import UsageError
from moelab.rng import Rng
from moelab.task import TaskSpec, class_balance_deviation, generate_task


def small_spec(**kw):
    base = dict(train_size=256, val_size=64, test_size=96, ood_size=96)
    base.update(kw)
    return TaskSpec(**base)


def test_same_seed_identical_datasets():
    spec = small_spec()
    a = generate_task(spec, Rng(5))
    b = generate_task(spec, Rng(5))
    assert a.splits == b.splits
    assert np.array_equal(a.vocab_vectors, b.vocab_vectors)
    assert a.realized_shift == b.realized_shift


def test_different_seed_differs():
    spec = small_spec()
    a = generate_task(spec, Rng(5))
    b = generate_task(spec, Rng(6))
    assert a.splits != b.splits


def test_splits_pairwise_disjoint():
    # duplicates inside a split are fine; no sample may cross splits
    task = generate_task(small_spec(), Rng(7))
    sets = {name: set(task.splits[name]) for name in ("train", "val", "test", "ood")}
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = sets[a] & sets[b]
            assert not common, f"splits {a} and {b} share {sorted(common)[:3]}"


def test_realized_shift_meets_request():
    spec = small_spec(ood_shift=4.0)
    task = generate_task(spec, Rng(8))
    assert task.realized_shift >= 4.0


def test_zero_shift_statistically_indistinguishable():
    spec = small_spec(ood_shift=0.0, test_size=256, ood_size=256)
    task = generate_task(spec, Rng(9))
    # two-sample mean test on generator-side token embeddings
    def split_embs(name):
        toks, _ = task.tokens_labels(name)
        return task.vocab_vectors[toks.reshape(-1)]

    a, b = split_embs("test"), split_embs("ood")
    diff = a.mean(axis=0) - b.mean(axis=0)
    pooled_se = np.sqrt(a.var(axis=0) / a.shape[0] + b.var(axis=0) / b.shape[0])
    assert np.all(np.abs(diff) < 4 * pooled_se + 1e-9)
    assert np.array_equal(task.ood_centers, task.centers)


def test_class_balance_within_five_percent_at_scale():
    spec = TaskSpec(train_size=10_000, val_size=64, test_size=64, ood_size=64)
    task = generate_task(spec, Rng(10))
    assert class_balance_deviation(task, "train") < 0.05


def test_tokens_within_vocabulary():
    task = generate_task(small_spec(), Rng(11))
    for name in ("train", "val", "test", "ood"):
        toks, labels = task.tokens_labels(name)
        assert toks.min() >= 0 and toks.max() < task.spec.vocab
        assert labels.min() >= 0 and labels.max() < task.spec.classes
        assert toks.shape[1] == task.spec.seq_len


def test_heterogeneous_spreads_ramp():
    from moelab.task import cluster_spreads

    spec = small_spec(cluster_spread=0.5, spread_max=2.0)
    spreads = cluster_spreads(spec)
    assert spreads[0] == 0.5 and spreads[-1] == 2.0
    assert np.all(np.diff(spreads) > 0)


def test_invalid_specs_rejected():
    with pytest.raises(UsageError):
        TaskSpec(classes=10, clusters=4)
    with pytest.raises(UsageError):
        TaskSpec(ood_shift=-1.0)
    with pytest.raises(UsageError):
        TaskSpec(cluster_spread=1.0, spread_max=0.5)
