import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cepfed.data import (
    Dataset,
    PartitionError,
    PartitionSpec,
    SyntheticSpec,
    dirichlet_partition,
    generate,
    label_distribution,
    load_dataset,
    save_dataset,
    shift_for_client,
    split_train_test,
)


def test_zero_noise_makes_class_samples_identical():
    data = generate(SyntheticSpec(noise_std=0.0, samples_per_class=5))
    for k in range(3):
        block = data.inputs[data.labels == k]
        assert np.all(block == block[0])
    assert not np.array_equal(data.inputs[data.labels == 0][0], data.inputs[data.labels == 1][0])


def test_generation_is_deterministic():
    a, b = generate(SyntheticSpec(seed=4)), generate(SyntheticSpec(seed=4))
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    c = generate(SyntheticSpec(seed=5))
    assert not np.array_equal(a.inputs, c.inputs)


def test_shapes_and_pulse_blocks():
    data = generate(SyntheticSpec(samples_per_class=10, pulses="GSR"))
    assert data.inputs.shape == (90, 3, 12, 12)
    assert np.bincount(data.labels).tolist() == [30, 30, 30]


def test_linear_oracle_separates_default_data():
    data = generate(SyntheticSpec(seed=0))
    rng = np.random.default_rng(0)
    order = rng.permutation(len(data))
    tr, te = order[:960], order[960:]
    x = np.c_[data.inputs.reshape(len(data), -1), np.ones(len(data))]
    w, *_ = np.linalg.lstsq(x[tr], np.eye(3)[data.labels[tr]], rcond=None)
    acc = np.mean(np.argmax(x[te] @ w, axis=1) == data.labels[te])
    assert acc > 0.95


def test_client_shift_is_affine_and_distinct():
    spec = SyntheticSpec(samples_per_class=4)
    data = generate(spec)
    a, b = shift_for_client(data, spec, 0), shift_for_client(data, spec, 1)
    assert not np.allclose(a.inputs, b.inputs)
    none = shift_for_client(data, SyntheticSpec(samples_per_class=4, feature_shift=0.0), 0)
    assert np.array_equal(none.inputs, data.inputs)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticSpec(pulses="X")
    with pytest.raises(ValueError):
        PartitionSpec(concentration=0)


# -- partition ----------------------------------------------------------------

def _is_set_partition(shards, n):
    allidx = np.concatenate(shards)
    return len(allidx) == n and len(np.unique(allidx)) == n


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.1, 10))
def test_partition_is_disjoint_cover(seed, n_clients, conc):
    labels = np.repeat(np.arange(3), 100)
    shards = dirichlet_partition(labels, PartitionSpec(n_clients, conc, seed=seed))
    assert len(shards) == n_clients
    assert _is_set_partition(shards, len(labels))
    assert min(len(s) for s in shards) >= 1


def test_single_client_gets_everything():
    labels = np.array([0, 1, 1, 2])
    (shard,) = dirichlet_partition(labels, PartitionSpec(n_clients=1))
    assert shard.tolist() == [0, 1, 2, 3]


def test_partition_is_reproducible():
    labels = np.repeat(np.arange(3), 400)
    a = dirichlet_partition(labels, PartitionSpec(seed=9))
    b = dirichlet_partition(labels, PartitionSpec(seed=9))
    assert [len(s) for s in a] == [len(s) for s in b]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_huge_concentration_is_near_uniform():
    labels = np.repeat(np.arange(3), 400)
    shards = dirichlet_partition(labels, PartitionSpec(5, 1e6, seed=0))
    for k in range(3):
        shares = np.array([np.sum(labels[s] == k) for s in shards]) / 400
        assert np.all(np.abs(shares - 0.2) < 0.05)


def test_heterogeneity_monotone_in_concentration():
    labels = np.repeat(np.arange(3), 400)
    glob = label_distribution(labels, 3)

    def spread(conc):
        out = []
        for seed in range(20):
            shards = dirichlet_partition(labels, PartitionSpec(5, conc, seed=seed))
            out.append(np.mean([np.abs(label_distribution(labels[s], 3) - glob).sum() for s in shards]))
        return np.mean(out)

    assert spread(0.1) > spread(10.0)


def test_partition_errors():
    with pytest.raises(PartitionError):
        dirichlet_partition([], PartitionSpec())
    with pytest.raises(PartitionError):
        dirichlet_partition([0, 1, 2], PartitionSpec(n_clients=5))


# -- split --------------------------------------------------------------------

def test_split_ten_samples():
    labels = np.array([0] * 5 + [1] * 5)
    tr, te = split_train_test(np.arange(10), labels, 0.8, seed=0)
    assert (len(tr), len(te)) == (8, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 200))
def test_split_disjoint_and_stratified(seed, size):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 500)
    shard = np.sort(rng.choice(500, size, replace=False))
    tr, te = split_train_test(shard, labels, 0.8, seed=seed)
    assert len(np.intersect1d(tr, te)) == 0
    assert np.array_equal(np.sort(np.concatenate([tr, te])), shard)
    assert len(tr) >= 1 and len(te) >= 1
    counts = np.bincount(labels[shard], minlength=3)
    if counts[counts > 0].min() >= 2:
        for k in np.flatnonzero(counts):
            assert abs(np.sum(labels[tr] == k) - 0.8 * counts[k]) <= 1 + 1e-9


def test_split_needs_two():
    with pytest.raises(PartitionError):
        split_train_test([3], np.zeros(5, int))


# -- export -------------------------------------------------------------------

def test_export_round_trip(tmp_path):
    data = generate(SyntheticSpec(samples_per_class=7))
    data = Dataset(data.inputs.astype(np.float32).astype(np.float64), data.labels)
    save_dataset(data, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.inputs, data.inputs)
    assert np.array_equal(back.labels, data.labels)
    assert (tmp_path / "d.bin").stat().st_size == 24 + 4 * data.inputs.size + 4 * len(data)


def test_export_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "x")
