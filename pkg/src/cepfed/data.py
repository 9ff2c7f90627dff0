"""Synthetic image classification data and non-IID client partitions."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fixed channel-wise (gain, offset) transforms standing in for acquisition
# protocols; a combination stacks its members' samples.
PULSE_TRANSFORMS = {
    "G": ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
    "S": ((1.3, 0.8, 1.1), (0.2, -0.1, 0.0)),
    "R": ((0.9, 1.0, 0.9), (0.0, 0.1, -0.1)),
}


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 3
    samples_per_class: int = 400
    channels: int = 3
    height: int = 12
    width: int = 12
    noise_std: float = 1.0
    feature_shift: float = 0.3
    pulses: str = "G"
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.samples_per_class < 1 or self.channels < 1:
            raise ValueError("samples_per_class and channels must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.noise_std < 0 or self.feature_shift < 0:
            raise ValueError("noise_std and feature_shift must be non-negative")
        if not self.pulses or any(p not in PULSE_TRANSFORMS for p in self.pulses):
            raise ValueError(f"pulses must be drawn from {sorted(PULSE_TRANSFORMS)}, got {self.pulses!r}")


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int = 5
    concentration: float = 0.5
    train_fraction: float = 0.8
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.concentration <= 0:
            raise ValueError("Dirichlet concentration must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # (n, c, h, w) float64
    labels: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx])


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """One smooth random pattern per class, unit RMS."""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    yy, xx = np.meshgrid(np.linspace(0, 1, spec.height), np.linspace(0, 1, spec.width), indexing="ij")
    out = np.zeros((spec.n_classes, spec.channels, spec.height, spec.width))
    for k in range(spec.n_classes):
        for c in range(spec.channels):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            blob_y, blob_x = rng.uniform(0.2, 0.8, size=2)
            pattern = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            pattern += 1.5 * np.exp(-((yy - blob_y) ** 2 + (xx - blob_x) ** 2) / 0.05)
            out[k, c] = pattern
        out[k] -= out[k].mean()
        out[k] /= np.sqrt((out[k] ** 2).mean())
    return out


def apply_channel_transform(inputs: np.ndarray, gain, offset) -> np.ndarray:
    gain = np.asarray(gain, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    c = inputs.shape[1]
    gain = np.resize(gain, c)[None, :, None, None]
    offset = np.resize(offset, c)[None, :, None, None]
    return inputs * gain + offset


def generate(spec: SyntheticSpec) -> Dataset:
    """Template-plus-Gaussian-noise samples, one block per pulse in ``spec.pulses``."""
    templates = class_templates(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    xs, ys = [], []
    for pulse in spec.pulses:
        labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
        noise = rng.standard_normal((len(labels),) + templates.shape[1:]) * spec.noise_std
        x = templates[labels] + noise
        xs.append(apply_channel_transform(x, *PULSE_TRANSFORMS[pulse]))
        ys.append(labels)
    return Dataset(np.concatenate(xs), np.concatenate(ys).astype(np.int64))


def client_shift(spec: SyntheticSpec, client_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-client (gain, offset) per channel simulating scanner variation."""
    rng = np.random.default_rng([spec.seed, 0x5C4, client_id])
    gain = 1.0 + spec.feature_shift * rng.uniform(-1, 1, spec.channels)
    offset = spec.feature_shift * rng.uniform(-1, 1, spec.channels)
    return gain, offset


def shift_for_client(data: Dataset, spec: SyntheticSpec, client_id: int) -> Dataset:
    gain, offset = client_shift(spec, client_id)
    return Dataset(apply_channel_transform(data.inputs, gain, offset), data.labels)


def dirichlet_partition(labels, spec: PartitionSpec) -> list[np.ndarray]:
    """Label-skewed shards: per class, client shares drawn from Dirichlet(concentration).

    A draw leaving some client with fewer than two samples is redrawn from a
    fresh sub-seed, up to ``spec.max_retries`` times.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise PartitionError("cannot partition an empty dataset")
    n = spec.n_clients
    if n == 1:
        return [np.arange(len(labels))]
    min_size = 2
    if len(labels) < min_size * n:
        raise PartitionError(f"{len(labels)} samples cannot give {n} clients {min_size} each")
    classes = np.unique(labels)
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        shards: list[list[np.ndarray]] = [[] for _ in range(n)]
        for k in classes:
            idx = np.flatnonzero(labels == k)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n, spec.concentration))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        out = [np.sort(np.concatenate(s)) for s in shards]
        if min(len(s) for s in out) >= min_size:
            return out
    raise PartitionError(
        f"no partition gave every client {min_size}+ samples after {spec.max_retries} draws; "
        "raise the concentration or the dataset size"
    )


def split_train_test(shard, labels, fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of the index array ``shard``.

    The train count is round(fraction * len) clamped to leave one sample on
    each side; it is apportioned across classes by largest remainder so
    every class lands within one sample of its exact share.
    """
    shard = np.asarray(shard, dtype=np.int64)
    labels = np.asarray(labels)
    if len(shard) < 2:
        raise PartitionError("a shard needs at least two samples to split")
    rng = np.random.default_rng([seed, 0x5917])
    shard = shard.copy()
    rng.shuffle(shard)
    n_train = min(max(int(round(fraction * len(shard))), 1), len(shard) - 1)
    shard_labels = labels[shard]
    classes, counts = np.unique(shard_labels, return_counts=True)
    if counts.min() < 2:
        return np.sort(shard[:n_train]), np.sort(shard[n_train:])
    exact = counts * n_train / len(shard)
    take = np.floor(exact).astype(int)
    take = np.clip(take, 1, counts - 1)
    short = n_train - take.sum()
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    i = 0
    while short != 0 and i < 4 * len(order):
        k = order[i % len(order)]
        if short > 0 and take[k] < counts[k] - 1 and take[k] < np.ceil(exact[k]):
            take[k] += 1
            short -= 1
        elif short < 0 and take[k] > 1 and take[k] > np.floor(exact[k]):
            take[k] -= 1
            short += 1
        i += 1
    train, test = [], []
    for k, t in zip(classes, take):
        members = shard[shard_labels == k]
        train.append(members[:t])
        test.append(members[t:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def label_distribution(labels, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    return counts / max(counts.sum(), 1)


# -- flat binary export -------------------------------------------------------

_FILE_MAGIC = b"CEPD"
_FILE_HEADER = struct.Struct("<4sIIIII")


def save_dataset(data: Dataset, path) -> None:
    """Header (magic, n, c, h, w, n_classes) + f32 inputs + i32 labels."""
    n, c, h, w = data.inputs.shape
    k = int(data.labels.max()) + 1 if n else 0
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_FILE_MAGIC, n, c, h, w, k))
        fh.write(np.ascontiguousarray(data.inputs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype="<i4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _FILE_HEADER.size:
        raise ValueError(f"{path}: file too short")
    magic, n, c, h, w, _ = _FILE_HEADER.unpack_from(raw)
    if magic != _FILE_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    off = _FILE_HEADER.size
    size = n * c * h * w
    if len(raw) != off + 4 * size + 4 * n:
        raise ValueError(f"{path}: size does not match header")
    x = np.frombuffer(raw, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(n, c, h, w)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 4 * size).astype(np.int64)
    return Dataset(x, y)
