"""Deterministic FL workload: Gaussian-blob data, a one-hidden-layer MLP,
mini-batch SGD and sample-weighted federated averaging.

Parameters travel as one flat float32 vector laid out as hidden weights
(``d_in x hidden``, row-major), hidden biases, output weights
(``hidden x classes``, row-major), output biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ARCH = (32, 64, 10)
CLASS_MEAN_RADIUS = 3.0


class DimensionError(ValueError):
    pass


class AggregationError(ValueError):
    pass


def param_count(arch=DEFAULT_ARCH) -> int:
    d, h, c = arch
    return d * h + h + h * c + c


def unpack(params: np.ndarray, arch=DEFAULT_ARCH):
    d, h, c = arch
    if params.shape != (param_count(arch),):
        raise DimensionError(
            f"parameter vector has shape {params.shape}, architecture {arch} needs ({param_count(arch)},)")
    i = 0
    w1 = params[i:i + d * h].reshape(d, h); i += d * h
    b1 = params[i:i + h]; i += h
    w2 = params[i:i + h * c].reshape(h, c); i += h * c
    b2 = params[i:i + c]
    return w1, b1, w2, b2


def _seed_seq(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    seed: int
    split: str = "train"
    classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "SyntheticDataset":
        return SyntheticDataset(self.features[index], self.labels[index], self.seed, self.split,
                                self.classes)


_SPLIT_CODES = {"train": 1, "test": 2}


def generate_dataset(seed: int, n: int, d: int, classes: int, split: str = "train") -> SyntheticDataset:
    """Balanced Gaussian blobs. Class means depend only on ``(seed, d, classes)``,
    so the train and test splits of one seed share the same distribution."""
    if d < 1:
        raise DimensionError(f"d must be >= 1, got {d}")
    if classes < 1 or n < classes:
        raise DimensionError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    mean_rng = np.random.default_rng(_seed_seq(seed, 0, d, classes))
    directions = mean_rng.standard_normal((classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = CLASS_MEAN_RADIUS * directions

    rng = np.random.default_rng(_seed_seq(seed, _SPLIT_CODES[split], n, d, classes))
    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + rng.standard_normal((n, d))
    return SyntheticDataset(features.astype(np.float32), labels.astype(np.int64), seed, split, classes)


def partition_iid(dataset: SyntheticDataset, k: int, seed: int) -> list[SyntheticDataset]:
    n = len(dataset)
    if n == 0:
        raise DimensionError("cannot partition an empty dataset")
    if not 1 <= k <= n:
        raise DimensionError(f"need 1 <= k <= {n} shards, got k={k}")
    order = np.random.default_rng(_seed_seq(seed, 3, n, k)).permutation(n)
    return [dataset.subset(part) for part in np.array_split(order, k)]


def shard_sizes(n: int, k: int) -> list[int]:
    return [len(p) for p in np.array_split(np.arange(n), k)]


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def device_train_seed(run_seed: int, device_id: int, rnd: int) -> int:
    return int(_seed_seq(run_seed, 4, device_id, rnd).generate_state(1, np.uint64)[0])


def init_params(seed: int, arch=DEFAULT_ARCH) -> np.ndarray:
    d, h, c = arch
    rng = np.random.default_rng(_seed_seq(seed, 5, *arch))
    lim1 = np.sqrt(6.0 / (d + h))
    lim2 = np.sqrt(6.0 / (h + c))
    w1 = rng.uniform(-lim1, lim1, (d, h))
    w2 = rng.uniform(-lim2, lim2, (h, c))
    return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)]).astype(np.float32)


def logits(params: np.ndarray, x: np.ndarray, arch=DEFAULT_ARCH) -> np.ndarray:
    w1, b1, w2, b2 = unpack(params, arch)
    return np.maximum(x @ w1 + b1, 0) @ w2 + b2


def loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, arch=DEFAULT_ARCH):
    """Mean softmax cross-entropy and its gradient w.r.t. the flat parameters."""
    w1, b1, w2, b2 = unpack(params, arch)
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0)
    z2 = a1 @ w2 + b2
    z2 = z2 - z2.max(axis=1, keepdims=True)
    ez = np.exp(z2)
    p = ez / ez.sum(axis=1, keepdims=True)
    m = len(y)
    loss = float(-np.log(p[np.arange(m), y] + 1e-12).mean())

    dz2 = p
    dz2[np.arange(m), y] -= 1
    dz2 /= m
    gw2 = a1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (z1 > 0)
    gw1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2]).astype(params.dtype)
    return loss, grad


def local_train(params: np.ndarray, shard: SyntheticDataset, cfg: TrainConfig,
                arch=DEFAULT_ARCH) -> np.ndarray:
    """``cfg.local_epochs`` of shuffled mini-batch SGD; ``params`` is not modified."""
    w = np.array(params, dtype=np.float32, copy=True)
    unpack(w, arch)
    if shard.features.shape[1] != arch[0]:
        raise DimensionError(f"shard has {shard.features.shape[1]} features, model expects {arch[0]}")
    if cfg.learning_rate == 0:
        return w
    lr = np.float32(cfg.learning_rate)
    rng = np.random.default_rng(_seed_seq(cfg.seed, 6))
    n = len(shard)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            _, g = loss_and_grad(w, shard.features[idx], shard.labels[idx], arch)
            w -= lr * g
    return w


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    device_id: int
    round: int
    params: np.ndarray
    num_samples: int

    def __post_init__(self):
        if self.num_samples <= 0:
            raise AggregationError(f"num_samples must be positive, got {self.num_samples}")


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-weighted mean, accumulated in float64 in ascending device_id order."""
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    rounds = {u.round for u in updates}
    if len(rounds) > 1:
        raise AggregationError(f"updates from mixed rounds {sorted(rounds)}")
    sizes = {np.asarray(u.params).shape for u in updates}
    if len(sizes) > 1:
        raise AggregationError(f"updates have mismatched lengths {sorted(sizes)}")
    ordered = sorted(updates, key=lambda u: u.device_id)
    total = float(sum(u.num_samples for u in ordered))
    acc = np.zeros(np.asarray(ordered[0].params).shape, dtype=np.float64)
    for u in ordered:
        acc += (u.num_samples / total) * np.asarray(u.params, dtype=np.float64)
    return acc.astype(np.float32)


def evaluate(params: np.ndarray, test: SyntheticDataset, arch=DEFAULT_ARCH) -> float:
    """Fraction of correct argmax predictions; ties go to the lowest class."""
    if len(test) == 0:
        raise DimensionError("cannot evaluate on an empty test set")
    pred = np.argmax(logits(params, test.features, arch), axis=1)
    return float(np.count_nonzero(pred == test.labels)) / len(test)


def mean_loss(params: np.ndarray, data: SyntheticDataset, arch=DEFAULT_ARCH) -> float:
    return loss_and_grad(params, data.features, data.labels, arch)[0]
