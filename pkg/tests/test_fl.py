import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcommbench import fl
from flcommbench.fl import ClientUpdate, TrainConfig


def brute_force_mean(vectors, weights):
    """Independent weighted mean: plain Python floats, per coordinate."""
    total = float(sum(weights))
    return [sum(w * float(v[i]) for v, w in zip(vectors, weights)) / total
            for i in range(len(vectors[0]))]


def test_param_count_default_arch():
    assert fl.param_count() == 2762
    assert fl.init_params(0).shape == (2762,)


def test_generate_dataset_balanced_and_deterministic():
    ds = fl.generate_dataset(7, 10, 2, 2)
    assert len(ds) == 10 and np.bincount(ds.labels).tolist() == [5, 5]
    again = fl.generate_dataset(7, 10, 2, 2)
    assert ds.features.tobytes() == again.features.tobytes()
    assert ds.labels.tobytes() == again.labels.tobytes()
    big = fl.generate_dataset(7, 5000, 32, 10)
    assert np.bincount(big.labels).tolist() == [500] * 10
    assert big.features.dtype == np.float32


def test_generate_dataset_errors():
    with pytest.raises(fl.DimensionError):
        fl.generate_dataset(0, 5, 2, 10)
    with pytest.raises(fl.DimensionError):
        fl.generate_dataset(0, 10, 0, 2)


def test_train_and_test_share_class_means():
    train = fl.generate_dataset(3, 2000, 8, 4, "train")
    test = fl.generate_dataset(3, 2000, 8, 4, "test")
    for c in range(4):
        mt = train.features[train.labels == c].mean(axis=0)
        ms = test.features[test.labels == c].mean(axis=0)
        assert np.linalg.norm(mt - ms) < 0.3
        assert abs(np.linalg.norm(mt) - fl.CLASS_MEAN_RADIUS) < 0.3


def test_partition_iid():
    ds = fl.generate_dataset(1, 4000, 4, 10)
    shards = fl.partition_iid(ds, 4, 9)
    assert [len(s) for s in shards] == [1000] * 4
    small = fl.partition_iid(fl.generate_dataset(1, 10, 2, 2), 3, 9)
    assert [len(s) for s in small] == [4, 3, 3] == fl.shard_sizes(10, 3)
    again = fl.partition_iid(ds, 4, 9)
    assert all(a.labels.tobytes() == b.labels.tobytes() for a, b in zip(shards, again))
    with pytest.raises(fl.DimensionError):
        fl.partition_iid(small[1], 4, 0)


def test_partition_disjoint_union():
    ds = fl.generate_dataset(2, 103, 3, 5)
    rows = np.concatenate([s.features for s in fl.partition_iid(ds, 7, 1)])
    key = lambda a: sorted(map(bytes, a))
    assert key(rows) == key(ds.features)


def test_local_train_zero_lr_and_determinism():
    ds = fl.partition_iid(fl.generate_dataset(0, 400, 32, 10), 4, 0)[0]
    p = fl.init_params(1)
    before = p.copy()
    assert fl.local_train(p, ds, TrainConfig(learning_rate=0.0)).tobytes() == p.tobytes()
    a = fl.local_train(p, ds, TrainConfig(seed=5))
    b = fl.local_train(p, ds, TrainConfig(seed=5))
    assert a.tobytes() == b.tobytes()
    assert p.tobytes() == before.tobytes()
    assert a.tobytes() != p.tobytes()


def test_local_train_dimension_mismatch():
    ds = fl.generate_dataset(0, 40, 5, 10)
    with pytest.raises(fl.DimensionError):
        fl.local_train(fl.init_params(0), ds, TrainConfig())
    with pytest.raises(fl.DimensionError):
        fl.local_train(np.zeros(10, np.float32), fl.generate_dataset(0, 40, 32, 10), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(local_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = (rng.standard_normal(2762) * 0.3).astype(np.float64)
    ds = fl.generate_dataset(4, 64, 32, 10)
    x, y = ds.features.astype(np.float64), ds.labels
    _, grad = fl.loss_and_grad(params, x, y)
    for i in rng.choice(2762, 20, replace=False):
        h = 1e-5
        up, down = params.copy(), params.copy()
        up[i] += h
        down[i] -= h
        fd = (fl.loss_and_grad(up, x, y)[0] - fl.loss_and_grad(down, x, y)[0]) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-3 * max(abs(fd), 1e-4), (i, grad[i], fd)


def test_fedavg_examples():
    u = lambda d, p, n: ClientUpdate(d, 1, np.asarray(p, np.float32), n)
    assert fl.fedavg([u(0, [1, 3], 1), u(1, [3, 1], 1)]).tolist() == [2, 2]
    assert fl.fedavg([u(0, [0], 1), u(1, [4], 3)]).tolist() == [3]


def test_fedavg_errors():
    with pytest.raises(fl.AggregationError, match="at least one"):
        fl.fedavg([])
    a = ClientUpdate(0, 1, np.zeros(2, np.float32), 1)
    with pytest.raises(fl.AggregationError, match="mixed rounds"):
        fl.fedavg([a, ClientUpdate(1, 2, np.zeros(2, np.float32), 1)])
    with pytest.raises(fl.AggregationError, match="mismatched"):
        fl.fedavg([a, ClientUpdate(1, 1, np.zeros(3, np.float32), 1)])
    with pytest.raises(fl.AggregationError, match="positive"):
        ClientUpdate(0, 1, np.zeros(2), 0)


def test_fedavg_order_independent_of_input_order():
    rng = np.random.default_rng(0)
    ups = [ClientUpdate(d, 1, rng.standard_normal(50).astype(np.float32), int(rng.integers(1, 9)))
           for d in range(5)]
    assert fl.fedavg(ups).tobytes() == fl.fedavg(ups[::-1]).tobytes()


@settings(max_examples=200)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_fedavg_brute_force_oracle(k, n, seed):
    rng = np.random.default_rng(seed)
    vecs = [(rng.standard_normal(n) * 10).astype(np.float32) for _ in range(k)]
    weights = [int(w) for w in rng.integers(1, 1000, k)]
    out = fl.fedavg([ClientUpdate(d, 3, v, w) for d, (v, w) in enumerate(zip(vecs, weights))])
    expect = brute_force_mean(vecs, weights)
    assert np.max(np.abs(out.astype(np.float64) - expect)) <= 1e-6 * max(1.0, np.max(np.abs(expect)))


@settings(max_examples=200)
@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_fedavg_idempotent_and_convex(k, n, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n).astype(np.float32)
    same = [ClientUpdate(d, 1, v, int(rng.integers(1, 50))) for d in range(k)]
    assert fl.fedavg(same).tobytes() == v.tobytes()
    vecs = np.stack([rng.standard_normal(n).astype(np.float32) for _ in range(k)])
    out = fl.fedavg([ClientUpdate(d, 1, vecs[d], int(rng.integers(1, 50))) for d in range(k)])
    assert np.all(out >= vecs.min(axis=0)) and np.all(out <= vecs.max(axis=0))


def test_evaluate():
    test = fl.generate_dataset(0, 1000, 32, 10, "test")
    assert fl.evaluate(np.zeros(2762, np.float32), test) == 0.1
    one = test.subset(slice(0, 1))
    p = np.zeros(2762, np.float32)
    # output bias favouring the single sample's label
    p[-10 + int(one.labels[0])] = 1.0
    assert fl.evaluate(p, one) == 1.0
    with pytest.raises(fl.DimensionError):
        fl.evaluate(p, test.subset(slice(0, 0)))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_evaluate_matches_independent_counter(seed):
    rng = np.random.default_rng(seed)
    p = (rng.standard_normal(2762) * 0.5).astype(np.float32)
    test = fl.generate_dataset(seed, 50, 32, 10, "test")
    logits = fl.logits(p, test.features)
    wrong = sum(1 for row, y in zip(logits, test.labels) if int(np.argmax(row)) != y)
    acc = fl.evaluate(p, test)
    assert 0.0 <= acc <= 1.0
    assert acc == (50 - wrong) / 50


def test_device_train_seeds_distinct():
    seeds = {fl.device_train_seed(0, d, r) for d in range(4) for r in range(1, 6)}
    assert len(seeds) == 20
