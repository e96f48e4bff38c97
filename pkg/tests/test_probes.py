import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from herdkit.config import ExperimentConfig, ProbeConfig
from herdkit.data import load_cifar10
from herdkit.herd import build_pool
from herdkit.models import init_model
from herdkit.probes import (
    EmbeddingTable, evaluation_hook, extract_embeddings, knn_probe, knn_predict, linear_probe,
    macro_f1, mlp_probe,
)

from oracles import knn_oracle, macro_f1_oracle, state_bytes


def table(x, y):
    return EmbeddingTable(torch.as_tensor(np.asarray(x)), np.asarray(y))


@pytest.fixture(scope="module")
def tiny_sets(tiny_cifar):
    return load_cifar10(tiny_cifar, "train"), load_cifar10(tiny_cifar, "test")


def test_extract_shapes_and_concat(tiny_sets):
    train, _ = tiny_sets
    m1, m2 = init_model("simple_cnn", 1), init_model("simple_cnn", 2)
    one = extract_embeddings([m1], train, subset=10)
    two = extract_embeddings([m1, m2], train, subset=10, peer_ids=[1, 2])
    assert one.features.shape == (10, 16384)
    assert two.features.shape == (10, 32768)
    assert two.source_peer_ids == (1, 2)
    assert torch.equal(two.features[:, :16384], one.features)
    assert torch.equal(extract_embeddings([m1], train, subset=10).features, one.features)
    assert np.array_equal(one.labels, train.labels[:10])


def test_extract_does_not_touch_model(tiny_sets):
    m = init_model("simple_cnn", 3)
    before = state_bytes(m)
    extract_embeddings([m], tiny_sets[0], subset=20)
    assert state_bytes(m) == before
    assert m.training


def test_knn_examples():
    train = table([[0.0, 0.0], [5.0, 5.0], [9.0, 0.0]], [3, 1, 2])
    assert knn_probe(train, table([[5.0, 5.0]], [1]), k=1).accuracy == 100.0
    single = table([[1.0, 1.0]], [4])
    preds = knn_predict(single, torch.tensor([[0.0, 0.0], [10.0, 3.0]]), k=5, num_classes=10)
    assert preds.tolist() == [4, 4]
    with pytest.raises(ValueError):
        knn_probe(table(np.zeros((0, 2)), []), table([[0.0, 0.0]], [0]))


def test_knn_tie_broken_by_summed_distance():
    # k=4: two votes each for class 0 (near) and class 1 (far)
    train = table([[1.0], [-1.0], [3.0], [-3.0]], [0, 0, 1, 1])
    preds = knn_predict(train, torch.tensor([[0.0]]), k=4, num_classes=2)
    assert preds.tolist() == [0]
    train = table([[1.0], [-1.5], [3.0], [-1.2]], [1, 0, 0, 1])
    assert knn_predict(train, torch.tensor([[0.0]]), k=4, num_classes=2).tolist() == [1]


def test_knn_planar_toy_matches_oracle():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-1, 1, (20, 2)), rng.normal(1, 1, (20, 2))])
    y = np.array([0] * 20 + [1] * 20)
    q = rng.normal(0, 1.5, (25, 2))
    preds = knn_predict(table(x, y), torch.as_tensor(q), k=5, num_classes=2)
    assert preds.tolist() == knn_oracle(x, y, q, 5)


@pytest.mark.parametrize("seed", range(10))
def test_knn_random_instances_match_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n_fit = int(rng.integers(1, 48))
    n_q = int(rng.integers(1, 64 - n_fit + 1))
    d = int(rng.integers(1, 6))
    k = int(rng.integers(1, 9))
    x = rng.normal(size=(n_fit, d))
    y = rng.integers(0, 4, n_fit)
    q = rng.normal(size=(n_q, d))
    assert knn_predict(table(x, y), torch.as_tensor(q), k, 4).tolist() == knn_oracle(x, y, q, k)


def test_knn_cosine_metric():
    train = table([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    preds = knn_predict(train, torch.tensor([[10.0, 1.0]]), k=1, num_classes=2, metric="cosine")
    assert preds.tolist() == [0]


def test_macro_f1_examples():
    labels = np.repeat(np.arange(10), 100)
    assert macro_f1(labels, labels, 10) == 100.0
    all_zero = macro_f1(np.zeros_like(labels), labels, 10)
    assert all_zero == pytest.approx(100 * (2 * 0.1 * 1 / 1.1) / 10)
    assert all_zero == pytest.approx(1.818, abs=1e-3)
    with pytest.raises(ValueError):
        macro_f1([0, 1], [0], 10)


def test_macro_f1_absent_class_counts_zero():
    assert macro_f1([0, 1], [0, 1], 4) == pytest.approx(50.0)


def test_macro_f1_random_predictions_near_chance():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(10), 1000)
    preds = rng.integers(0, 10, labels.size)
    assert abs(macro_f1(preds, labels, 10) - 10.0) <= 1.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60),
       st.randoms(use_true_random=False))
def test_macro_f1_oracle_and_permutation_invariance(pairs, rnd):
    preds, labels = map(list, zip(*pairs))
    score = macro_f1(preds, labels, 6)
    assert score == pytest.approx(macro_f1_oracle(preds, labels, 6), abs=1e-9)
    rnd.shuffle(pairs)
    p2, l2 = map(list, zip(*pairs))
    assert macro_f1(p2, l2, 6) == pytest.approx(score, abs=1e-9)
    assert 0 <= score <= 100


def test_linear_probe_separable():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.5, (100, 5)), rng.normal(3, 0.5, (100, 5))])
    y = np.array([0] * 100 + [1] * 100)
    fit = table(x.astype(np.float32), y)
    res = linear_probe(fit, fit, ProbeConfig(probe_batch_size=16))
    assert res.macro_f1 == 100.0 and res.accuracy == 100.0
    assert (res.train_size, res.test_size) == (200, 200)


def test_linear_probe_zero_init_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 8)).astype(np.float32)
    y = rng.integers(0, 10, 64)
    a = linear_probe(table(x, y), table(x, y), ProbeConfig(probe_epochs=3), seed=4)
    b = linear_probe(table(x, y), table(x, y), ProbeConfig(probe_epochs=3), seed=4)
    assert a == b


def test_linear_probe_permuted_labels_chance():
    scores = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        centers = rng.normal(0, 1, (10, 32))
        y_train = rng.integers(0, 10, 2000)
        y_test = rng.integers(0, 10, 2000)
        x_train = (centers[y_train] + rng.normal(0, 1, (2000, 32))).astype(np.float32)
        x_test = (centers[y_test] + rng.normal(0, 1, (2000, 32))).astype(np.float32)
        shuffled = rng.permutation(y_train)
        res = linear_probe(table(x_train, shuffled), table(x_test, y_test), ProbeConfig(),
                           seed=seed, num_classes=10)
        scores.append(res.macro_f1)
    assert abs(np.mean(scores) - 10.0) <= 3.0


def _xor(n, rng):
    x = rng.uniform(-1, 1, (n, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
    return x.astype(np.float32), y


def test_mlp_solves_xor_linear_does_not():
    rng = np.random.default_rng(0)
    x, y = _xor(2000, rng)
    xt, yt = _xor(1000, rng)
    cfg = ProbeConfig(probe_epochs=300, probe_lr=0.5, probe_batch_size=64, mlp_hidden=64)
    mlp = mlp_probe(table(x, y), table(xt, yt), cfg, seed=1)
    lin = linear_probe(table(x, y), table(xt, yt), cfg, seed=1)
    assert mlp.accuracy > 90
    assert abs(lin.accuracy - 50) < 10


def test_mlp_zero_width_rejected():
    with pytest.raises(ValueError):
        ProbeConfig(mlp_hidden=0)


def _hook_cfg(every, **kw):
    return ExperimentConfig(
        dataset_dir="unused", num_peers=3, eval_every_batches=every,
        probe_config=ProbeConfig(fit_subset=40, test_subset=20, probe_epochs=2,
                                 hook_probes=("knn", "linear", "mlp"), mlp_hidden=8, **kw))


def test_hook_disabled_gives_no_rows(tiny_sets):
    cfg = _hook_cfg(0)
    pool = build_pool(cfg)
    assert evaluation_hook(pool.peers, 0, cfg, *tiny_sets) == []


def test_hook_deterministic_and_isolated(tiny_sets):
    cfg = _hook_cfg(50, hook_peers=(0, 2))
    pool = build_pool(cfg)
    before = [state_bytes(m, o) for m, o in zip(pool.peers, pool.optimizers)]
    a = evaluation_hook(pool.peers, 50, cfg, *tiny_sets)
    b = evaluation_hook(pool.peers, 50, cfg, *tiny_sets)
    assert a == b
    assert [(r.peer_id, r.result.probe_kind) for r in a] == [
        (0, "knn"), (0, "linear"), (0, "mlp"), (2, "knn"), (2, "linear"), (2, "mlp")]
    assert all(r.result.train_size == 40 and r.result.test_size == 20 for r in a)
    assert [state_bytes(m, o) for m, o in zip(pool.peers, pool.optimizers)] == before
    assert all(m.training for m in pool.peers)
