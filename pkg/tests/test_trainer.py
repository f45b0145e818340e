import numpy as np
import pytest

from dyve.data import (Dataset, dumps_dataset, generate_synthetic, holdout_split, load_cifar10_batch, loads_dataset)
from dyve.errors import BadMagicError, TrainingDivergedError, TruncatedBlobError, ValidationError
from dyve.knobs import KnobConfig
from dyve.model import Conv, FullyConnected, LayerParams, MaxPool, Network, ReLU, Softmax, build_network
from dyve.trainer import evaluate, loss_and_gradients, train
from conftest import small_net


def toy():
    """Conv -> ReLU -> MaxPool -> FC -> Softmax: two parametric layers."""
    layers = [Conv(2, 3, 3, 1, 1), ReLU(), MaxPool(2), FullyConnected(3 * 2 * 2, 4), Softmax()]
    return build_network(layers, (2, 4, 4), 4, seed=11)


def test_gradients_match_finite_differences():
    net = toy()
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (5, 2, 4, 4))
    y = rng.integers(0, 4, 5)
    weights = [None if p is None else (p.weight.astype(np.float64), p.bias.astype(np.float64) + rng.normal(0, 0.1, p.bias.shape))
               for p in net.params]
    _, grads = loss_and_gradients(net, x, y, weights)
    h = 1e-5
    checked = 0
    for li, wb in enumerate(weights):
        if wb is None:
            continue
        for which in (0, 1):
            arr, g = wb[which], grads[li][which]
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss_and_gradients(net, x, y, weights)[0]
                arr[idx] = old - h
                down = loss_and_gradients(net, x, y, weights)[0]
                arr[idx] = old
                num = (up - down) / (2 * h)
                assert abs(num - g[idx]) <= 1e-3 * max(abs(num), abs(g[idx])) + 1e-9, (li, which, idx)
                checked += 1
    assert checked == sum(p.weight.size + p.bias.size for p in net.params if p is not None)


def test_synthetic_determinism_and_balance():
    a = generate_synthetic(4, 25, seed=3)
    b = generate_synthetic(4, 25, seed=3)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(np.bincount(a.labels), [25] * 4)
    assert not np.array_equal(a.inputs, generate_synthetic(4, 25, seed=4).inputs)
    with pytest.raises(ValidationError):
        generate_synthetic(1, 5)


def test_holdout_split_disjoint():
    ds = holdout_split(generate_synthetic(3, 40, seed=0), 0.05, seed=1)
    assert (ds.splits == "tune").sum() == 6 and (ds.splits == "heldout").sum() == 114


def test_dataset_file_round_trip():
    ds = Dataset.concat([generate_synthetic(3, 4, seed=0), holdout_split(generate_synthetic(3, 4, seed=1), 0.25)])
    blob = dumps_dataset(ds)
    assert blob[:4] == b"DYVD" and blob[4] == 1
    back = loads_dataset(blob)
    for s in ("train", "tune", "heldout"):
        assert np.array_equal(back.split(s).inputs, ds.split(s).inputs)
        assert np.array_equal(back.split(s).labels, ds.split(s).labels)
    with pytest.raises(BadMagicError):
        loads_dataset(b"NOPE" + blob[4:])
    with pytest.raises(TruncatedBlobError):
        loads_dataset(blob[:-3])


def test_cifar_batch_reader(tmp_path):
    rng = np.random.default_rng(0)
    recs = rng.integers(0, 256, (3, 3073), dtype=np.uint8)
    recs[:, 0] = [1, 7, 9]
    (tmp_path / "b.bin").write_bytes(recs.tobytes())
    ds = load_cifar10_batch(tmp_path / "b.bin")
    assert ds.shape == (3, 32, 32) and list(ds.labels) == [1, 7, 9]
    assert ds.inputs[1, 0, 0, 0] == np.float32(recs[1, 1]) / np.float32(255)
    (tmp_path / "c.bin").write_bytes(recs.tobytes()[:-1])
    with pytest.raises(TruncatedBlobError):
        load_cifar10_batch(tmp_path / "c.bin")


def test_training_determinism_and_zero_lr():
    ds = generate_synthetic(4, 10, shape=(3, 8, 8), seed=0)
    template = small_net(seed=1)
    a = train(template, ds, epochs=2, lr=0.05, seed=5)
    b = train(template, ds, epochs=2, lr=0.05, seed=5)
    for p, q in zip(a.params, b.params):
        if p is not None:
            assert np.array_equal(p.weight, q.weight) and np.array_equal(p.bias, q.bias)
    frozen = train(template, ds, epochs=2, lr=0.0, seed=5, weight_decay=0.0)
    for p, q in zip(frozen.params, template.params):
        if p is not None:
            assert np.array_equal(p.weight, q.weight) and np.array_equal(p.bias, q.bias)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = generate_synthetic(4, 10, shape=(3, 8, 8), seed=0)
    with pytest.raises(TrainingDivergedError) as info:
        train(small_net(seed=1), ds, epochs=3, lr=1e12, seed=0)
    assert info.value.epoch in range(3) and f"epoch {info.value.epoch}" in str(info.value)


def test_constant_output_net_is_at_chance():
    net = small_net(seed=0, classes=10)
    params = list(net.params)
    fc = params[6]
    params[6] = LayerParams.build(np.zeros_like(fc.weight), np.zeros_like(fc.bias))
    flat = Network(net.layers, params, net.input_shape, 10)
    ds = generate_synthetic(10, 5, shape=(3, 8, 8), seed=2)
    assert evaluate(flat, ds) == 0.1


def test_two_class_noise_free_is_perfect():
    train_set = generate_synthetic(2, 40, shape=(3, 8, 8), seed=0, noise=0.0)
    test_set = generate_synthetic(2, 40, shape=(3, 8, 8), seed=1, noise=0.0)
    net = train(small_net(seed=0, classes=2), train_set, epochs=15, lr=0.05, seed=0)
    assert evaluate(net, train_set) == 1.0
    assert evaluate(net, test_set) == 1.0
    assert evaluate(net, test_set, "dyve", KnobConfig.inert(len(net.layers))) == 1.0


def test_evaluate_rejects_empty_and_bad_engine():
    net = small_net()
    ds = generate_synthetic(4, 2, shape=(3, 8, 8))
    with pytest.raises(ValidationError):
        evaluate(net, ds.split("tune"))
    with pytest.raises(ValidationError):
        evaluate(net, ds, "nope")


def test_fixture_quality(fixture_bundle):
    from dyve.metrics import saturation_profile

    assert fixture_bundle.heldout_accuracy >= 0.90
    assert fixture_bundle.train_accuracy >= fixture_bundle.heldout_accuracy - 0.1
    sat = saturation_profile(fixture_bundle.net, fixture_bundle.data.split("tune").inputs[:50])
    assert max(sat.values()) > 0.30
