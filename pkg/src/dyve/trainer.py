"""Minimal SGD trainer and evaluation for the small fixture CNNs.

Training runs batched in float64 with an im2col lowering (training speed is not
what the knobs are about); the result is stored as a float32 :class:`Network`
and evaluated with the direct-loop engines.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset, generate_synthetic, holdout_split
from .errors import TrainingDivergedError, ValidationError
from .model import (
    CONV,
    FC,
    MAXPOOL,
    RELU,
    SOFTMAX,
    Conv,
    FullyConnected,
    LayerParams,
    MaxPool,
    Network,
    ReLU,
    Softmax,
    build_network,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ batched layers

def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, ho, wo, c, k, k)
    for kr in range(k):
        for kc in range(k):
            dx[:, :, kr : kr + stride * ho : stride, kc : kc + stride * wo : stride] += \
                d[:, :, :, :, kr, kc].transpose(0, 3, 1, 2)
    return dx[:, :, pad : pad + h, pad : pad + w]


def _forward(layers, weights, x):
    """Batched float64 forward. Returns (logits, caches)."""
    caches = []
    for spec, wb in zip(layers, weights):
        if spec.kind == CONV:
            w, b = wb
            cols, ho, wo = _im2col(x, spec.kernel, spec.stride, spec.padding)
            out = cols @ w.reshape(spec.out_channels, -1).T + b
            caches.append((cols, x.shape, ho, wo))
            x = out.transpose(0, 2, 1).reshape(x.shape[0], spec.out_channels, ho, wo)
        elif spec.kind == FC:
            w, b = wb
            flat = x.reshape(x.shape[0], -1)
            caches.append((flat, x.shape))
            x = flat @ w.T + b
        elif spec.kind == RELU:
            caches.append(x > 0)
            x = x * caches[-1]
        elif spec.kind == MAXPOOL:
            win = sliding_window_view(x, (spec.window, spec.window), axis=(2, 3))
            win = win[:, :, :: spec.stride, :: spec.stride]
            flat = win.reshape(win.shape[:4] + (-1,))
            arg = flat.argmax(axis=-1)
            caches.append((x.shape, arg))
            x = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        elif spec.kind == SOFTMAX:
            caches.append(None)
    return x, caches


def _loss_and_grads(layers, weights, x, y, weight_decay=0.0):
    logits, caches = _forward(layers, weights, x)
    logits = logits.reshape(len(x), -1)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(x)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        spec, cache = layers[i], caches[i]
        if spec.kind == SOFTMAX:
            continue
        if spec.kind == FC:
            w, _ = weights[i]
            flat, shape = cache
            grads[i] = (g.T @ flat + weight_decay * w, g.sum(axis=0))
            g = (g @ w).reshape(shape)
        elif spec.kind == RELU:
            g = g * cache
        elif spec.kind == MAXPOOL:
            shape, arg = cache
            win = spec.window
            dx = np.zeros(shape)
            ho, wo = arg.shape[2:]
            ar, ac = np.divmod(arg, win)
            nn_, cc_, rr, qq = np.indices(arg.shape)
            np.add.at(dx, (nn_, cc_, rr * spec.stride + ar, qq * spec.stride + ac), g)
            g = dx
        elif spec.kind == CONV:
            w, _ = weights[i]
            cols, x_shape, ho, wo = cache
            gm = g.reshape(g.shape[0], spec.out_channels, -1).transpose(0, 2, 1)
            dw = np.einsum("npo,npq->oq", gm, cols).reshape(w.shape)
            grads[i] = (dw + weight_decay * w, gm.sum(axis=(0, 1)))
            if i > 0:
                dcols = gm @ w.reshape(spec.out_channels, -1)
                g = _col2im(dcols, x_shape, spec.kernel, spec.stride, spec.padding, ho, wo)
    return loss, grads


def _weights64(net: Network):
    return [None if p is None else (p.weight.astype(np.float64), p.bias.astype(np.float64))
            for p in net.params]


def loss_and_gradients(net: Network, x, y, weights=None, weight_decay=0.0):
    """Mean cross-entropy of a batch and per-layer (dW, db) gradients (float64)."""
    weights = _weights64(net) if weights is None else weights
    return _loss_and_grads(net.layers, weights, np.asarray(x, dtype=np.float64), np.asarray(y), weight_decay)


# ------------------------------------------------------------------ training

def train(template: Network, dataset: Dataset, epochs: int, lr: float, seed: int = 0,
          batch_size: int = 32, weight_decay: float = 1e-4) -> Network:
    """Plain minibatch SGD from the template's weights. Deterministic in ``seed``."""
    if len(dataset) == 0:
        raise ValidationError("empty training set")
    if tuple(dataset.shape) != template.input_shape:
        raise ValidationError(f"dataset shape {dataset.shape} != network input {template.input_shape}")
    rng = np.random.default_rng(seed)
    weights = _weights64(template)
    x_all = dataset.inputs.astype(np.float64)
    y_all = dataset.labels
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _loss_and_grads(template.layers, weights, x_all[idx], y_all[idx], weight_decay)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss * len(idx)
            for wb, gd in zip(weights, grads):
                if wb is not None:
                    wb[0][...] -= lr * gd[0]
                    wb[1][...] -= lr * gd[1]
        log.info("epoch %d loss %.4f", epoch, total / len(order))
    params = [None if wb is None else LayerParams.build(wb[0], wb[1]) for wb in weights]
    return Network(list(template.layers), params, template.input_shape, template.class_count)


def predict(net: Network, dataset: Dataset, engine: str = "reference", cfg=None) -> np.ndarray:
    from .engine import dyve_forward
    from .reference import forward

    if engine == "reference":
        return np.array([forward(net, x).predicted for x in dataset.inputs], dtype=np.int64)
    if engine == "dyve":
        return np.array([dyve_forward(net, x, cfg, record=False).predicted for x in dataset.inputs],
                        dtype=np.int64)
    raise ValidationError(f"unknown engine {engine!r}")


def evaluate(net: Network, dataset: Dataset, engine: str = "reference", cfg=None) -> float:
    """Top-1 accuracy of ``net`` on ``dataset``."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty split")
    return float(np.mean(predict(net, dataset, engine, cfg) == dataset.labels))


# ------------------------------------------------------------------ fixture

FIXTURE_SHAPE = (3, 16, 16)


def fixture_layers(width: int = 16) -> list:
    """Three pooled conv stages (5x5 then 3x3) and a linear classifier, ~27k parameters."""
    return [
        Conv(3, width, 5, 1, 2), ReLU(), MaxPool(2),
        Conv(width, 2 * width, 3, 1, 1), ReLU(), MaxPool(2),
        Conv(2 * width, 4 * width, 3, 1, 1), ReLU(), MaxPool(2),
        FullyConnected(4 * width * 4, 10), Softmax(),
    ]


@dataclass
class Fixture:
    net: Network
    data: Dataset  # train + tune + heldout splits
    train_accuracy: float
    heldout_accuracy: float


def build_fixture(seed: int = 3, data_seed: int = 0, per_class_train: int = 200,
                  per_class_eval: int = 2000, epochs: int = 30, lr: float = 0.03,
                  noise: float = 0.04, soften: int = 1) -> Fixture:
    """Train the desk-scale fixture network on synthetic data.

    ``data_seed`` fixes the images; ``seed`` fixes weight init and batch order.
    The eval pool is split 5% tune / 95% heldout.
    """
    train_set = generate_synthetic(10, per_class_train, FIXTURE_SHAPE, seed=data_seed, noise=noise, soften=soften)
    eval_set = holdout_split(generate_synthetic(10, per_class_eval, FIXTURE_SHAPE, seed=data_seed + 1, noise=noise,
                                                 soften=soften),
                             0.05, seed=data_seed + 2)
    template = build_network(fixture_layers(), FIXTURE_SHAPE, 10, seed=seed)
    net = train(template, train_set, epochs=epochs, lr=lr, seed=seed)
    data = Dataset.concat([train_set, eval_set])
    return Fixture(net, data, evaluate(net, train_set), evaluate(net, eval_set.split("heldout")))
