"""Exact, knob-free forward pass: the correctness oracle and the savings baseline.

Every Conv/FC neuron accumulates in float64, starting from its bias and then
visiting inputs in the odd/even order of :func:`dyve.knobs.rearrange_odd_even`
(input channels for Conv, row-major within each window; scalar inputs for FC).
The knob engine uses the same order, so the two agree bit-for-bit whenever no
knob changes a neuron.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counters import LayerTally, OpCounters
from .errors import ShapeInferenceError, ValidationError
from .knobs import rearrange_odd_even
from .model import CONV, FC, MAXPOOL, RELU, SOFTMAX, LayerParams, LayerSpec, Network, conv_out


@dataclass
class ForwardTrace:
    outputs: list[np.ndarray]
    counters: OpCounters
    predicted: int
    scores: np.ndarray


def pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv_forward_exact(x: np.ndarray, spec: LayerSpec, params: LayerParams,
                       tally: LayerTally | None = None) -> np.ndarray:
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ValidationError(f"conv expects {spec.in_channels} input channels, got shape {x.shape}")
    k, s = spec.kernel, spec.stride
    h_out = conv_out(x.shape[1], k, s, spec.padding)
    w_out = conv_out(x.shape[2], k, s, spec.padding)
    if h_out < 1 or w_out < 1:
        raise ValidationError(f"kernel {k} does not fit input {x.shape}")
    xp = pad_input(x, spec.padding).astype(np.float64)
    w = params.weight.astype(np.float64)
    acc = np.empty((spec.out_channels, h_out, w_out))
    acc[:] = params.bias.astype(np.float64)[:, None, None]
    rows, cols = s * (h_out - 1) + 1, s * (w_out - 1) + 1
    for ch in rearrange_odd_even(spec.in_channels):
        for kr in range(k):
            for kc in range(k):
                acc += w[:, ch, kr, kc, None, None] * xp[ch, kr : kr + rows : s, kc : kc + cols : s]
    if tally is not None:
        tally.charge_exact(macs=spec.out_channels * h_out * w_out * spec.in_channels * k * k)
    return acc.astype(np.float32)


def fc_forward_exact(x: np.ndarray, spec: LayerSpec, params: LayerParams,
                     tally: LayerTally | None = None) -> np.ndarray:
    flat = x.reshape(-1).astype(np.float64)
    if flat.size != spec.in_features:
        raise ValidationError(f"fc expects {spec.in_features} inputs, got {flat.size}")
    w = params.weight.astype(np.float64)
    acc = params.bias.astype(np.float64)
    for i in rearrange_odd_even(spec.in_features):
        acc += w[:, i] * flat[i]
    if tally is not None:
        tally.charge_exact(macs=spec.out_features * spec.in_features)
    return acc.astype(np.float32)


def relu(t: np.ndarray, tally: LayerTally | None = None) -> np.ndarray:
    # activation work is outside the counted scalar ops
    return np.maximum(t, np.float32(0.0))


def maxpool(t: np.ndarray, spec: LayerSpec, tally: LayerTally | None = None) -> np.ndarray:
    if t.ndim != 3:
        raise ValidationError(f"max-pool needs a rank-3 input, got {t.shape}")
    win, s = spec.window, spec.stride
    h_out, w_out = conv_out(t.shape[1], win, s, 0), conv_out(t.shape[2], win, s, 0)
    if h_out < 1 or w_out < 1:
        raise ValidationError(f"pool window {win} does not fit {t.shape}")
    rows, cols = s * (h_out - 1) + 1, s * (w_out - 1) + 1
    out = t[:, 0:rows:s, 0:cols:s].copy()
    for dr in range(win):
        for dc in range(win):
            if dr or dc:
                np.maximum(out, t[:, dr : dr + rows : s, dc : dc + cols : s], out=out)
    if tally is not None:
        tally.charge_exact(compares=t.shape[0] * h_out * w_out * (win * win - 1))
    return out


def softmax(t: np.ndarray) -> np.ndarray:
    z = t.reshape(-1).astype(np.float64)
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(np.float32)


def apply_layer(spec: LayerSpec, params, x: np.ndarray, tally: LayerTally | None = None) -> np.ndarray:
    if spec.kind == CONV:
        return conv_forward_exact(x, spec, params, tally)
    if spec.kind == FC:
        return fc_forward_exact(x, spec, params, tally)
    if spec.kind == RELU:
        return relu(x, tally)
    if spec.kind == MAXPOOL:
        return maxpool(x, spec, tally)
    if spec.kind == SOFTMAX:
        return softmax(x)
    raise ValidationError(f"unsupported layer kind {spec.kind}")


def check_input(net: Network, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != net.input_shape:
        raise ShapeInferenceError(f"input shape {x.shape} != network input {net.input_shape}")
    return x


def forward(net: Network, x, start: int = 0) -> ForwardTrace:
    """Run the exact network. With ``start > 0``, ``x`` is the input of layer ``start``."""
    x = check_input(net, x) if start == 0 else np.ascontiguousarray(x, dtype=np.float32)
    counters = OpCounters.empty(len(net.layers))
    outputs = []
    for i in range(start, len(net.layers)):
        x = apply_layer(net.layers[i], net.params[i], x, counters.layers[i])
        outputs.append(x)
    scores = outputs[-1].reshape(-1)
    return ForwardTrace(outputs, counters, int(np.argmax(scores)), scores)
