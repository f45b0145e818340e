"""Dynamic-effort forward pass: SPET, SDSS and SFMA applied together.

Per Conv layer and output channel:

1. SFMA screens every (input channel, region) once per inference; approved
   windows enter a neuron's sum as the single grouped term ``mu * sum(w)``.
2. Positions on the SDSS subgrid (every position when SDSS is off) are
   evaluated with SPET over the odd/even channel order.
3. Remaining positions are visited row-major: each is either filled with its
   neighbours' mean or computed in full, without SPET.

FC layers get SPET only. The kernels are direct loops compiled with numba;
float64 accumulation follows the same order as :mod:`dyve.reference`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .counters import LayerTally, OpCounters
from .errors import ConfigError, ValidationError
from .knobs import (
    EXACT_FULL,
    PATH_NAMES,
    SATURATE_LOW_VALUE,
    SDSS_APPROXIMATED,
    SPET_TERMINATED,
    KnobConfig,
    LayerKnobs,
    prediction_point,
    rearrange_odd_even,
    region_partition,
    region_stats_cost,
    sdss_gate,
)
from .model import CONV, FC, RELU, LayerParams, LayerSpec, Network, conv_out
from .reference import ForwardTrace, apply_layer, check_input, pad_input
from .tensor import welford


@dataclass(frozen=True)
class NeuronOutcome:
    value: float
    path: str
    ops_spent: int
    ops_baseline: int
    overhead_ops: int


@dataclass
class LayerOutcomes:
    """Per-neuron record of one Conv/FC layer (arrays shaped like the output)."""

    layer: int
    values: np.ndarray
    path: np.ndarray
    ops_spent: np.ndarray
    ops_baseline: int
    overhead: np.ndarray
    saved: dict[str, np.ndarray]
    layer_overhead: int = 0

    def outcome(self, index) -> NeuronOutcome:
        return NeuronOutcome(float(self.values[index]), PATH_NAMES[int(self.path[index])],
                             int(self.ops_spent[index]), self.ops_baseline, int(self.overhead[index]))

    def effort(self) -> np.ndarray:
        """Fraction of the knob-free work each neuron actually spent."""
        return self.ops_spent / float(self.ops_baseline)


@dataclass
class DyveTrace(ForwardTrace):
    outcomes: dict[int, LayerOutcomes] = field(default_factory=dict)


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True, nogil=True)
def _region_table(xpad, pad, regions):
    n_ch = xpad.shape[0]
    n_reg = regions.shape[0]
    mu = np.zeros((n_ch, n_reg))
    var = np.zeros((n_ch, n_reg))
    for ch in range(n_ch):
        for j in range(n_reg):
            r0, c0, r1, c1 = regions[j, 0], regions[j, 1], regions[j, 2], regions[j, 3]
            m, v, _, _ = welford(xpad[ch, pad + r0 : pad + r1 + 1, pad + c0 : pad + c1 + 1])
            mu[ch, j] = m
            var[ch, j] = v
    return mu, var


@numba.njit(cache=True, inline="always")
def _eval_neuron(xpad, weight, bias, ksum, o, r, c, stride, perm, check,
                 spet_l, spet_u, use_u, approve, contains, mu):
    """One conv neuron. Returns (value, macs, saved_spet, saved_sfma, overhead, terminated)."""
    n_ch = weight.shape[1]
    k = weight.shape[2]
    k2 = k * k
    n_reg = contains.shape[2]
    acc = np.float64(bias[o])
    macs = 0
    saved_spet = 0
    saved_sfma = 0
    overhead = 0
    r_in = r * stride
    c_in = c * stride
    for idx in range(n_ch):
        if idx == check:
            overhead += 2 if use_u else 1
            low = acc < spet_l
            high = use_u and acc > spet_u
            if low or high:
                for rest in range(idx, n_ch):
                    ch2 = perm[rest]
                    grouped = False
                    for j in range(n_reg):
                        if contains[r, c, j] and approve[o, ch2, j]:
                            grouped = True
                            break
                    if grouped:
                        saved_spet += 2
                        saved_sfma += 2 * (k2 - 1)
                    else:
                        saved_spet += 2 * k2
                value = spet_u if high and not low else SATURATE_LOW_VALUE
                return value, macs, saved_spet, saved_sfma, overhead, True
        ch = perm[idx]
        jsel = -1
        for j in range(n_reg):
            if contains[r, c, j] and approve[o, ch, j]:
                jsel = j
                break
        if jsel >= 0:
            acc += mu[ch, jsel] * np.float64(ksum[o, ch])
            macs += 1
            saved_sfma += 2 * (k2 - 1)
        else:
            for kr in range(k):
                for kc in range(k):
                    acc += np.float64(weight[o, ch, kr, kc]) * np.float64(xpad[ch, r_in + kr, c_in + kc])
            macs += k2
    return acc, macs, saved_spet, saved_sfma, overhead, False


@numba.njit(cache=True, nogil=True)
def _conv_kernel(xpad, weight, bias, ksum, stride, perm, check, spet_l, spet_u, use_u,
                 sampled, sdss_on, max_act, del_act, approve, contains, mu,
                 out, path, spent, saved_spet, saved_sdss, saved_sfma, overhead):
    n_out, h_out, w_out = out.shape
    n_ch = weight.shape[1]
    k = weight.shape[2]
    baseline = 2 * n_ch * k * k
    # pass 1: subgrid (or everything), SPET enabled
    for o in range(n_out):
        for r in range(h_out):
            for c in range(w_out):
                if sdss_on and not sampled[r, c]:
                    continue
                v, macs, s_spet, s_sfma, ov, term = _eval_neuron(
                    xpad, weight, bias, ksum, o, r, c, stride, perm, check,
                    spet_l, spet_u, use_u, approve, contains, mu)
                out[o, r, c] = np.float32(v)
                path[o, r, c] = SPET_TERMINATED if term else EXACT_FULL
                spent[o, r, c] = 2 * macs
                saved_spet[o, r, c] = s_spet
                saved_sfma[o, r, c] = s_sfma
                overhead[o, r, c] = ov
    if not sdss_on:
        return
    # pass 2: deferred positions in row-major order
    vals = np.empty(8)
    for o in range(n_out):
        for r in range(h_out):
            for c in range(w_out):
                if sampled[r, c]:
                    continue
                n = 0
                for dr in range(-1, 2):
                    for dc in range(-1, 2):
                        if dr == 0 and dc == 0:
                            continue
                        rr = r + dr
                        cc = c + dc
                        if rr < 0 or rr >= h_out or cc < 0 or cc >= w_out:
                            continue
                        if sampled[rr, cc] or rr < r or (rr == r and cc < c):
                            vals[n] = np.float64(out[o, rr, cc])
                            n += 1
                ok, avg, ov = sdss_gate(vals, n, max_act, del_act)
                if ok:
                    out[o, r, c] = np.float32(avg)
                    path[o, r, c] = SDSS_APPROXIMATED
                    spent[o, r, c] = 0
                    saved_sdss[o, r, c] = baseline
                    overhead[o, r, c] = ov
                else:
                    v, macs, s_spet, s_sfma, ov2, term = _eval_neuron(
                        xpad, weight, bias, ksum, o, r, c, stride, perm, n_ch + 1,
                        spet_l, spet_u, use_u, approve, contains, mu)
                    out[o, r, c] = np.float32(v)
                    path[o, r, c] = EXACT_FULL
                    spent[o, r, c] = 2 * macs
                    saved_sfma[o, r, c] = s_sfma
                    overhead[o, r, c] = ov + ov2


@numba.njit(cache=True, nogil=True)
def _fc_kernel(x, weight, bias, perm, check, spet_l, spet_u, use_u,
               out, path, spent, saved_spet, overhead):
    n_out, n_in = weight.shape
    for o in range(n_out):
        acc = np.float64(bias[o])
        done = n_in
        term = False
        for idx in range(n_in):
            if idx == check:
                overhead[o] = 2 if use_u else 1
                if acc < spet_l:
                    acc = SATURATE_LOW_VALUE
                    term = True
                elif use_u and acc > spet_u:
                    acc = spet_u
                    term = True
                if term:
                    done = idx
                    break
            i = perm[idx]
            acc += np.float64(weight[o, i]) * np.float64(x[i])
        out[o] = np.float32(acc)
        path[o] = SPET_TERMINATED if term else EXACT_FULL
        spent[o] = 2 * done
        saved_spet[o] = 2 * (n_in - done)


# ------------------------------------------------------------------ layer passes

def _spet_args(cfg: LayerKnobs, n_inputs: int):
    if not cfg.spet_active:
        return n_inputs + 1, -np.inf, np.inf, False
    use_u = cfg.spet_u_thresh is not None
    return (prediction_point(n_inputs, cfg.prediction_fraction), float(cfg.spet_l_thresh),
            float(cfg.spet_u_thresh) if use_u else np.inf, use_u)


_CONTAINS_CACHE: dict = {}


def window_containment(h_in, w_in, h_out, w_out, k, stride, pad, regions) -> np.ndarray:
    """``contains[r, c, j]``: the k x k window of output (r, c) lies inside region j."""
    key = (h_in, w_in, h_out, w_out, k, stride, pad, tuple(map(tuple, regions)))
    hit = _CONTAINS_CACHE.get(key)
    if hit is not None:
        return hit
    top = np.arange(h_out) * stride - pad
    left = np.arange(w_out) * stride - pad
    contains = np.zeros((h_out, w_out, len(regions)), dtype=np.bool_)
    for j, (r0, c0, r1, c1) in enumerate(regions):
        rows = (top >= r0) & (top + k - 1 <= r1)
        cols = (left >= c0) & (left + k - 1 <= c1)
        contains[:, :, j] = rows[:, None] & cols[None, :]
    _CONTAINS_CACHE[key] = contains
    return contains


def dyve_conv_forward(x: np.ndarray, spec: LayerSpec, params: LayerParams, cfg: LayerKnobs,
                      tally: LayerTally | None = None, record: list | None = None,
                      layer_index: int = -1) -> np.ndarray:
    """Knob-enabled convolution. Appends a :class:`LayerOutcomes` to ``record`` if given."""
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ValidationError(f"conv expects {spec.in_channels} input channels, got shape {x.shape}")
    k, s, pad = spec.kernel, spec.stride, spec.padding
    n_ch, h_in, w_in = x.shape
    h_out, w_out = conv_out(h_in, k, s, pad), conv_out(w_in, k, s, pad)
    xpad = np.ascontiguousarray(pad_input(x, pad), dtype=np.float32)
    perm = rearrange_odd_even(n_ch)
    check, spet_l, spet_u, use_u = _spet_args(cfg, n_ch)

    layer_overhead = 0
    if cfg.sfma_active:
        regions = np.asarray(region_partition(h_in, w_in, k, cfg.region_size), dtype=np.int64)
        contains = window_containment(h_in, w_in, h_out, w_out, k, s, pad, regions)
        mu, var = _region_table(xpad, pad, regions)
        approve = ((params.kernel_abs_sum < cfg.wsig_thresh)[:, :, None]
                   & (var < cfg.fea_var_thresh)[None, :, :])
        sizes = (regions[:, 2] - regions[:, 0] + 1) * (regions[:, 3] - regions[:, 1] + 1)
        layer_overhead = (n_ch * sum(region_stats_cost(int(n)) for n in sizes)
                          + 2 * spec.out_channels * n_ch * len(regions))
    else:
        contains = np.zeros((h_out, w_out, 0), dtype=np.bool_)
        approve = np.zeros((spec.out_channels, n_ch, 0), dtype=np.bool_)
        mu = np.zeros((n_ch, 0))

    sdss_on = cfg.sdss_active
    sampled = np.zeros((h_out, w_out), dtype=np.bool_)
    sampled[:: cfg.sp if sdss_on else 1, :: cfg.sp if sdss_on else 1] = True

    shape = (spec.out_channels, h_out, w_out)
    out = np.empty(shape, dtype=np.float32)
    path = np.zeros(shape, dtype=np.int8)
    spent = np.zeros(shape, dtype=np.int64)
    s_spet, s_sdss, s_sfma = (np.zeros(shape, dtype=np.int64) for _ in range(3))
    overhead = np.zeros(shape, dtype=np.int64)
    _conv_kernel(xpad, params.weight, params.bias, params.kernel_sum, s, perm, check,
                 spet_l, spet_u, use_u, sampled, sdss_on,
                 float(cfg.max_act_thresh), float(cfg.del_act_thresh),
                 approve, contains, mu, out, path, spent, s_spet, s_sdss, s_sfma, overhead)

    baseline = 2 * n_ch * k * k
    if tally is not None:
        macs = int(spent.sum()) // 2
        tally.multiplies += macs
        tally.adds += macs
        tally.overhead_ops += int(overhead.sum()) + layer_overhead
        tally.baseline_ops += baseline * out.size
        tally.saved["spet"] += int(s_spet.sum())
        tally.saved["sdss"] += int(s_sdss.sum())
        tally.saved["sfma"] += int(s_sfma.sum())
    if record is not None:
        record.append(LayerOutcomes(layer_index, out, path, spent, baseline, overhead,
                                    {"spet": s_spet, "sdss": s_sdss, "sfma": s_sfma}, layer_overhead))
    return out


def dyve_fc_forward(x: np.ndarray, spec: LayerSpec, params: LayerParams, cfg: LayerKnobs,
                    tally: LayerTally | None = None, record: list | None = None,
                    layer_index: int = -1) -> np.ndarray:
    """Knob-enabled fully connected layer (SPET only)."""
    flat = np.ascontiguousarray(x.reshape(-1), dtype=np.float32)
    if flat.size != spec.in_features:
        raise ValidationError(f"fc expects {spec.in_features} inputs, got {flat.size}")
    n_out = spec.out_features
    perm = rearrange_odd_even(spec.in_features)
    check, spet_l, spet_u, use_u = _spet_args(cfg, spec.in_features)
    out = np.empty(n_out, dtype=np.float32)
    path = np.zeros(n_out, dtype=np.int8)
    spent = np.zeros(n_out, dtype=np.int64)
    s_spet = np.zeros(n_out, dtype=np.int64)
    overhead = np.zeros(n_out, dtype=np.int64)
    _fc_kernel(flat, params.weight, params.bias, perm, check, spet_l, spet_u, use_u,
               out, path, spent, s_spet, overhead)
    baseline = 2 * spec.in_features
    if tally is not None:
        macs = int(spent.sum()) // 2
        tally.multiplies += macs
        tally.adds += macs
        tally.overhead_ops += int(overhead.sum())
        tally.baseline_ops += baseline * n_out
        tally.saved["spet"] += int(s_spet.sum())
    if record is not None:
        zeros = np.zeros(n_out, dtype=np.int64)
        record.append(LayerOutcomes(layer_index, out, path, spent, baseline, overhead,
                                    {"spet": s_spet, "sdss": zeros, "sfma": zeros.copy()}))
    return out


# ------------------------------------------------------------------ network pass

def validate_config(net: Network, cfg: KnobConfig) -> None:
    if len(cfg) != len(net.layers):
        raise ConfigError(f"knob config has {len(cfg)} entries, network has {len(net.layers)} layers")
    for i, (spec, knobs) in enumerate(zip(net.layers, cfg)):
        if knobs.spet_active:
            if spec.kind not in (CONV, FC):
                raise ConfigError(f"layer {i}: SPET needs a Conv or FC layer")
            nxt = net.layers[i + 1].kind if i + 1 < len(net.layers) else None
            if nxt != RELU:
                raise ConfigError(f"layer {i}: SPET needs a saturating activation (ReLU) next")
        if (knobs.sdss_active or knobs.sfma_active) and spec.kind != CONV:
            raise ConfigError(f"layer {i}: SDSS/SFMA apply to Conv layers only")


def dyve_forward(net: Network, x, cfg: KnobConfig, start: int = 0, record: bool = True) -> DyveTrace:
    """Knob-enabled forward pass; ``start`` behaves as in :func:`dyve.reference.forward`."""
    validate_config(net, cfg)
    x = check_input(net, x) if start == 0 else np.ascontiguousarray(x, dtype=np.float32)
    counters = OpCounters.empty(len(net.layers))
    outputs = []
    rec: list = []
    for i in range(start, len(net.layers)):
        spec, params, tally = net.layers[i], net.params[i], counters.layers[i]
        if spec.kind == CONV:
            x = dyve_conv_forward(x, spec, params, cfg[i], tally, rec if record else None, i)
        elif spec.kind == FC:
            x = dyve_fc_forward(x, spec, params, cfg[i], tally, rec if record else None, i)
        else:
            x = apply_layer(spec, params, x, tally)
        outputs.append(x)
    scores = outputs[-1].reshape(-1)
    return DyveTrace(outputs, counters, int(np.argmax(scores)), scores, {o.layer: o for o in rec})
