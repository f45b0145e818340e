"""Savings accounting, knob attribution, saturation diagnostics and effort maps."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .counters import KNOBS, LayerTally, OpCounters
from .engine import dyve_forward, validate_config
from .errors import DyveError, ValidationError
from .knobs import KnobConfig, prediction_point, rearrange_odd_even
from .model import CONV, FC, RELU, Network, conv_out
from .reference import forward, pad_input

__all__ = [
    "OpCounters", "LayerTally", "EffortMap", "reduction_ratio", "knob_attribution",
    "conservation_residuals", "saturation_profile", "prediction_accuracy_profile",
    "effort_maps", "export_effort_map", "read_effort_map_csv", "read_pgm", "benchmark",
]


def reduction_ratio(baseline: OpCounters, dyve: OpCounters) -> float:
    """Baseline scalar ops over knob-engine scalar ops plus knob overhead."""
    denom = dyve.total_ops
    if denom <= 0:
        raise ValidationError("knob-engine op total is zero")
    return baseline.spent_ops / denom


def knob_attribution(counters: OpCounters) -> dict:
    """Saved ops per knob, as raw counts and as shares of the baseline total."""
    saved = counters.saved_by_knob()
    base = counters.baseline_ops
    return {
        "saved_ops": saved,
        "total_saved_ops": sum(saved.values()),
        "share_of_baseline": {k: (v / base if base else 0.0) for k, v in saved.items()},
    }


def conservation_residuals(counters: OpCounters) -> list[int]:
    """Per layer: baseline - spent - sum(knob savings). All zeros when accounting is exact."""
    return [t.baseline_ops - t.spent_ops - sum(t.saved[k] for k in KNOBS) for t in counters.layers]


def _saturating_layers(net: Network) -> list[int]:
    return [i for i, s in enumerate(net.layers)
            if s.kind in (CONV, FC) and i + 1 < len(net.layers) and net.layers[i + 1].kind == RELU]


def saturation_profile(net: Network, inputs) -> dict[int, float]:
    """Fraction of zero post-ReLU activations for each Conv layer, over all inputs."""
    layers = [i for i in _saturating_layers(net) if net.layers[i].kind == CONV]
    zeros = dict.fromkeys(layers, 0)
    total = dict.fromkeys(layers, 0)
    for x in inputs:
        tr = forward(net, x)
        for i in layers:
            act = tr.outputs[i + 1]
            zeros[i] += int(np.count_nonzero(act == 0))
            total[i] += act.size
    return {i: zeros[i] / total[i] for i in layers}


def _partial_and_full(x, spec, params, m: int):
    """Exact partial sums after the first ``m`` visited inputs, and full sums."""
    if spec.kind == FC:
        flat = x.reshape(-1).astype(np.float64)
        w = params.weight.astype(np.float64)
        acc = params.bias.astype(np.float64)
        partial = acc.copy() if m == 0 else None
        for idx, i in enumerate(rearrange_odd_even(spec.in_features)):
            acc += w[:, i] * flat[i]
            if idx + 1 == m:
                partial = acc.copy()
        return partial, acc
    k, s = spec.kernel, spec.stride
    h_out, w_out = conv_out(x.shape[1], k, s, spec.padding), conv_out(x.shape[2], k, s, spec.padding)
    xp = pad_input(x, spec.padding).astype(np.float64)
    w = params.weight.astype(np.float64)
    acc = np.empty((spec.out_channels, h_out, w_out))
    acc[:] = params.bias.astype(np.float64)[:, None, None]
    partial = acc.copy() if m == 0 else None
    rows, cols = s * (h_out - 1) + 1, s * (w_out - 1) + 1
    for idx, ch in enumerate(rearrange_odd_even(spec.in_channels)):
        for kr in range(k):
            for kc in range(k):
                acc += w[:, ch, kr, kc, None, None] * xp[ch, kr : kr + rows : s, kc : kc + cols : s]
        if idx + 1 == m:
            partial = acc.copy()
    return partial, acc


def prediction_accuracy_profile(net: Network, inputs, intervals=(0.25, 0.5, 0.75),
                                threshold: float = 0.0) -> dict:
    """How often a partial-sum saturation prediction matches the exact outcome.

    A neuron is predicted to saturate when its partial sum after
    ``ceil(interval * n)`` inputs is below ``threshold``; it actually saturates
    when its full pre-activation is <= 0. Each layer is fed its exact input.
    Returns ``{"overall": {interval: frac}, "per_layer": {layer: {interval: frac}}}``.
    """
    layers = _saturating_layers(net)
    hits = {(i, f): 0 for i in layers for f in intervals}
    count = dict.fromkeys(layers, 0)
    for x in inputs:
        tr = forward(net, x)
        for i in layers:
            spec = net.layers[i]
            xin = np.asarray(x if i == 0 else tr.outputs[i - 1])
            n = spec.in_channels if spec.kind == CONV else spec.in_features
            for f in intervals:
                m = n if f >= 1.0 else prediction_point(n, f)
                partial, full = _partial_and_full(xin, spec, net.params[i], m)
                hits[i, f] += int(np.count_nonzero((partial < threshold) == (full <= 0)))
            count[i] += int(np.prod(net.shapes[i]))
    per_layer = {i: {f: hits[i, f] / count[i] for f in intervals} for i in layers}
    total = sum(count.values())
    overall = {f: sum(hits[i, f] for i in layers) / total for f in intervals}
    return {"overall": overall, "per_layer": per_layer}


# ------------------------------------------------------------------ effort maps

@dataclass
class EffortMap:
    layer: int
    channel: int
    grid: np.ndarray  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValidationError("effort grid must be 2-D")
        if np.any(self.grid < 0) or np.any(self.grid > 1):
            raise ValidationError("effort values must lie in [0, 1]")


def effort_maps(trace, layer: int) -> list[EffortMap]:
    """One map per output channel of a Conv layer from a recorded knob-engine trace."""
    rec = trace.outcomes.get(layer)
    if rec is None or rec.ops_spent.ndim != 3:
        raise ValidationError(f"no conv outcomes recorded for layer {layer}")
    eff = rec.effort()
    return [EffortMap(layer, c, eff[c]) for c in range(eff.shape[0])]


def export_effort_map(emap: EffortMap, path, fmt: str = "pgm") -> Path:
    """Write a map as binary PGM (more work = darker) or as CSV of raw ratios."""
    path = Path(path)
    try:
        if fmt == "pgm":
            pix = np.rint(255.0 * (1.0 - emap.grid)).astype(np.uint8)
            h, w = pix.shape
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                for row in emap.grid:
                    writer.writerow([repr(float(v)) for v in row])
        else:
            raise ValidationError(f"unknown effort-map format {fmt!r}")
    except OSError as exc:
        raise DyveError(f"cannot write {path}: {exc}") from exc
    return path


def read_effort_map_csv(path, layer: int = -1, channel: int = -1) -> EffortMap:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return EffortMap(layer, channel, np.array(rows))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValidationError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ------------------------------------------------------------------ benchmark

def _timed_pair(net, cfg, x):
    t0 = time.perf_counter()
    rt = forward(net, x)
    t1 = time.perf_counter()
    dt = dyve_forward(net, x, cfg, record=False)
    return rt, dt, t1 - t0, time.perf_counter() - t1


def map_inputs(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally spread over threads; order is kept."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def benchmark(net: Network, inputs, labels, cfg: KnobConfig | None = None, threads: int = 1) -> dict:
    """Reference vs knob engine over a labelled set: ops, attribution, accuracy, time.

    Wall-clock times are informational only. Results are merged in input order,
    so the report does not depend on ``threads``.
    """
    cfg = KnobConfig.inert(len(net.layers)) if cfg is None else cfg
    validate_config(net, cfg)
    base = OpCounters.empty(len(net.layers))
    dyve = OpCounters.empty(len(net.layers))
    ok_base = ok_dyve = 0
    t_base = t_dyve = 0.0
    residual_ok = True
    runs = map_inputs(lambda x: _timed_pair(net, cfg, x), list(inputs), threads)
    for (rt, dt, tb, td), y in zip(runs, labels):
        t_base += tb
        t_dyve += td
        ok_base += int(rt.predicted == y)
        ok_dyve += int(dt.predicted == y)
        residual_ok &= not any(conservation_residuals(dt.counters))
        base.merge(rt.counters)
        dyve.merge(dt.counters)
    n = len(labels)
    attribution = knob_attribution(dyve)
    per_layer = []
    for i, (b, d) in enumerate(zip(base.layers, dyve.layers)):
        per_layer.append({
            "layer": i,
            "kind": net.layers[i].kind,
            "baseline_ops": b.spent_ops,
            "dyve_ops": d.spent_ops,
            "overhead_ops": d.overhead_ops,
            "saved": dict(d.saved),
            "saved_fraction": (1.0 - (d.spent_ops + d.overhead_ops) / b.spent_ops) if b.spent_ops else 0.0,
        })
    return {
        "inputs": n,
        "baseline_ops": base.spent_ops,
        "dyve_ops": dyve.spent_ops,
        "overhead_ops": dyve.overhead_ops,
        "overhead_share": dyve.overhead_ops / base.spent_ops if base.spent_ops else 0.0,
        "reduction_ratio": reduction_ratio(base, dyve),
        "per_layer": per_layer,
        "per_knob": attribution["saved_ops"],
        "per_knob_share_of_baseline": attribution["share_of_baseline"],
        "conservation_exact": bool(residual_ok and not any(conservation_residuals(dyve))),
        "accuracy_baseline": ok_base / n if n else 0.0,
        "accuracy_dyve": ok_dyve / n if n else 0.0,
        "wall_clock_informational": {"baseline_s": t_base, "dyve_s": t_dyve},
    }
