"""Layer-wise greedy threshold search under an accuracy budget.

Layers are tuned front to back on the live network: while layer ``l`` is
searched, every earlier layer already runs with its chosen knobs. Each scalar
search bisects an index grid over ``[lower, upper]`` assuming accuracy falls
monotonically as the threshold grows.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import dyve_conv_forward, dyve_fc_forward, dyve_forward
from .errors import ValidationError
from .knobs import KnobConfig, LayerKnobs, prediction_point, region_partition
from .model import CONV, FC, RELU, Network
from .reference import apply_layer, forward
from .tensor import welford

log = logging.getLogger(__name__)

PARAMS = ("spet_l_thresh", "max_act_thresh", "del_act_thresh", "wsig_thresh", "fea_var_thresh")
DEFAULT_STEPS = 256
FEA_VAR_GRID = 8
FEA_VAR_SPAN = 1e-4  # smallest grid point relative to the upper bound


@dataclass
class ParamRange:
    lower: float
    upper: float
    resolution: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValidationError(f"range lower {self.lower} > upper {self.upper}")
        if not self.resolution > 0:
            raise ValidationError("resolution must be positive")

    @classmethod
    def from_bounds(cls, lower: float, upper: float, steps: int = DEFAULT_STEPS) -> "ParamRange":
        width = upper - lower
        return cls(float(lower), float(upper), width / steps if width > 0 else 1.0)

    @property
    def steps(self) -> int:
        return max(1, int(round((self.upper - self.lower) / self.resolution)))

    def value(self, j: int) -> float:
        if j >= self.steps:
            return self.upper
        return self.lower + j * (self.upper - self.lower) / self.steps


@dataclass
class TuningSet:
    """Labelled inputs the tuner scores configurations on."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValidationError("tuning set is empty")
        if len(self.inputs) != len(self.labels):
            raise ValidationError("tuning inputs and labels differ in length")

    @classmethod
    def from_dataset(cls, ds) -> "TuningSet":
        return cls(ds.inputs, ds.labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SearchStep:
    value: float
    correct: int
    accuracy: float
    op_reduction: float


@dataclass
class ParamResult:
    param: str
    lower: float
    upper: float
    resolution: float
    chosen: float
    flagged: bool = False
    trace: list[SearchStep] = field(default_factory=list)


@dataclass
class TuneReport:
    budget_pp: float
    tuning_inputs: int
    baseline_accuracy: float
    final_accuracy: float = 0.0
    final_op_reduction: float = 1.0
    layers: dict[int, list[ParamResult]] = field(default_factory=dict)
    flagged_layers: list[int] = field(default_factory=list)
    skipped_layers: dict[int, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return clean(asdict(self))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ range estimation

def tunable_layers(net: Network) -> list[int]:
    """Conv/FC layers followed by ReLU, in network order."""
    return [i for i, s in enumerate(net.layers)
            if s.kind in (CONV, FC) and i + 1 < len(net.layers) and net.layers[i + 1].kind == RELU]


def _prefix_sums(x, spec, params, m: int) -> np.ndarray:
    from .metrics import _partial_and_full
    return _partial_and_full(x, spec, params, m)[0]


def _neighbor_range_max(out: np.ndarray, sp: int) -> float:
    """Largest max-min over the computed 8-neighbours of any deferred position."""
    _, h, w = out.shape
    sampled = np.zeros((h, w), dtype=bool)
    sampled[::sp, ::sp] = True
    hi = np.full(out.shape, -np.inf)
    lo = np.full(out.shape, np.inf)
    count = np.zeros((h, w), dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            # neighbour (r+dr, c+dc) for every (r, c) that has one
            rs = slice(max(0, -dr), h - max(0, dr))
            cs = slice(max(0, -dc), w - max(0, dc))
            ns = slice(max(0, dr), h - max(0, -dr) if dr < 0 else h)
            nc = slice(max(0, dc), w - max(0, -dc) if dc < 0 else w)
            nval = out[:, ns, nc].astype(np.float64)
            avail = sampled[ns, nc] | (dr < 0) | ((dr == 0) & (dc < 0))
            if not np.any(avail):
                continue
            hi[:, rs, cs] = np.where(avail, np.maximum(hi[:, rs, cs], nval), hi[:, rs, cs])
            lo[:, rs, cs] = np.where(avail, np.minimum(lo[:, rs, cs], nval), lo[:, rs, cs])
            count[rs, cs] += avail
    ok = (~sampled) & (count >= 2)
    if not np.any(ok):
        return 0.0
    return float((hi - lo)[:, ok].max())


def estimate_ranges(net: Network, tuning: TuningSet, steps: int = DEFAULT_STEPS,
                    prediction_fraction: float = 0.5, sp: int = 2) -> dict[int, dict[str, ParamRange]]:
    """Per tunable layer, ``[0, observed max]`` for every threshold it can use.

    spet_l: largest partial sum at the prediction point; max_act: largest conv
    output; del_act: largest neighbour range seen by a deferred position;
    fea_var: largest region variance of the layer input; wsig: largest kernel
    absolute sum (a property of the weights, not the data).
    """
    if len(tuning) == 0:
        raise ValidationError("tuning set is empty")
    layers = tunable_layers(net)
    hi = {i: dict.fromkeys(PARAMS, 0.0) for i in layers}
    for x in tuning.inputs:
        tr = forward(net, x)
        for i in layers:
            spec, params = net.layers[i], net.params[i]
            xin = x if i == 0 else tr.outputs[i - 1]
            n = spec.in_channels if spec.kind == CONV else spec.in_features
            part = _prefix_sums(np.asarray(xin), spec, params, prediction_point(n, prediction_fraction))
            bounds = hi[i]
            bounds["spet_l_thresh"] = max(bounds["spet_l_thresh"], float(part.max()))
            if spec.kind != CONV:
                continue
            out = tr.outputs[i]
            bounds["max_act_thresh"] = max(bounds["max_act_thresh"], float(out.max()))
            bounds["del_act_thresh"] = max(bounds["del_act_thresh"], _neighbor_range_max(out, sp))
            _, h, w = xin.shape
            for r0, c0, r1, c1 in region_partition(h, w, spec.kernel):
                for ch in range(xin.shape[0]):
                    var = welford(np.asarray(xin[ch, r0 : r1 + 1, c0 : c1 + 1]))[1]
                    bounds["fea_var_thresh"] = max(bounds["fea_var_thresh"], float(var))
    ranges = {}
    for i in layers:
        b = hi[i]
        if net.layers[i].kind == CONV:
            b["wsig_thresh"] = float(net.params[i].kernel_abs_sum.max())
            names = PARAMS
        else:
            names = ("spet_l_thresh",)
        ranges[i] = {p: ParamRange.from_bounds(0.0, max(0.0, b[p]), steps) for p in names}
    return ranges


# ------------------------------------------------------------------ evaluation

class _Scorer:
    """Scores configurations starting at a cached layer input."""

    def __init__(self, net: Network, tuning: TuningSet, budget_pp: float):
        if budget_pp < 0:
            raise ValidationError("budget must be >= 0")
        self.net = net
        self.tuning = tuning
        self.start = 0
        self.xs = list(tuning.inputs)
        self.prefix_ops = 0
        base = [forward(net, x) for x in tuning.inputs]
        self.baseline_ops = sum(t.counters.spent_ops for t in base)
        self.base_correct = int(sum(t.predicted == y for t, y in zip(base, tuning.labels)))
        self.allowed = int(math.floor(budget_pp / 100.0 * len(tuning) + 1e-9))
        self.evaluations = 0

    def score(self, cfg: KnobConfig) -> tuple[int, int]:
        """(correct count, network ops including overhead) over the tuning set."""
        self.evaluations += 1
        correct, ops = 0, self.prefix_ops
        for x, y in zip(self.xs, self.tuning.labels):
            tr = dyve_forward(self.net, x, cfg, start=self.start, record=False)
            correct += tr.predicted == y
            ops += tr.counters.total_ops
        return int(correct), ops

    def feasible(self, correct: int) -> bool:
        return correct >= self.base_correct - self.allowed

    def advance(self, cfg: KnobConfig, stop: int) -> None:
        """Move the cached inputs forward to layer ``stop`` under ``cfg``."""
        from .counters import LayerTally

        for i in range(self.start, stop):
            spec, params = self.net.layers[i], self.net.params[i]
            tally = LayerTally()
            nxt = []
            for x in self.xs:
                t = LayerTally()
                if spec.kind == CONV:
                    y = dyve_conv_forward(x, spec, params, cfg[i], t)
                elif spec.kind == FC:
                    y = dyve_fc_forward(x, spec, params, cfg[i], t)
                else:
                    y = apply_layer(spec, params, x, t)
                tally.merge(t)
                nxt.append(y)
            self.xs = nxt
            self.prefix_ops += tally.spent_ops + tally.overhead_ops
        self.start = stop


def binary_search_param(param: str, layer: int, rng: ParamRange, net: Network, cfg: KnobConfig,
                        tuning: TuningSet | None = None, budget_pp: float = 0.5,
                        scorer: _Scorer | None = None) -> ParamResult:
    """Largest grid value of ``param`` on ``layer`` that keeps accuracy within budget.

    Bisection over ``rng.steps + 1`` grid points, other parameters held. ``cfg``
    is updated in place with the chosen value. If even ``rng.lower`` breaks the
    budget the lower bound is kept and the result is flagged.
    """
    if scorer is None:
        if tuning is None:
            raise ValidationError("need a tuning set or a scorer")
        scorer = _Scorer(net, tuning, budget_pp)
    knobs = cfg[layer]
    res = ParamResult(param, rng.lower, rng.upper, rng.resolution, rng.lower)
    n = len(scorer.tuning)
    tested: dict[int, bool] = {}

    def probe(j: int) -> bool:
        v = rng.value(j)
        setattr(knobs, param, v)
        correct, ops = scorer.score(cfg)
        red = scorer.baseline_ops / ops if ops else math.inf
        res.trace.append(SearchStep(v, correct, correct / n, red))
        tested[j] = scorer.feasible(correct)
        return tested[j]

    top = rng.steps
    if probe(top):
        best = top
    elif not probe(0):
        res.flagged = True
        best = 0
    else:
        lo, hi = 0, top
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if probe(mid):
                lo = mid
            else:
                hi = mid
        best = lo
    res.chosen = rng.value(best)
    setattr(knobs, param, res.chosen)
    return res


def _tune_sfma(layer, ranges, net, cfg, scorer) -> list[ParamResult]:
    knobs = cfg[layer]
    fv_hi = ranges["fea_var_thresh"].upper
    ws = ranges["wsig_thresh"]
    if fv_hi <= 0 or ws.upper <= 0:
        knobs.sfma_enabled = False
        return []
    knobs.sfma_enabled = True
    grid = np.geomspace(fv_hi * FEA_VAR_SPAN, fv_hi, FEA_VAR_GRID)
    best = None
    results = []
    for fv in grid:
        knobs.fea_var_thresh = float(fv)
        r = binary_search_param("wsig_thresh", layer, ws, net, cfg, scorer=scorer)
        results.append(r)
        if r.flagged or r.chosen <= 0:
            continue
        red = next(s.op_reduction for s in reversed(r.trace) if s.value == r.chosen)
        if best is None or red > best[0]:
            best = (red, float(fv), r.chosen)
    fv_res = ParamResult("fea_var_thresh", 0.0, fv_hi, fv_hi * FEA_VAR_SPAN, 0.0,
                         trace=[SearchStep(float(fv), -1, math.nan, math.nan) for fv in grid])
    if best is None:
        knobs.sfma_enabled = False
        knobs.wsig_thresh = knobs.fea_var_thresh = 0.0
    else:
        _, knobs.fea_var_thresh, knobs.wsig_thresh = best
        fv_res.chosen = knobs.fea_var_thresh
    return results + [fv_res]


def tune_network(net: Network, tuning: TuningSet, budget_pp: float = 0.5,
                 steps: int = DEFAULT_STEPS, ranges=None) -> tuple[KnobConfig, TuneReport]:
    """Greedy layer-by-layer search.

    Conv layers: joint (wsig, fea_var), then max_act, del_act and spet_l. FC
    layers feeding a ReLU: spet_l only. Layers whose activation is not a ReLU
    are left inert.
    """
    ranges = estimate_ranges(net, tuning, steps) if ranges is None else ranges
    scorer = _Scorer(net, tuning, budget_pp)
    cfg = KnobConfig.inert(len(net.layers))
    report = TuneReport(budget_pp, len(tuning), scorer.base_correct / len(tuning))
    for i, spec in enumerate(net.layers):
        if spec.kind not in (CONV, FC):
            continue
        if i not in ranges:
            report.skipped_layers[i] = "not followed by ReLU"
            continue
        scorer.advance(cfg, i)
        knobs, rng = cfg[i], ranges[i]
        results = []
        if spec.kind == CONV:
            results += _tune_sfma(i, rng, net, cfg, scorer)

            knobs.sdss_enabled = True
            knobs.del_act_thresh = rng["del_act_thresh"].upper
            r_max = binary_search_param("max_act_thresh", i, rng["max_act_thresh"], net, cfg, scorer=scorer)
            r_del = binary_search_param("del_act_thresh", i, rng["del_act_thresh"], net, cfg, scorer=scorer)
            results += [r_max, r_del]
            if r_max.flagged or r_del.flagged:
                knobs.sdss_enabled = False
                knobs.max_act_thresh = knobs.del_act_thresh = 0.0

        knobs.spet_enabled = True
        r_spet = binary_search_param("spet_l_thresh", i, rng["spet_l_thresh"], net, cfg, scorer=scorer)
        results.append(r_spet)
        if r_spet.flagged:
            knobs.spet_enabled = False
            knobs.spet_l_thresh = -math.inf
        if any(r.flagged for r in results):
            report.flagged_layers.append(i)
        report.layers[i] = results
        log.info("layer %d tuned: %s", i, knobs.to_json())

    final = _Scorer(net, tuning, budget_pp)
    correct, ops = final.score(cfg)
    report.final_accuracy = correct / len(tuning)
    report.final_op_reduction = final.baseline_ops / ops
    return cfg, report
