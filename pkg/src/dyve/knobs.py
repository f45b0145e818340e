"""Knob configuration and the scalar building blocks of the three effort knobs.

* SPET: check a neuron's partial sum after a fraction of its (odd/even
  rearranged) inputs and stop early when the activation will saturate.
* SDSS: compute a strided subgrid of each output feature exactly and fill the
  remaining positions from neighbour averages when the neighbours are small
  and flat.
* SFMA: replace a window's dot product with ``mu * sum(w)`` when the kernel is
  insignificant and the input region has low variance.

The vectorised per-layer passes live in :mod:`dyve.engine`; the functions here
are the single-neuron/single-decision forms, and the engine's compiled kernels
share the predicate helpers defined below.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numba
import numpy as np

from .counters import LayerTally
from .errors import ConfigError, ParseError, ValidationError
from .tensor import welford

EXACT_FULL = 0
SPET_TERMINATED = 1
SDSS_APPROXIMATED = 2
PATH_NAMES = {EXACT_FULL: "ExactFull", SPET_TERMINATED: "SpetTerminated",
              SDSS_APPROXIMATED: "SdssApproximated"}

# pre-activation a SPET "saturate low" neuron emits; ReLU maps it to its floor
SATURATE_LOW_VALUE = 0.0


@dataclass
class LayerKnobs:
    """Hyper-parameters shared by every neuron of one layer."""

    spet_enabled: bool = False
    spet_l_thresh: float = -math.inf
    spet_u_thresh: float | None = None
    prediction_fraction: float = 0.5
    sdss_enabled: bool = False
    sp: int = 2
    max_act_thresh: float = 0.0
    del_act_thresh: float = 0.0
    sfma_enabled: bool = False
    wsig_thresh: float = 0.0
    fea_var_thresh: float = 0.0
    region_size: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sp < 1:
            raise ConfigError(f"sampling period must be >= 1, got {self.sp}")
        if not 0.0 < self.prediction_fraction < 1.0:
            raise ConfigError(f"prediction_fraction must lie in (0, 1), got {self.prediction_fraction}")
        for name in ("del_act_thresh", "wsig_thresh", "fea_var_thresh"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def spet_active(self) -> bool:
        """SPET can change a result only with a finite threshold."""
        if not self.spet_enabled:
            return False
        return self.spet_l_thresh > -math.inf or (
            self.spet_u_thresh is not None and self.spet_u_thresh < math.inf)

    @property
    def sdss_active(self) -> bool:
        return self.sdss_enabled and self.sp > 1

    @property
    def sfma_active(self) -> bool:
        return self.sfma_enabled and self.wsig_thresh > 0 and self.fea_var_thresh > 0

    @property
    def inert(self) -> bool:
        return not (self.spet_active or self.sdss_active or self.sfma_active)

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in list(d.items()):
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        if d["region_size"] is None:
            del d["region_size"]
        if d["spet_u_thresh"] is None:
            del d["spet_u_thresh"]
        return d

    @classmethod
    def from_json(cls, d: dict | None) -> "LayerKnobs":
        if not d:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown knob fields {sorted(unknown)}")
        d = dict(d)
        if d.get("spet_l_thresh") is None:
            d.pop("spet_l_thresh", None)
        return cls(**d)


class KnobConfig(list):
    """One :class:`LayerKnobs` per network layer (non-Conv/FC entries stay inert)."""

    @classmethod
    def inert(cls, n_layers: int) -> "KnobConfig":
        return cls(LayerKnobs() for _ in range(n_layers))

    def copy(self) -> "KnobConfig":
        return KnobConfig(LayerKnobs(**asdict(k)) for k in self)

    def to_json(self) -> list:
        return [k.to_json() for k in self]

    @classmethod
    def from_json(cls, doc) -> "KnobConfig":
        if not isinstance(doc, list):
            raise ConfigError("knob config must be a JSON array indexed by layer")
        return cls(LayerKnobs.from_json(d) for d in doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "KnobConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"knob config is not valid JSON: {exc}") from exc
        return cls.from_json(doc)


# ------------------------------------------------------------------ SPET

def rearrange_odd_even(n: int) -> np.ndarray:
    """Visit order: 0-based indices 0, 2, 4, ... then 1, 3, 5, ..."""
    if n < 1:
        raise ValidationError("need at least one input")
    return np.concatenate([np.arange(0, n, 2), np.arange(1, n, 2)]).astype(np.int64)


def prediction_point(n: int, fraction: float) -> int:
    return min(n, math.ceil(fraction * n))


def spet_dot(inputs, weights, bias: float, cfg: LayerKnobs, counters: LayerTally | None = None):
    """SPET-gated dot product over inputs already in visit order.

    Returns ``(pre_activation, terminated)``. A terminated neuron reports the
    saturated representative (0.0 for saturate-low, ``spet_u_thresh`` for
    saturate-high). Products accumulate in float64 onto the bias.
    """
    x = np.asarray(inputs, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float32)
    if x.shape != w.shape or x.ndim != 1 or x.size < 1:
        raise ValidationError(f"input/weight length mismatch: {x.shape} vs {w.shape}")
    n = x.size
    acc = float(np.float32(bias))
    check = prediction_point(n, cfg.prediction_fraction) if cfg.spet_active else n + 1
    done = n
    terminated = False
    overhead = 0
    for i in range(n):
        if i == check:
            overhead += 1 + (cfg.spet_u_thresh is not None)
            if acc < cfg.spet_l_thresh:
                acc, done, terminated = SATURATE_LOW_VALUE, i, True
                break
            if cfg.spet_u_thresh is not None and acc > cfg.spet_u_thresh:
                acc, done, terminated = float(cfg.spet_u_thresh), i, True
                break
        acc += float(w[i]) * float(x[i])
    if counters is not None:
        counters.multiplies += done
        counters.adds += done
        counters.overhead_ops += overhead
        counters.baseline_ops += 2 * n
        counters.saved["spet"] += 2 * (n - done)
    return acc, terminated


# ------------------------------------------------------------------ SDSS

def sdss_schedule(h: int, w: int, sp: int):
    """Split an h x w grid into the strided sample set and the row-major rest."""
    if h < 1 or w < 1 or sp < 1:
        raise ValidationError("grid dims and sampling period must be >= 1")
    sampled = {(r, c) for r in range(0, h, sp) for c in range(0, w, sp)}
    deferred = [(r, c) for r in range(h) for c in range(w) if (r, c) not in sampled]
    return sampled, deferred


def sampled_mask(h: int, w: int, sp: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.bool_)
    m[::sp, ::sp] = True
    return m


def neighbor_positions(r: int, c: int, h: int, w: int, sampled: np.ndarray) -> list[tuple[int, int]]:
    """Immediate 8-neighbours already known when (r, c) is visited in row-major order."""
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and (sampled[rr, cc] or (rr, cc) < (r, c)):
                out.append((rr, cc))
    return out


@numba.njit(cache=True)
def sdss_gate(vals, n, max_act, del_act):
    """Neighbour gate. Returns (approximate, average, overhead_ops)."""
    if n < 2:
        return False, 0.0, 0
    hi = vals[0]
    lo = vals[0]
    for i in range(1, n):
        if vals[i] > hi:
            hi = vals[i]
        if vals[i] < lo:
            lo = vals[i]
    overhead = 2 * (n - 1) + 2
    if hi < max_act and (hi - lo) < del_act:
        s = 0.0
        for i in range(n):
            s += vals[i]
        # n-1 adds for the sum, one multiply by 1/n
        return True, s / n, overhead + n
    return False, 0.0, overhead


def sdss_decide(neighbors, cfg: LayerKnobs, counters: LayerTally | None = None):
    """Return ``("approximate", avg)`` or ``("exact", None)`` for one deferred neuron."""
    vals = np.asarray(neighbors, dtype=np.float64).ravel()
    ok, avg, overhead = sdss_gate(vals, vals.size, float(cfg.max_act_thresh), float(cfg.del_act_thresh))
    if counters is not None:
        counters.overhead_ops += overhead
    return ("approximate", avg) if ok else ("exact", None)


# ------------------------------------------------------------------ SFMA

def default_region_size(k: int) -> int:
    return max(2 * k, 8)


def _axis_segments(n: int, k: int, size: int) -> list[tuple[int, int]]:
    if n <= size:
        return [(0, n - 1)]
    step = size - k
    segs, s = [], 0
    while True:
        end = min(s + size, n)
        segs.append((s, end - 1))
        if end == n:
            return segs
        s += step


def region_partition(h: int, w: int, k: int, region_size: int | None = None) -> list[tuple[int, int, int, int]]:
    """Tiles ``(r0, c0, r1, c1)`` (inclusive) overlapping by ``k`` on each axis.

    A feature no larger than ``region_size`` is one whole-feature region.
    """
    if k < 1:
        raise ConfigError("kernel size must be >= 1")
    size = default_region_size(k) if region_size is None else region_size
    if size <= k:
        raise ConfigError(f"region_size {size} must exceed kernel size {k}")
    if h <= size and w <= size:
        return [(0, 0, h - 1, w - 1)]
    return [(r0, c0, r1, c1)
            for r0, r1 in _axis_segments(h, k, size)
            for c0, c1 in _axis_segments(w, k, size)]


@dataclass(frozen=True)
class SfmaDecision:
    layer: int
    in_channel: int
    out_channel: int
    region: tuple[int, int, int, int]
    approximate: bool
    mu: float
    variance: float
    kernel_sum: float
    kernel_abs_sum: float


def sfma_screen(layer: int, in_channel: int, out_channel: int, feature: np.ndarray,
                kernel_sum: float, kernel_abs_sum: float, k: int, cfg: LayerKnobs,
                counters: LayerTally | None = None) -> list[SfmaDecision]:
    """Per-region SFMA decisions for one (input channel, output channel) kernel slice.

    ``feature`` is the 2-D input channel (the layer's post-activation input).
    """
    h, w = feature.shape
    out = []
    for reg in region_partition(h, w, k, cfg.region_size):
        r0, c0, r1, c1 = reg
        mean, var, _, _ = welford(feature[r0 : r1 + 1, c0 : c1 + 1])
        approx = bool(cfg.sfma_enabled and kernel_abs_sum < cfg.wsig_thresh and var < cfg.fea_var_thresh)
        if counters is not None:
            counters.overhead_ops += region_stats_cost((r1 - r0 + 1) * (c1 - c0 + 1)) + 2
        out.append(SfmaDecision(layer, in_channel, out_channel, reg, approx, mean, var,
                                float(kernel_sum), float(kernel_abs_sum)))
    return out


def region_stats_cost(n: int) -> int:
    """Sum and sum of squares (2n adds, n multiplies) plus two finalising multiplies."""
    return 3 * n + 2


def sfma_contribution(mu: float, kernel_sum: float, counters: LayerTally | None = None) -> float:
    """Grouped window term ``mu * sum(w)``: one multiply-accumulate."""
    if counters is not None:
        counters.multiplies += 1
        counters.adds += 1
    return float(mu) * float(np.float32(kernel_sum))
