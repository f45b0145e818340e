"""Activation/weight containers and the region statistics every knob decision uses.

Tensors are plain C-contiguous ``float32`` numpy arrays of rank 1 (vectors) or
rank 3 (channels, height, width). Statistics accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import BoundsError, ValidationError


@dataclass(frozen=True)
class RegionStats:
    mean: float
    variance: float
    max: float
    min: float

    @property
    def range(self) -> float:
        return self.max - self.min


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a finite, C-contiguous float32 tensor of rank 1 or 3."""
    t = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        t = t.reshape(tuple(shape))
    if t.ndim not in (1, 3):
        raise ValidationError(f"tensor rank must be 1 or 3, got shape {t.shape}")
    if t.size == 0 or min(t.shape) < 1:
        raise ValidationError(f"tensor dims must be >= 1, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValidationError("tensor contains NaN or Inf")
    return t


def channel_view(t: np.ndarray, channel: int) -> np.ndarray:
    """Zero-copy (height, width) read-only view of one channel."""
    if t.ndim != 3:
        raise ValidationError(f"channel_view needs a rank-3 tensor, got {t.shape}")
    if not 0 <= channel < t.shape[0]:
        raise BoundsError(f"channel {channel} out of range [0, {t.shape[0]})")
    view = t[channel]
    view.flags.writeable = False
    return view


@numba.njit(cache=True)
def welford(values):
    """Single-pass population mean/variance plus extrema of a 2-D block.

    Returns ``(mean, variance, max, min)``; variance divides by n.
    """
    n = 0
    mean = 0.0
    m2 = 0.0
    hi = -np.inf
    lo = np.inf
    for r in range(values.shape[0]):
        for c in range(values.shape[1]):
            x = np.float64(values[r, c])
            n += 1
            delta = x - mean
            mean += delta / n
            m2 += delta * (x - mean)
            if x > hi:
                hi = x
            if x < lo:
                lo = x
    var = m2 / n
    if var < 0.0:
        var = 0.0
    # rounding can push the running mean a hair outside [lo, hi]
    if mean > hi:
        mean = hi
    if mean < lo:
        mean = lo
    return mean, var, hi, lo


def region_stats(t: np.ndarray, channel: int, r0: int, c0: int, r1: int, c1: int) -> RegionStats:
    """Population statistics of ``t[channel, r0:r1+1, c0:c1+1]`` (bounds inclusive)."""
    plane = channel_view(t, channel)
    h, w = plane.shape
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise BoundsError(f"region ({r0},{c0})-({r1},{c1}) outside {h}x{w} feature")
    mean, var, hi, lo = welford(plane[r0 : r1 + 1, c0 : c1 + 1])
    return RegionStats(mean=mean, variance=var, max=hi, min=lo)
