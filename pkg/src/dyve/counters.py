"""Scalar-operation tallies.

Counted work ("scalar ops") is the multiplies and adds of Conv/FC dot products
plus max-pool comparisons. Knob bookkeeping (threshold compares, region
statistics, neighbour averaging) goes to ``overhead_ops`` instead, so it can
never hide inside the useful-work total. ReLU and softmax are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

KNOBS = ("spet", "sdss", "sfma")


def _zero_saved() -> dict[str, int]:
    return dict.fromkeys(KNOBS, 0)


@dataclass
class LayerTally:
    multiplies: int = 0
    adds: int = 0
    compares: int = 0
    overhead_ops: int = 0
    baseline_ops: int = 0
    saved: dict[str, int] = field(default_factory=_zero_saved)

    @property
    def spent_ops(self) -> int:
        return self.multiplies + self.adds + self.compares

    def charge_exact(self, macs: int = 0, compares: int = 0) -> None:
        """Work done with no knob involved: counts toward both spent and baseline."""
        self.multiplies += macs
        self.adds += macs
        self.compares += compares
        self.baseline_ops += 2 * macs + compares

    def merge(self, other: "LayerTally") -> None:
        self.multiplies += other.multiplies
        self.adds += other.adds
        self.compares += other.compares
        self.overhead_ops += other.overhead_ops
        self.baseline_ops += other.baseline_ops
        for k in KNOBS:
            self.saved[k] += other.saved[k]

    def to_dict(self) -> dict:
        return {
            "multiplies": self.multiplies,
            "adds": self.adds,
            "compares": self.compares,
            "spent_ops": self.spent_ops,
            "overhead_ops": self.overhead_ops,
            "baseline_ops": self.baseline_ops,
            "saved": dict(self.saved),
        }


@dataclass
class OpCounters:
    layers: list[LayerTally]

    @classmethod
    def empty(cls, n_layers: int) -> "OpCounters":
        return cls([LayerTally() for _ in range(n_layers)])

    def _sum(self, attr: str) -> int:
        return sum(getattr(t, attr) for t in self.layers)

    @property
    def multiplies(self) -> int:
        return self._sum("multiplies")

    @property
    def adds(self) -> int:
        return self._sum("adds")

    @property
    def compares(self) -> int:
        return self._sum("compares")

    @property
    def overhead_ops(self) -> int:
        return self._sum("overhead_ops")

    @property
    def baseline_ops(self) -> int:
        return self._sum("baseline_ops")

    @property
    def spent_ops(self) -> int:
        return self._sum("spent_ops")

    @property
    def total_ops(self) -> int:
        """Spent scalar ops plus knob overhead."""
        return self.spent_ops + self.overhead_ops

    @property
    def attribution(self) -> dict[tuple[int, str], int]:
        return {(i, k): t.saved[k] for i, t in enumerate(self.layers) for k in KNOBS}

    def saved_by_knob(self) -> dict[str, int]:
        return {k: sum(t.saved[k] for t in self.layers) for k in KNOBS}

    def merge(self, other: "OpCounters") -> "OpCounters":
        if len(other.layers) != len(self.layers):
            raise ValueError("cannot merge counters of different networks")
        for a, b in zip(self.layers, other.layers):
            a.merge(b)
        return self

    def copy(self) -> "OpCounters":
        return OpCounters.empty(len(self.layers)).merge(self)

    def to_dict(self) -> dict:
        return {
            "multiplies": self.multiplies,
            "adds": self.adds,
            "compares": self.compares,
            "spent_ops": self.spent_ops,
            "overhead_ops": self.overhead_ops,
            "baseline_ops": self.baseline_ops,
            "per_layer": [t.to_dict() for t in self.layers],
        }
