"""Multiply counting, split by pipeline phase.

Counts are analytic: each instrumented operation adds the number of scalar
multiplies its algorithm performs, independent of how BLAS schedules them.
Counters from concurrent workers combine with ``merge`` or ``+``.
"""
from __future__ import annotations

from collections import Counter as _Tally

LOOP = "loop"
FIT = "fit"
PREDICT = "predict"
TRAIN = "train"


class ComplexityCounter:
    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._tally: _Tally[str] = _Tally()

    def add(self, phase: str, multiplies: int) -> None:
        if self.enabled:
            self._tally[phase] += int(multiplies)

    def __getitem__(self, phase: str) -> int:
        return self._tally.get(phase, 0)

    @property
    def total(self) -> int:
        return sum(self._tally.values())

    def phases(self) -> dict[str, int]:
        return dict(self._tally)

    def merge(self, other: "ComplexityCounter") -> "ComplexityCounter":
        self._tally.update(other._tally)
        return self

    def __add__(self, other: "ComplexityCounter") -> "ComplexityCounter":
        return ComplexityCounter(self.enabled or other.enabled).merge(self).merge(other)

    def reset(self) -> None:
        self._tally.clear()

    def __repr__(self):
        return f"ComplexityCounter({dict(self._tally)!r})"


def complexity_counter() -> ComplexityCounter:
    return ComplexityCounter()


def count(counter: ComplexityCounter | None, phase: str, multiplies: int) -> None:
    if counter is not None:
        counter.add(phase, multiplies)


def loop_multiplies(length: int, n_nodes: int, h: tuple[float, float], sigma: float = 0.0) -> int:
    """Multiplies of one loop pass over ``length`` samples.

    Every active tap costs eta*X and nu*J; a tap weight other than 0 or 1
    costs one more, as does a nonzero noise scale.
    """
    per_chip = 0
    for tap in h:
        if tap != 0:
            per_chip += 2 + (tap != 1)
    per_chip += sigma != 0
    return length * n_nodes * per_chip


def fit_multiplies(batch: int, n: int, q: int) -> int:
    """Closed-form ridge fit: Gram matrix, X^T Y, Cholesky, two triangular solves."""
    return batch * n * n + batch * n * q + n**3 // 6 + n * n * q
