"""Measurement outcomes of a single monitoring step.

Quantum-jump records store outcomes as integer labels: 0 for no jump and
``k >= 1`` for a jump through channel ``k - 1``.  Diffusive records store
the Wiener increments directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NO_JUMP_LABEL = 0


@dataclass(frozen=True)
class NoJump:
    label: int = NO_JUMP_LABEL


@dataclass(frozen=True)
class Jump:
    """Jump through channel ``channel`` (0-based index into ``model.channels``)."""

    channel: int

    def __post_init__(self):
        if self.channel < 0:
            raise ValueError("channel index must be non-negative")

    @property
    def label(self) -> int:
        return self.channel + 1


@dataclass(frozen=True)
class Diffusive:
    dw: np.ndarray

    def __post_init__(self):
        dw = np.atleast_1d(np.asarray(self.dw, dtype=float)).copy()
        if dw.ndim != 1:
            raise ValueError("Wiener increments must form a vector")
        dw.setflags(write=False)
        object.__setattr__(self, "dw", dw)

    def __eq__(self, other):
        return isinstance(other, Diffusive) and np.array_equal(self.dw, other.dw)

    __hash__ = None


MeasurementOutcome = NoJump | Jump | Diffusive


def from_label(label: int) -> NoJump | Jump:
    label = int(label)
    return NoJump() if label == NO_JUMP_LABEL else Jump(label - 1)


def to_label(outcome) -> int:
    """Integer label of a discrete outcome; plain integers pass through."""
    if isinstance(outcome, (NoJump, Jump)):
        return outcome.label
    if isinstance(outcome, (int, np.integer)):
        return int(outcome)
    raise TypeError(f"not a discrete outcome: {outcome!r}")
