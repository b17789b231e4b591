"""Normalized incremental performance (Omega_all) and its companions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalTrace:
    """Accuracy at each testing event, paired with the offline reference."""

    alpha: list[float] = field(default_factory=list)
    alpha_offline: list[float] = field(default_factory=list)
    n_classes: list[int] = field(default_factory=list)

    def append(self, alpha: float, alpha_offline: float, n_classes: int = 0):
        self.alpha.append(float(alpha))
        self.alpha_offline.append(float(alpha_offline))
        self.n_classes.append(int(n_classes))

    def __len__(self):
        return len(self.alpha)

    @property
    def events(self) -> list[tuple[int, float]]:
        return list(enumerate(self.alpha))

    def validate(self):
        if len(self.alpha) != len(self.alpha_offline):
            raise ValueError("alpha and alpha_offline lengths differ")
        for t, ref in enumerate(self.alpha_offline):
            if not ref > 0.0:
                raise ValueError(f"offline accuracy at event {t} is {ref}; must be > 0")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "alpha_offline": self.alpha_offline, "n_classes": self.n_classes}


def omega_all(trace: EvalTrace) -> float:
    """Mean over testing events of alpha_t / alpha_offline_t (not clamped)."""
    trace.validate()
    if len(trace) == 0:
        raise ValueError("omega_all of an empty trace is undefined")
    return math.fsum(a / r for a, r in zip(trace.alpha, trace.alpha_offline)) / len(trace)


def offline_mean(reference) -> float:
    reference = list(reference)
    if not reference:
        raise ValueError("offline_mean of an empty reference is undefined")
    return math.fsum(reference) / len(reference)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
