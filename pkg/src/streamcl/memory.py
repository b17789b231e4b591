"""Fixed-capacity episodic memory over embeddings.

Entries carry the scores used by the loss-aware replacement policies and the
replay samplers. Replacement: LAWCBR (evict from the majority class, weighted
by inverse loss) and LAWRRR (reservoir admission, then evict with weight
class-count / loss). Replay selection: uniform, or half highest / half lowest
by uncertainty (UAPN) or by loss (LAPN).
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

LOSS_FLOOR = 1e-8


class ReplacementPolicy(str, enum.Enum):
    LAWCBR = "lawcbr"
    LAWRRR = "lawrrr"


class SamplingStrategy(str, enum.Enum):
    UNIFORM = "uniform"
    UAPN = "uapn"
    LAPN = "lapn"


@dataclass
class MemoryEntry:
    z: np.ndarray
    y: int
    h: np.ndarray
    loss: float
    uncertainty: float
    order: int = -1  # insertion stamp, assigned by the buffer; used for tie-breaking

    def __post_init__(self):
        self.y = int(self.y)
        self.loss = float(self.loss)
        self.uncertainty = float(self.uncertainty)
        if not (np.isfinite(self.loss) and self.loss >= 0.0):
            raise ValueError(f"entry loss must be finite and >= 0, got {self.loss}")
        if not (np.isfinite(self.uncertainty) and self.uncertainty >= 0.0):
            raise ValueError(f"entry uncertainty must be finite and >= 0, got {self.uncertainty}")


class InsertReport(NamedTuple):
    stored: bool
    index: int | None  # slot holding the new entry
    victim: MemoryEntry | None  # entry that was evicted, if any


@dataclass
class ReplayBuffer:
    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)
    seen_count: int = 0
    class_counts: Counter = field(default_factory=Counter)
    _stamp: int = 0

    def __post_init__(self):
        if int(self.capacity) < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {self.capacity}")
        self.capacity = int(self.capacity)

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def check(self):
        """Assert the structural invariants; cheap enough for tests, not hot loops."""
        assert len(self.entries) <= self.capacity
        recount = Counter(e.y for e in self.entries)
        assert +self.class_counts == recount, (self.class_counts, recount)
        assert self.seen_count >= len(self.entries)

    def insert(self, entry: MemoryEntry, policy: ReplacementPolicy, rng: np.random.Generator) -> InsertReport:
        self.seen_count += 1
        entry.order = self._stamp
        self._stamp += 1
        if not self.full:
            self.entries.append(entry)
            self.class_counts[entry.y] += 1
            return InsertReport(True, len(self.entries) - 1, None)

        policy = ReplacementPolicy(policy)
        if policy is ReplacementPolicy.LAWCBR:
            idx = lawcbr_select_victim(self, rng)
        else:
            # reservoir admission: keep the newcomer with probability capacity / n
            if rng.random() * self.seen_count >= self.capacity:
                return InsertReport(False, None, None)
            idx = lawrrr_select_victim(self, rng)
        victim = self.entries[idx]
        self.class_counts[victim.y] -= 1
        if self.class_counts[victim.y] == 0:
            del self.class_counts[victim.y]
        self.entries[idx] = entry
        self.class_counts[entry.y] += 1
        return InsertReport(True, idx, victim)

    def update_scores(self, indices, new_losses, new_logits, new_uncertainties):
        update_scores(self, indices, new_losses, new_logits, new_uncertainties)

    def sample_replay(self, n: int, strategy: SamplingStrategy, rng: np.random.Generator) -> list[int]:
        return sample_replay(self, n, strategy, rng)

    def snapshot(self, bins: int = 10) -> dict:
        """Per-class counts and loss/uncertainty histograms for diagnostics."""
        losses = np.array([e.loss for e in self.entries])
        unc = np.array([e.uncertainty for e in self.entries])
        out = {
            "size": len(self.entries),
            "capacity": self.capacity,
            "seen_count": self.seen_count,
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
        }
        for name, vals in (("loss", losses), ("uncertainty", unc)):
            if len(vals):
                counts, edges = np.histogram(vals, bins=bins)
                out[f"{name}_hist"] = {"counts": counts.tolist(), "edges": edges.tolist()}
        return out


def _inverse_loss(entries) -> np.ndarray:
    return 1.0 / np.maximum(np.array([e.loss for e in entries]), LOSS_FLOOR)


def lawcbr_select_victim(buf: ReplayBuffer, rng: np.random.Generator) -> int:
    """Victim from the largest class (lowest label on ties), drawn with weight 1/loss."""
    top = max(buf.class_counts.values())
    majority = min(c for c, n in buf.class_counts.items() if n == top)
    idx = [i for i, e in enumerate(buf.entries) if e.y == majority]
    w = _inverse_loss(buf.entries[i] for i in idx)
    return idx[_weighted_choice(w, rng)]


def lawrrr_weights(buf: ReplayBuffer) -> np.ndarray:
    counts = np.array([buf.class_counts[e.y] for e in buf.entries], dtype=np.float64)
    return counts * _inverse_loss(buf.entries)


def lawrrr_select_victim(buf: ReplayBuffer, rng: np.random.Generator) -> int:
    """Victim drawn with weight ClassCount(y_i) / loss_i over the whole buffer."""
    return _weighted_choice(lawrrr_weights(buf), rng)


def _weighted_choice(w: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(w)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(w) - 1)


def sample_replay(buf: ReplayBuffer, n: int, strategy: SamplingStrategy, rng: np.random.Generator) -> list[int]:
    """Indices of entries to replay; all of them when the buffer holds <= n."""
    if n < 0:
        raise ValueError("n must be >= 0")
    size = len(buf.entries)
    if size <= n:
        return list(range(size))
    if n == 0:
        return []
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.UNIFORM:
        return sorted(int(i) for i in rng.choice(size, size=n, replace=False))
    key = "uncertainty" if strategy is SamplingStrategy.UAPN else "loss"
    return _positive_negative(buf.entries, n, key)


def _positive_negative(entries, n: int, key: str) -> list[int]:
    score = [getattr(e, key) for e in entries]
    order = [e.order for e in entries]
    n_high = (n + 1) // 2
    high = sorted(range(len(entries)), key=lambda i: (-score[i], order[i]))[:n_high]
    taken = set(high)
    low = [i for i in sorted(range(len(entries)), key=lambda i: (score[i], order[i])) if i not in taken]
    return high + low[: n - n_high]


def update_scores(buf: ReplayBuffer, indices, new_losses, new_logits, new_uncertainties):
    indices = list(indices)
    if not (len(indices) == len(new_losses) == len(new_logits) == len(new_uncertainties)):
        raise ValueError("indices and score lists must have equal length")
    for i in indices:
        if not 0 <= i < len(buf.entries):
            raise IndexError(f"buffer index {i} out of range [0, {len(buf.entries)})")
    for i, loss, h, u in zip(indices, new_losses, new_logits, new_uncertainties):
        e = buf.entries[i]
        e.loss = float(loss)
        e.h = np.array(h, dtype=np.float64)
        e.uncertainty = float(u)
