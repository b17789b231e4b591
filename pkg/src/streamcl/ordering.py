"""Stream plans for the four data orderings.

A plan is a base-initialization set plus a list of increments; each increment
is streamed one sample at a time and followed by a testing event.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class OrderingKind(str, enum.Enum):
    IID = "iid"
    CLASS_IID = "class-iid"
    INSTANCE = "instance"
    CLASS_INSTANCE = "class-instance"

    @property
    def class_partitioned(self) -> bool:
        return self in (OrderingKind.CLASS_IID, OrderingKind.CLASS_INSTANCE)

    @property
    def temporal(self) -> bool:
        return self in (OrderingKind.INSTANCE, OrderingKind.CLASS_INSTANCE)


class MissingMetadata(ValueError):
    pass


@dataclass
class DatasetRecord:
    z: np.ndarray
    y: int
    instance_id: int = 0
    frame_index: int = 0


@dataclass(frozen=True)
class OrderingSpec:
    kind: OrderingKind = OrderingKind.CLASS_IID
    classes_per_increment: int = 2
    base_init_fraction: float = 0.10
    interleave_block: int = 50
    event_fraction: float = 0.05  # testing cadence for iid / instance streams
    shuffle_classes: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", OrderingKind(self.kind))
        if self.classes_per_increment < 1 or self.interleave_block < 1:
            raise ValueError("classes_per_increment and interleave_block must be positive")
        if not 0.0 < self.base_init_fraction < 1.0:
            raise ValueError("base_init_fraction must lie in (0, 1)")
        if not 0.0 < self.event_fraction <= 1.0:
            raise ValueError("event_fraction must lie in (0, 1]")


@dataclass
class StreamPlan:
    base_init: list[int]
    increments: list[list[int]]
    class_order: list[int] = field(default_factory=list)

    @property
    def stream(self) -> list[int]:
        return [i for inc in self.increments for i in inc]

    @property
    def n_events(self) -> int:
        """Testing events: one after base init and one after each increment."""
        return 1 + len(self.increments)

    def to_dict(self) -> dict:
        return {"base_init": list(map(int, self.base_init)),
                "increments": [list(map(int, inc)) for inc in self.increments],
                "class_order": list(map(int, self.class_order))}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build_stream(records: list[DatasetRecord], spec: OrderingSpec, seed: int,
                 has_metadata: bool = True) -> StreamPlan:
    if not records:
        raise ValueError("cannot build a stream from an empty dataset")
    if spec.kind.temporal and not has_metadata:
        raise MissingMetadata(f"ordering '{spec.kind.value}' needs instance/frame metadata")
    rng = np.random.default_rng(seed)
    labels = np.array([r.y for r in records])
    classes = np.unique(labels)
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ValueError("class labels must be contiguous from 0")

    if spec.kind.class_partitioned:
        return _class_partitioned(records, spec, rng, classes)

    n = len(records)
    n_base = max(1, int(round(spec.base_init_fraction * n)))
    perm = rng.permutation(n)
    base = sorted(int(i) for i in perm[:n_base])
    if spec.kind is OrderingKind.IID:
        stream = [int(i) for i in perm[n_base:]]
    else:
        taken = set(base)
        stream = [i for i in _round_robin(records, spec.interleave_block) if i not in taken]
    return StreamPlan(base, _chunk(stream, spec.event_fraction))


def _chunk(stream: list[int], fraction: float) -> list[list[int]]:
    if not stream:
        return []
    n_chunks = max(1, int(round(1.0 / fraction)))
    bounds = np.linspace(0, len(stream), n_chunks + 1).round().astype(int)
    return [stream[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _instances(records, idx=None) -> dict[tuple[int, int], list[int]]:
    """(class, instance) -> record indices in temporal order."""
    groups = defaultdict(list)
    for i in (range(len(records)) if idx is None else idx):
        r = records[i]
        groups[(r.y, r.instance_id)].append(i)
    for key, members in groups.items():
        members.sort(key=lambda i: records[i].frame_index)
        frames = [records[i].frame_index for i in members]
        if len(set(frames)) != len(frames):
            raise ValueError(f"duplicate frame_index within instance {key}")
    return dict(sorted(groups.items()))


def _round_robin(records, block: int) -> list[int]:
    queues = list(_instances(records).values())
    out = []
    pos = 0
    while any(pos < len(q) for q in queues):
        for q in queues:
            out.extend(q[pos:pos + block])
        pos += block
    return out


def _class_partitioned(records, spec: OrderingSpec, rng, classes) -> StreamPlan:
    order = [int(c) for c in (rng.permutation(classes) if spec.shuffle_classes else classes)]
    k = spec.classes_per_increment
    if len(order) % k:
        log.warning("%d classes not divisible by %d; last increment is smaller", len(order), k)
    by_class = defaultdict(list)
    for i, r in enumerate(records):
        by_class[r.y].append(i)
    groups = [order[a:a + k] for a in range(0, len(order), k)]
    base = sorted(i for c in groups[0] for i in by_class[c])
    increments = []
    for group in groups[1:]:
        if spec.kind is OrderingKind.CLASS_IID:
            inc = [i for c in group for i in by_class[c]]
            increments.append([int(i) for i in rng.permutation(inc)])
        else:
            inc = []
            for c in group:
                for members in _instances(records, by_class[c]).values():
                    inc.extend(members)
            increments.append(inc)
    return StreamPlan(base, increments, order)


def classes_seen(records, plan: StreamPlan, n_increments: int) -> set[int]:
    """Labels present in base init and the first ``n_increments`` increments."""
    seen = {records[i].y for i in plan.base_init}
    for inc in plan.increments[:n_increments]:
        seen.update(records[i].y for i in inc)
    return seen
