"""Binary embedding-dataset files, CSV import and synthetic data.

File layout (little-endian)::

    magic      8 bytes   b"CIOSL1\\0\\0"
    n          u32       record count
    d          u32       embedding dimension
    C          u32       class count
    flags      u32       bit 0: instance metadata present
    n records of  [f32 x d][u16 label][u16 instance_id][u32 frame_index]
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ordering import DatasetRecord

MAGIC = b"CIOSL1\x00\x00"
HEADER = struct.Struct("<8s4I")
FLAG_METADATA = 1
WALK_REVERSION = 0.9


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Dataset:
    records: list[DatasetRecord]
    n_classes: int
    has_metadata: bool = True

    @property
    def dim(self) -> int:
        return len(self.records[0].z) if self.records else 0


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("z", "<f4", (d,)), ("y", "<u2"), ("instance", "<u2"), ("frame", "<u4")])


def write_dataset(path, ds: Dataset):
    if not ds.records:
        raise ValueError("refusing to write an empty dataset")
    d = ds.dim
    arr = np.zeros(len(ds.records), dtype=_record_dtype(d))
    for i, r in enumerate(ds.records):
        if not 0 <= r.y < ds.n_classes:
            raise ValueError(f"record {i}: label {r.y} outside [0, {ds.n_classes})")
        arr[i] = (np.asarray(r.z, dtype=np.float32), r.y, r.instance_id, r.frame_index)
    flags = FLAG_METADATA if ds.has_metadata else 0
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, len(ds.records), d, ds.n_classes, flags))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {HEADER.size} bytes, got {len(data)}", 0)
    magic, n, d, c, flags = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if d == 0:
        raise DatasetFormatError("embedding dimension is 0", 12)
    if c == 0:
        raise DatasetFormatError("class count is 0", 16)
    dt = _record_dtype(d)
    expected = HEADER.size + n * dt.itemsize
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise DatasetFormatError(f"{kind} file: expected {expected} bytes, got {len(data)}",
                                 min(len(data), expected))
    arr = np.frombuffer(data, dtype=dt, count=n, offset=HEADER.size)
    bad = np.nonzero(arr["y"] >= c)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"record {i}: label {int(arr['y'][i])} >= class count {c}",
                                 HEADER.size + i * dt.itemsize + 4 * d)
    z = arr["z"].astype(np.float64)
    if not np.all(np.isfinite(z)):
        raise DatasetFormatError("non-finite embedding values")
    records = [DatasetRecord(z[i], int(arr["y"][i]), int(arr["instance"][i]), int(arr["frame"][i]))
               for i in range(n)]
    return Dataset(records, int(c), bool(flags & FLAG_METADATA))


def import_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``label[,instance_id,frame_index],f0,f1,...`` rows.

    A header row is required; columns named ``instance_id`` and
    ``frame_index`` switch on the metadata flag.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [h.strip() for h in header]
        if "label" not in cols:
            raise DatasetFormatError("CSV header must contain a 'label' column")
        li = cols.index("label")
        ii = cols.index("instance_id") if "instance_id" in cols else None
        fi = cols.index("frame_index") if "frame_index" in cols else None
        feat = [j for j in range(len(cols)) if j not in (li, ii, fi)]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(DatasetRecord(
                    np.array([float(row[j]) for j in feat]),
                    int(row[li]),
                    int(row[ii]) if ii is not None else 0,
                    int(row[fi]) if fi is not None else lineno - 2,
                ))
            except (ValueError, IndexError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise DatasetFormatError("CSV has no data rows")
    c = n_classes if n_classes is not None else max(r.y for r in records) + 1
    return Dataset(records, c, ii is not None and fi is not None)


def gen_synthetic(n_classes: int = 10, n_instances: int = 3, frames_per_instance: int = 120, d: int = 32,
                  cluster_spread: float = 0.1, seed: int = 0, *, instance_spread: float = 0.3,
                  test_frames_per_instance: int = 0):
    """Gaussian clusters with per-instance sub-centres and temporally correlated frames.

    Each class centre is a random unit vector; each instance sits at an offset
    of scale ``instance_spread / sqrt(d)`` per coordinate around it; frames are
    a mean-reverting random walk around the sub-centre with per-coordinate
    step ``cluster_spread / sqrt(d)``, starting at the sub-centre. With ``test_frames_per_instance`` > 0 the walk is
    continued and every instance also yields held-out frames, returned as a
    second dataset.
    """
    if min(n_classes, n_instances, frames_per_instance, d) < 1:
        raise ValueError("counts and dimension must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, d))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    scale = 1.0 / np.sqrt(d)
    train, test = [], []
    for c in range(n_classes):
        for inst in range(n_instances):
            sub = centres[c] + instance_spread * scale * rng.standard_normal(d)
            total = frames_per_instance + test_frames_per_instance
            steps = cluster_spread * scale * rng.standard_normal((total, d))
            walk = np.empty((total, d))
            dev = np.zeros(d)
            for t in range(total):
                if t:
                    dev = WALK_REVERSION * dev + steps[t]
                walk[t] = sub + dev
            # interleave held-out frames evenly through the walk
            is_test = np.zeros(total, dtype=bool)
            if test_frames_per_instance:
                pos = np.linspace(0, total - 1, test_frames_per_instance + 2)[1:-1].round().astype(int)
                is_test[pos] = True
            fi = ti = 0
            for t in range(total):
                if is_test[t]:
                    test.append(DatasetRecord(walk[t].astype(np.float32).astype(np.float64), c, inst, ti))
                    ti += 1
                else:
                    train.append(DatasetRecord(walk[t].astype(np.float32).astype(np.float64), c, inst, fi))
                    fi += 1
    train_ds = Dataset(train, n_classes, True)
    if test_frames_per_instance:
        return train_ds, Dataset(test, n_classes, True)
    return train_ds


def holdout_split(ds: Dataset, every: int = 5) -> tuple[Dataset, Dataset]:
    """Deterministic split: every ``every``-th record of each instance goes to test."""
    train, test = [], []
    counters: dict = {}
    for r in ds.records:
        key = (r.y, r.instance_id)
        k = counters.get(key, 0)
        counters[key] = k + 1
        (test if k % every == every - 1 else train).append(r)
    return Dataset(train, ds.n_classes, ds.has_metadata), Dataset(test, ds.n_classes, ds.has_metadata)
