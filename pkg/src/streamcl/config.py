"""Experiment configuration: TOML sections resolved against defaults and CLI overrides.

Example::

    [data]
    dataset = "train.bin"
    test_dataset = "test.bin"    # optional; otherwise a holdout split is used

    [ordering]
    kinds = ["class-iid"]
    classes_per_increment = 2

    [hyperparams]
    lambda1 = 1.0
    lambda2 = 0.3
    buffer_capacity = 180

    [run]
    learners = ["ciosl", "finetune", "offline"]
    seeds = 10
    out = "results.jsonl"
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ordering import OrderingKind, OrderingSpec
from .trainer import HyperParams, LearnerKind


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str
    test_dataset: str | None = None
    holdout_every: int = 5
    kinds: list[OrderingKind] = field(default_factory=lambda: [OrderingKind.CLASS_IID])
    ordering: dict = field(default_factory=dict)  # OrderingSpec fields other than kind
    hp: HyperParams = field(default_factory=HyperParams)
    learners: list[LearnerKind] = field(default_factory=lambda: [LearnerKind.CIOSL])
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "results.jsonl"
    workers: int | None = None

    def ordering_spec(self, kind: OrderingKind) -> OrderingSpec:
        return OrderingSpec(kind, **self.ordering)

    def validate(self):
        for p in (self.dataset, self.test_dataset):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"dataset file not found: {p}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be positive")
        for k in self.kinds:
            self.ordering_spec(k)

    def to_dict(self) -> dict:
        """Resolved settings that determine results (output path and worker count excluded)."""
        return {
            "dataset": self.dataset,
            "test_dataset": self.test_dataset,
            "holdout_every": self.holdout_every,
            "kinds": [k.value for k in self.kinds],
            "ordering": {k: v for k, v in asdict(self.ordering_spec(self.kinds[0])).items() if k != "kind"},
            "hyperparams": self.hp.to_dict(),
            "learners": [lr.value for lr in self.learners],
            "seeds": list(self.seeds),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_HP_FIELDS = {f.name for f in fields(HyperParams)}
_ORDER_FIELDS = {f.name for f in fields(OrderingSpec)} - {"kind"}


def _as_list(v) -> list:
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return list(v)


def _seeds(v) -> list[int]:
    """An integer N means seeds 0..N-1; a list is taken literally."""
    if isinstance(v, int):
        if v < 1:
            raise ConfigError("seed count must be positive")
        return list(range(v))
    return [int(s) for s in _as_list(v)]


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML file (optional) and apply flat ``overrides`` (``None`` values ignored).

    Override keys may name any hyperparameter, ordering field, or one of
    ``dataset, test_dataset, kinds, learners, seeds, out, workers``.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    known = {"data", "ordering", "hyperparams", "run"}
    if unknown := set(raw) - known:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    flat: dict = {}
    for section in known:
        flat.update(raw.get(section, {}))
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})

    top = {"dataset", "test_dataset", "holdout_every", "kinds", "learners", "seeds", "out", "workers"}
    if unknown := set(flat) - top - _HP_FIELDS - _ORDER_FIELDS:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "dataset" not in flat:
        raise ConfigError("no dataset given (use --dataset or [data] dataset)")

    try:
        hp = HyperParams(**{k: flat[k] for k in _HP_FIELDS if k in flat})
        cfg = ExperimentConfig(
            dataset=str(flat["dataset"]),
            test_dataset=str(flat["test_dataset"]) if flat.get("test_dataset") else None,
            holdout_every=int(flat.get("holdout_every", 5)),
            kinds=[OrderingKind(k) for k in _as_list(flat.get("kinds", ["class-iid"]))],
            ordering={k: flat[k] for k in _ORDER_FIELDS if k in flat},
            hp=hp,
            learners=[LearnerKind(x) for x in _as_list(flat.get("learners", ["ciosl"]))],
            seeds=_seeds(flat.get("seeds", 1)),
            out=str(flat.get("out", "results.jsonl")),
            workers=int(flat["workers"]) if flat.get("workers") is not None else None,
        )
        cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg
