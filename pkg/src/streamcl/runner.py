"""Multi-seed experiment execution and the JSON-lines results file.

Results file layout: one ``{"type": "event", ...}`` line per testing event,
sorted by (ordering, learner, seed, t), followed by one ``{"type": "summary"}``
line. While a run is in progress, completed work is appended to
``<out>.partial`` (a marked, crash-resumable trace); it is replaced by the
final file on success.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig
from .dataset import Dataset, holdout_split, load_dataset
from .metrics import mean_std, offline_mean, omega_all
from .ordering import MissingMetadata
from .trainer import LearnerKind, OfflineCache, run_experiment

log = logging.getLogger(__name__)

LEARNER_LABELS = {LearnerKind.FINETUNE: "Fine-Tune", LearnerKind.CIOSL: "CIOSL", LearnerKind.OFFLINE: "Offline"}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train = load_dataset(cfg.dataset)
    if cfg.test_dataset is not None:
        test = load_dataset(cfg.test_dataset)
        if test.n_classes != train.n_classes or test.dim != train.dim:
            raise ValueError("test dataset class count or dimension differs from the training dataset")
        return train, test
    return holdout_split(train, cfg.holdout_every)


def check_compatible(cfg: ExperimentConfig, train: Dataset):
    for kind in cfg.kinds:
        if kind.temporal and not train.has_metadata:
            raise MissingMetadata(f"ordering '{kind.value}' needs instance/frame metadata, "
                                  f"which {cfg.dataset} does not carry")


_DATA: dict = {}


def _init_worker(cfg: ExperimentConfig):
    _DATA["cfg"] = cfg
    _DATA["data"] = load_data(cfg)


def run_job(kind_value: str, seed: int, emit=None) -> dict:
    """All learners for one (ordering, seed); they share the offline reference."""
    cfg: ExperimentConfig = _DATA["cfg"]
    train, test = _DATA["data"]
    spec = cfg.ordering_spec(kind_value)
    cache = OfflineCache()
    out = {"kind": spec.kind.value, "seed": seed, "learners": {}}
    for learner in cfg.learners:
        def on_event(t, alpha, ref, _l=learner):
            if emit is not None:
                emit(_event(spec.kind.value, _l.value, seed, t, alpha, ref))

        res = run_experiment(train.records, test.records, train.n_classes, spec, cfg.hp, learner, seed,
                             has_metadata=train.has_metadata, offline_cache=cache, on_event=on_event)
        out["learners"][learner.value] = {
            "trace": res.trace.to_dict(),
            "omega_all": omega_all(res.trace),
            "steps": res.steps,
            "stream_length": len(res.plan.stream),
            "plan_digest": res.plan.digest(),
            "buffer": res.buffer,
        }
    return out


def _event(kind, learner, seed, t, alpha, ref) -> dict:
    return {"type": "event", "ordering": kind, "learner": learner, "seed": seed, "t": t,
            "alpha": alpha, "alpha_offline": ref}


def _read_partial(path: Path, digest: str) -> dict:
    """Completed jobs from a previous interrupted run with the same config."""
    done: dict = {}
    if not path.exists():
        return done
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        header = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError:
        header = {}
    if header.get("config_digest") != digest:
        log.warning("ignoring %s: written by a different configuration", path)
        return done
    for line in lines[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break  # torn final line from a crash
        if rec.get("type") == "job":
            done[(rec["job"]["kind"], rec["job"]["seed"])] = rec["job"]
    return done


def summarize(cfg: ExperimentConfig, jobs: list[dict]) -> dict:
    """Aggregate per-seed results; contains nothing run-dependent besides results."""
    kinds = [k.value for k in cfg.kinds]
    learners = [lr.value for lr in cfg.learners]
    table: dict = {}
    per_event: dict = {}
    offline_hat: dict = {}
    plans: dict = {}
    buffers: dict = {}
    for kind in kinds:
        kjobs = sorted((j for j in jobs if j["kind"] == kind), key=lambda j: j["seed"])
        first = kjobs[0]["learners"][learners[0]]
        refs = [offline_mean(j["learners"][learners[0]]["trace"]["alpha_offline"]) for j in kjobs]
        offline_hat[kind] = dict(zip(("mean", "std"), mean_std(refs)))
        plans[kind] = {str(j["seed"]): j["learners"][learners[0]]["plan_digest"] for j in kjobs}
        n_events = len(first["trace"]["alpha"])
        for lr in learners:
            omegas = [j["learners"][lr]["omega_all"] for j in kjobs]
            mean, std = mean_std(omegas)
            table.setdefault(lr, {})[kind] = {"mean": mean, "std": std, "per_seed": omegas}
            alphas = [j["learners"][lr]["trace"]["alpha"] for j in kjobs]
            per_event.setdefault(kind, {})[lr] = [sum(a[t] for a in alphas) / len(alphas) for t in range(n_events)]
            if lr == LearnerKind.CIOSL.value:
                buffers.setdefault(kind, {}).update({str(j["seed"]): j["learners"][lr]["buffer"] for j in kjobs})
        per_event[kind]["offline"] = [
            sum(j["learners"][learners[0]]["trace"]["alpha_offline"][t] for j in kjobs) / len(kjobs)
            for t in range(n_events)]
    return {"type": "summary", "config": cfg.to_dict(), "config_digest": cfg.digest(),
            "seeds": list(cfg.seeds), "plan_digests": plans, "omega_all": table,
            "offline_hat": offline_hat, "per_event": per_event, "buffer": buffers}


def run(cfg: ExperimentConfig) -> dict:
    """Execute every (ordering, seed) job, write the results file and return the summary."""
    train, _ = load_data(cfg)
    check_compatible(cfg, train)
    out = Path(cfg.out)
    partial = Path(f"{out}.partial")
    digest = cfg.digest()
    done = _read_partial(partial, digest)
    todo = [(k.value, s) for k in cfg.kinds for s in cfg.seeds if (k.value, s) not in done]
    if done:
        log.info("resuming: %d of %d jobs already complete", len(done), len(done) + len(todo))

    fresh = not done
    with open(partial, "w" if fresh else "a") as fh:
        if fresh:
            fh.write(_dumps({"type": "header", "partial": True, "config_digest": digest}) + "\n")
            fh.flush()

        def record(line: dict):
            fh.write(_dumps(line) + "\n")
            fh.flush()

        def finish(job: dict):
            done[(job["kind"], job["seed"])] = job
            record({"type": "job", "job": job})
            log.info("finished %s seed %d", job["kind"], job["seed"])

        workers = cfg.workers or os.cpu_count() or 1
        if workers == 1 or len(todo) <= 1:
            _init_worker(cfg)
            for kind, seed in todo:
                finish(run_job(kind, seed, emit=record))
        else:
            with ProcessPoolExecutor(min(workers, len(todo)), initializer=_init_worker,
                                     initargs=(cfg,)) as pool:
                futures = [pool.submit(run_job, kind, seed) for kind, seed in todo]
                for fut in futures:
                    finish(fut.result())

    jobs = [done[(k.value, s)] for k in cfg.kinds for s in cfg.seeds]
    summary = summarize(cfg, jobs)
    events = []
    for job in jobs:
        for lr, res in job["learners"].items():
            tr = res["trace"]
            events.extend(_event(job["kind"], lr, job["seed"], t, a, r)
                          for t, (a, r) in enumerate(zip(tr["alpha"], tr["alpha_offline"])))
    tmp = Path(f"{out}.tmp")
    with open(tmp, "w") as fh:
        for e in events:
            fh.write(_dumps(e) + "\n")
        fh.write(_dumps(summary) + "\n")
    os.replace(tmp, out)
    partial.unlink()
    return summary


def read_summary(path) -> dict:
    with open(path) as fh:
        lines = fh.read().splitlines()
    for line in reversed(lines):
        rec = json.loads(line)
        if rec.get("type") == "summary":
            return rec
    raise ValueError(f"{path} has no summary record")


def format_table(summary: dict) -> str:
    """Omega_all table: one row per method, one column per ordering, plus the offline-hat row."""
    kinds = summary["config"]["kinds"]
    learners = summary["config"]["learners"]
    width = max(18, *(len(k) + 2 for k in kinds))
    head = f"{'Method':<12}" + "".join(f"{k:>{width}}" for k in kinds)
    rows = [head, "-" * len(head)]
    for lr in learners:
        label = LEARNER_LABELS.get(LearnerKind(lr), lr)
        cells = "".join(f"{_pm(summary['omega_all'][lr][k]):>{width}}" for k in kinds)
        rows.append(f"{label:<12}{cells}")
    rows.append("-" * len(head))
    rows.append(f"{'Offline-hat':<12}" + "".join(f"{_pm(summary['offline_hat'][k]):>{width}}" for k in kinds))
    rows.append("")
    for k in kinds:
        rows.append(f"per-event mean accuracy, {k}:")
        series = summary["per_event"][k]
        n = len(series["offline"])
        rows.append(f"{'t':<12}" + "".join(f"{t:>7}" for t in range(n)))
        for name, vals in series.items():
            rows.append(f"{name:<12}" + "".join(f"{v:>7.3f}" for v in vals))
        rows.append("")
    return "\n".join(rows)


def _pm(cell: dict) -> str:
    return f"{cell['mean']:.4f} ± {cell['std']:.4f}"
