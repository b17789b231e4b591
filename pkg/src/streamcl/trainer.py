"""Base initialization, per-sample streaming updates, evaluation and learners."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import vbnn
from .memory import MemoryEntry, ReplacementPolicy, ReplayBuffer, SamplingStrategy
from .metrics import EvalTrace
from .ordering import DatasetRecord, OrderingSpec, StreamPlan, build_stream, classes_seen

log = logging.getLogger(__name__)

DETERMINISTIC_RHO = -60.0  # softplus(-60) ~ 1e-26: a point-mass "posterior"


class LearnerKind(str, enum.Enum):
    CIOSL = "ciosl"
    FINETUNE = "finetune"
    OFFLINE = "offline"


class EvalMode(str, enum.Enum):
    SAMPLE = "sample"  # average softmax over k weight draws
    MEAN = "mean"  # single pass with the posterior mean


@dataclass
class HyperParams:
    lambda1: float = 1.0
    lambda2: float = 0.3
    n_replay: int = 16
    n_kd: int = 16
    k_uncertainty: int = 5
    buffer_capacity: int = 180
    base_epochs: int = 30
    base_batch: int = 16
    offline_epochs: int = 30
    offline_batch: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    hidden_dims: tuple[int, ...] = vbnn.DEFAULT_HIDDEN
    init_sigma: float = vbnn.INIT_SIGMA
    policy: ReplacementPolicy = ReplacementPolicy.LAWRRR
    sampling: SamplingStrategy = SamplingStrategy.UAPN
    eval_mode: EvalMode = EvalMode.SAMPLE
    reduction: str = "mean"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.policy = ReplacementPolicy(self.policy)
        self.sampling = SamplingStrategy(self.sampling)
        self.eval_mode = EvalMode(self.eval_mode)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")
        for name in ("n_replay", "n_kd", "k_uncertainty", "buffer_capacity", "base_batch", "offline_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("base_epochs", "offline_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        for k in ("policy", "sampling", "eval_mode"):
            d[k] = d[k].value
        return d


def _seq_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


_TAG_PLAN, _TAG_INIT, _TAG_BASE, _TAG_STREAM, _TAG_EVAL, _TAG_OFFLINE = range(6)


def _stack(records: list[DatasetRecord]) -> tuple[np.ndarray, np.ndarray]:
    z = np.stack([np.asarray(r.z, dtype=np.float64) for r in records])
    y = np.array([r.y for r in records], dtype=np.int64)
    return z, y


# ---------------------------------------------------------------------------
# state


@dataclass
class StreamState:
    posterior: vbnn.MeanFieldPosterior
    prior: vbnn.FrozenPrior
    opt: vbnn.OptimizerState
    buffer: ReplayBuffer | None
    steps: int = 0
    visited: list = field(default_factory=list)

    @property
    def shape(self) -> vbnn.NetShape:
        return self.posterior.shape


def _minibatch_train(post, opt, z, y, epochs, batch, rng, kl_weight, prior, deterministic=False):
    """Epochs of shuffled minibatch SGD on mean cross-entropy (+ kl_weight * KL / N)."""
    n = len(y)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for a in range(0, n, batch):
            idx = perm[a:a + batch]
            m = len(idx)
            if deterministic:
                _, g = vbnn.data_loss_and_grad(post.shape, post.mu, z[idx], y[idx])
                grads = vbnn.GradientPair(g / m, np.zeros_like(g))
            else:
                sample = vbnn.sample_weights(post, rng)
                _, grads = vbnn.elbo_loss(post, prior, sample, z[idx], y[idx], None, None,
                                           kl_weight * m / n, 0.0)
                grads = vbnn.GradientPair(grads.d_mu / m, grads.d_rho / m)
            post, opt = vbnn.sgd_step(post, grads, opt)
    return post, opt


def base_initialize(records: list[DatasetRecord], n_classes: int, hp: HyperParams,
                    rng: np.random.Generator, *, with_buffer: bool = True,
                    init_rng: np.random.Generator | None = None):
    """Offline warm-up on the base set, then seed the buffer from it.

    Minimizes the minibatch estimate of ``sum NLL + lambda1 * KL(q || N(0, 1))``
    (per-sample normalized). Returns ``(posterior, prior, buffer)``; the prior
    is a frozen copy of the trained posterior.
    """
    if not records:
        raise ValueError("base initialization needs at least one record")
    z, y = _stack(records)
    shape = vbnn.NetShape(z.shape[1], n_classes, hp.hidden_dims)
    post = vbnn.MeanFieldPosterior.initialize(shape, init_rng if init_rng is not None else rng, hp.init_sigma)
    opt = vbnn.OptimizerState.zeros(shape.n_params, hp.lr, hp.momentum, hp.weight_decay)
    post, opt = _minibatch_train(post, opt, z, y, hp.base_epochs, hp.base_batch, rng,
                                 hp.lambda1, vbnn.FrozenPrior.standard(shape.n_params))
    buffer = None
    if with_buffer:
        buffer = ReplayBuffer(hp.buffer_capacity)
        loss, logits, unc = vbnn.score_batch(post, z, y, hp.k_uncertainty, rng)
        for i in range(len(y)):
            buffer.insert(MemoryEntry(z[i], int(y[i]), logits[i], loss[i], unc[i]), hp.policy, rng)
    return post, post.freeze(), buffer


def new_state(post, prior, buffer, hp: HyperParams) -> StreamState:
    # a fresh optimizer for the streaming phase: base-init momentum does not leak in
    opt = vbnn.OptimizerState.zeros(post.shape.n_params, hp.lr, hp.momentum, hp.weight_decay)
    return StreamState(post, prior, opt, buffer)


def stream_step(state: StreamState, sample: DatasetRecord, hp: HyperParams,
                rng: np.random.Generator, index: int | None = None):
    """One single-pass update on ``sample``; state is mutated only on success."""
    buf = state.buffer
    replay_idx: list[int] = []
    kd_idx: list[int] = []
    if buf is not None and len(buf):
        replay_idx = buf.sample_replay(hp.n_replay, hp.sampling, rng)
        kd_idx = buf.sample_replay(hp.n_kd, SamplingStrategy.UNIFORM, rng)
    replay = [(buf.entries[i].z, buf.entries[i].y) for i in replay_idx]
    kd = [(buf.entries[i].z, buf.entries[i].h) for i in kd_idx]

    z_new = np.asarray(sample.z, dtype=np.float64)
    _, grads = vbnn.streaming_loss(state.posterior, state.prior, (z_new, sample.y), replay, kd,
                                   hp.lambda1, hp.lambda2, rng, reduction=hp.reduction)
    post, opt = vbnn.sgd_step(state.posterior, grads, state.opt)

    if buf is not None:
        touched = sorted(set(replay_idx) | set(kd_idx))
        zs = np.stack([buf.entries[i].z for i in touched] + [z_new])
        ys = np.array([buf.entries[i].y for i in touched] + [sample.y])
        loss, logits, unc = vbnn.score_batch(post, zs, ys, hp.k_uncertainty, rng)
        if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(logits))):
            raise vbnn.NonFiniteGradient("posterior produced non-finite scores; training halted")
        entry = MemoryEntry(z_new, sample.y, logits[-1], loss[-1], unc[-1])
        buf.update_scores(touched, loss[:-1], logits[:-1], unc[:-1])
        buf.insert(entry, hp.policy, rng)

    state.posterior = post
    state.opt = opt
    state.prior = post.freeze()
    state.steps += 1
    if index is not None:
        state.visited.append(index)


def evaluate(post: vbnn.MeanFieldPosterior, test_records: list[DatasetRecord], k: int = vbnn.DEFAULT_K,
             rng: np.random.Generator | None = None, mode: EvalMode = EvalMode.SAMPLE) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if not test_records:
        raise ValueError("cannot evaluate on an empty test set")
    z, y = _stack(test_records)
    if EvalMode(mode) is EvalMode.MEAN:
        scores = vbnn.forward(post.shape, post.mu, z)
    else:
        scores = vbnn.predict_proba(post, z, k, rng if rng is not None else np.random.default_rng(0))
    return float(np.mean(np.argmax(scores, axis=1) == y))


def train_offline(records: list[DatasetRecord], n_classes: int, hp: HyperParams,
                  rng: np.random.Generator) -> vbnn.MeanFieldPosterior:
    """Deterministic MLP of the same architecture trained from scratch on all of ``records``."""
    z, y = _stack(records)
    shape = vbnn.NetShape(z.shape[1], n_classes, hp.hidden_dims)
    post = vbnn.MeanFieldPosterior.initialize(shape, rng)
    post = vbnn.MeanFieldPosterior(shape, post.mu, np.full(shape.n_params, DETERMINISTIC_RHO))
    opt = vbnn.OptimizerState.zeros(shape.n_params, hp.lr, hp.momentum, hp.weight_decay)
    post, _ = _minibatch_train(post, opt, z, y, hp.offline_epochs, hp.offline_batch, rng,
                               0.0, None, deterministic=True)
    return post


class OfflineCache:
    """Memoizes offline reference accuracies so paired learners share one reference."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, compute: Callable[[], list[float]], keep=()) -> list[float]:
        # ``keep`` pins objects whose id() is part of the key
        if key not in self._store:
            self._store[key] = (compute(), keep)
        return self._store[key][0]


def offline_reference(records, test_records, n_classes, plan: StreamPlan, hp: HyperParams,
                      seed: int) -> list[float]:
    out = []
    revealed = list(plan.base_init)
    for t in range(plan.n_events):
        if t > 0:
            revealed.extend(plan.increments[t - 1])
        rng = _seq_rng(seed, _TAG_OFFLINE, t)
        post = train_offline([records[i] for i in revealed], n_classes, hp, rng)
        seen = classes_seen(records, plan, t)
        test = [r for r in test_records if r.y in seen]
        out.append(evaluate(post, test, mode=EvalMode.MEAN))
    return out


@dataclass
class RunResult:
    trace: EvalTrace
    plan: StreamPlan
    steps: int
    visited: list[int]
    buffer: dict | None = None
    posterior: vbnn.MeanFieldPosterior | None = None


def run_experiment(records: list[DatasetRecord], test_records: list[DatasetRecord], n_classes: int,
                   spec: OrderingSpec, hp: HyperParams, learner: LearnerKind, seed: int, *,
                   has_metadata: bool = True, offline_cache: OfflineCache | None = None,
                   on_event: Callable[[int, float, float], None] | None = None) -> RunResult:
    learner = LearnerKind(learner)
    plan = build_stream(records, spec, seed, has_metadata=has_metadata)
    offline_hp = (hp.hidden_dims, hp.lr, hp.momentum, hp.weight_decay, hp.offline_epochs, hp.offline_batch)
    key = (id(records), id(test_records), plan.digest(), offline_hp, seed)
    ref_fn = lambda: offline_reference(records, test_records, n_classes, plan, hp, seed)  # noqa: E731
    reference = offline_cache.get(key, ref_fn, keep=(records, test_records)) if offline_cache is not None else ref_fn()

    trace = EvalTrace()

    def emit(t, alpha):
        seen = classes_seen(records, plan, t)
        trace.append(alpha, reference[t], len(seen))
        if on_event is not None:
            on_event(t, alpha, reference[t])

    if learner is LearnerKind.OFFLINE:
        for t in range(plan.n_events):
            emit(t, reference[t])
        return RunResult(trace, plan, 0, [])

    if learner is LearnerKind.FINETUNE:
        hp = HyperParams(**{**hp.__dict__, "lambda1": 0.0, "lambda2": 0.0})
    use_buffer = learner is LearnerKind.CIOSL

    base_rng = _seq_rng(seed, _TAG_BASE)
    post, prior, buffer = base_initialize([records[i] for i in plan.base_init], n_classes, hp, base_rng,
                                          with_buffer=use_buffer, init_rng=_seq_rng(seed, _TAG_INIT))
    state = new_state(post, prior, buffer, hp)
    stream_rng = _seq_rng(seed, _TAG_STREAM)

    def test_now(t):
        seen = classes_seen(records, plan, t)
        test = [r for r in test_records if r.y in seen]
        return evaluate(state.posterior, test, hp.k_uncertainty, _seq_rng(seed, _TAG_EVAL, t), hp.eval_mode)

    emit(0, test_now(0))
    for t, inc in enumerate(plan.increments, start=1):
        for i in inc:
            stream_step(state, records[i], hp, stream_rng, index=i)
        emit(t, test_now(t))
        log.debug("event %d: alpha=%.4f offline=%.4f", t, trace.alpha[-1], reference[t])
    snap = state.buffer.snapshot() if state.buffer is not None else None
    return RunResult(trace, plan, state.steps, state.visited, snap, state.posterior)
