"""Mean-field variational MLP with hand-written forward and backward passes.

All parameters of the network (weights and biases of every layer) live in one
flat vector. A posterior keeps a mean ``mu`` and an unconstrained ``rho`` per
parameter, with standard deviation ``softplus(rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEFAULT_HIDDEN = (256, 256)
DEFAULT_K = 5
INIT_SIGMA = 0.05
# softplus underflows to 0 below rho ~ -745; keep sigma (and sigma**2) representable
SIGMA_FLOOR = 1e-30


class ShapeError(ValueError):
    """Raised when a vector or batch does not match the network shape."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual


class NonFiniteGradient(FloatingPointError):
    pass


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """Inverse of softplus for y > 0 (``ln(e^y - 1)``)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class NetShape:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def layers(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each affine layer."""
        d = self.layer_dims
        return list(zip(d[:-1], d[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layers)

    def slices(self) -> list[tuple[slice, slice]]:
        """Slices of the flat vector holding (W, b) of each layer; W is row-major (out, in)."""
        return self._slices

    @cached_property
    def _slices(self) -> list[tuple[slice, slice]]:
        out = []
        pos = 0
        for i, o in self.layers:
            w = slice(pos, pos + i * o)
            pos += i * o
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b))
        return out

    def unflatten(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if theta.shape != (self.n_params,):
            raise ShapeError("parameter vector", (self.n_params,), theta.shape)
        return [
            (theta[w].reshape(o, i), theta[b])
            for (w, b), (i, o) in zip(self.slices(), self.layers)
        ]


@dataclass
class MeanFieldPosterior:
    """Diagonal Gaussian over the flat parameter vector.

    Treated as an immutable value: ``sgd_step`` returns a new posterior and
    ``sigma`` is cached on first access.
    """

    shape: NetShape
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        p = self.shape.n_params
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != (p,):
            raise ShapeError("mu", (p,), self.mu.shape)
        if self.rho.shape != (p,):
            raise ShapeError("rho", (p,), self.rho.shape)

    @cached_property
    def sigma(self) -> np.ndarray:
        return np.maximum(softplus(self.rho), SIGMA_FLOOR)

    @classmethod
    def initialize(cls, shape: NetShape, rng: np.random.Generator, init_sigma: float = INIT_SIGMA):
        mu = np.empty(shape.n_params)
        for (w, b), (fan_in, _) in zip(shape.slices(), shape.layers):
            bound = 1.0 / np.sqrt(fan_in)
            mu[w] = rng.uniform(-bound, bound, size=w.stop - w.start)
            mu[b] = rng.uniform(-bound, bound, size=b.stop - b.start)
        rho = np.full(shape.n_params, float(softplus_inv(init_sigma)))
        return cls(shape, mu, rho)

    def copy(self) -> "MeanFieldPosterior":
        return MeanFieldPosterior(self.shape, self.mu.copy(), self.rho.copy())

    def freeze(self) -> "FrozenPrior":
        return FrozenPrior(self.mu, self.sigma)

    def mean_sample(self) -> "WeightSample":
        """Deterministic weights at the posterior mean (epsilon = 0)."""
        return WeightSample(self.mu.copy(), np.zeros_like(self.mu))


def softplus_grad(post: MeanFieldPosterior) -> np.ndarray:
    """d sigma / d rho, i.e. sigmoid(rho), via the identity 1 - exp(-softplus(rho))."""
    return -np.expm1(-post.sigma)


@dataclass(frozen=True)
class FrozenPrior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ShapeError("prior sigma", mu.shape, sigma.shape)
        if not np.all(sigma > 0):
            raise ValueError("prior sigma must be strictly positive")
        mu.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def standard(cls, n_params: int) -> "FrozenPrior":
        return cls(np.zeros(n_params), np.ones(n_params))


@dataclass
class WeightSample:
    theta: np.ndarray
    epsilon: np.ndarray


@dataclass
class GradientPair:
    d_mu: np.ndarray
    d_rho: np.ndarray


@dataclass
class OptimizerState:
    velocity_mu: np.ndarray
    velocity_rho: np.ndarray
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5

    @classmethod
    def zeros(cls, n_params: int, lr=0.01, momentum=0.9, weight_decay=1e-5) -> "OptimizerState":
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        return cls(np.zeros(n_params), np.zeros(n_params), lr, momentum, weight_decay)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.velocity_mu.copy(), self.velocity_rho.copy(),
            self.lr, self.momentum, self.weight_decay,
        )


# ---------------------------------------------------------------------------
# sampling and forward pass


def sample_weights(post: MeanFieldPosterior, rng: np.random.Generator) -> WeightSample:
    eps = rng.standard_normal(post.mu.shape[0])
    return WeightSample(post.mu + post.sigma * eps, eps)


def _as_batch(shape: NetShape, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != shape.input_dim:
        raise ShapeError("embedding", f"(*, {shape.input_dim})", z.shape)
    return z2


def _forward_cache(shape: NetShape, theta: np.ndarray, z2: np.ndarray):
    layers = shape.unflatten(theta)
    acts = [z2]
    h = z2
    for li, (w, b) in enumerate(layers):
        a = h @ w.T + b
        if li < len(layers) - 1:
            h = np.maximum(a, 0.0)
        else:
            h = a
        acts.append(h)
    return layers, acts


def forward(shape: NetShape, theta, z) -> np.ndarray:
    """Logits for one embedding (1-D) or a batch of embeddings (2-D)."""
    theta = theta.theta if isinstance(theta, WeightSample) else np.asarray(theta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    z2 = _as_batch(shape, z)
    _, acts = _forward_cache(shape, theta, z2)
    return acts[-1][0] if z.ndim == 1 else acts[-1]


def _backward(shape: NetShape, layers, acts, d_logits: np.ndarray) -> np.ndarray:
    grad = np.empty(shape.n_params)
    slices = shape.slices()
    delta = d_logits
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        ws, bs = slices[li]
        grad[ws] = (delta.T @ acts[li]).ravel()
        grad[bs] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ w) * (acts[li] > 0.0)
    return grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# ---------------------------------------------------------------------------
# loss terms


def kl_diag_gaussians(q: MeanFieldPosterior, p: FrozenPrior) -> float:
    """Closed-form KL(q || p) between two diagonal Gaussians."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError("prior", q.mu.shape, p.mu.shape)
    sq = q.sigma
    kl = np.log(p.sigma / sq) + (sq ** 2 + (q.mu - p.mu) ** 2) / (2.0 * p.sigma ** 2) - 0.5
    return max(float(kl.sum()), 0.0)


def kl_grads(q: MeanFieldPosterior, p: FrozenPrior) -> GradientPair:
    sq = q.sigma
    var_p = p.sigma ** 2
    d_mu = (q.mu - p.mu) / var_p
    # d/dsigma = sigma/var_p - 1/sigma, arranged to vanish exactly when sigma == p.sigma
    return GradientPair(d_mu, (sq ** 2 - var_p) / var_p * (softplus_grad(q) / sq))


def _check_labels(shape: NetShape, y: np.ndarray):
    if y.size and (y.min() < 0 or y.max() >= shape.output_dim):
        raise IndexError(f"class index out of range [0, {shape.output_dim}): {y.tolist()}")


def nll(shape: NetShape, theta, z, y: int) -> float:
    logits = forward(shape, theta, z)
    y_arr = np.asarray([y])
    _check_labels(shape, y_arr)
    return float(-log_softmax(logits)[int(y)])


def kd_loss(shape: NetShape, theta, batch, lambda2: float) -> float:
    """``lambda2 * sum ||h - f(z)||^2`` over (z, h) pairs; 0 for an empty batch."""
    if len(batch) == 0:
        return 0.0
    zs = np.stack([np.asarray(z, dtype=np.float64) for z, _ in batch])
    hs = np.stack([np.asarray(h, dtype=np.float64) for _, h in batch])
    if hs.shape[1] != shape.output_dim:
        raise ShapeError("stored logits", shape.output_dim, hs.shape[1])
    diff = hs - forward(shape, theta, zs)
    return float(lambda2 * np.sum(diff ** 2))


def data_loss_and_grad(shape: NetShape, theta: np.ndarray, z, y, kd_z=None, kd_h=None, lambda2=0.0,
                       ce_scale=1.0, kd_scale=1.0):
    """Cross-entropy plus logit matching, and its gradient w.r.t. theta.

    Both terms are sums over rows, multiplied by ``ce_scale`` and ``kd_scale``.
    """
    z = _as_batch(shape, z)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ShapeError("labels", z.shape[0], y.shape[0])
    _check_labels(shape, y)
    n_ce = z.shape[0]
    has_kd = kd_z is not None and len(kd_z) > 0 and lambda2 != 0.0
    if has_kd:
        kd_z = _as_batch(shape, kd_z)
        kd_h = np.asarray(kd_h, dtype=np.float64).reshape(kd_z.shape[0], shape.output_dim)
        z_all = np.vstack([z, kd_z])
    else:
        z_all = z
    layers, acts = _forward_cache(shape, theta, z_all)
    logits = acts[-1]
    d_logits = np.zeros_like(logits)
    loss = 0.0
    if n_ce:
        ls = log_softmax(logits[:n_ce])
        rows = np.arange(n_ce)
        loss += ce_scale * float(-ls[rows, y].sum())
        g = np.exp(ls)
        g[rows, y] -= 1.0
        d_logits[:n_ce] = ce_scale * g
    if has_kd:
        diff = logits[n_ce:] - kd_h
        loss += kd_scale * float(lambda2 * np.sum(diff ** 2))
        d_logits[n_ce:] = (kd_scale * 2.0 * lambda2) * diff
    if len(z_all) == 0:
        return 0.0, np.zeros(shape.n_params)
    return loss, _backward(shape, layers, acts, d_logits)


def streaming_loss(
    post: MeanFieldPosterior,
    prior: FrozenPrior,
    new_sample,
    replay_batch,
    kd_batch,
    lambda1: float,
    lambda2: float,
    rng: np.random.Generator | None = None,
    *,
    sample: WeightSample | None = None,
    kl_scale: float = 1.0,
    reduction: str = "sum",
):
    """One-draw Monte-Carlo estimate of the negative streaming ELBO plus distillation.

    ``new_sample`` is ``(z, y)`` (or None), ``replay_batch`` a sequence of
    ``(z, y)`` and ``kd_batch`` a sequence of ``(z, h)``. A single weight draw
    is shared by every term. Pass ``sample`` to freeze epsilon (gradient
    checks); ``kl_scale`` multiplies the KL term on top of ``lambda1``.
    ``reduction="mean"`` averages the cross-entropy rows and the logit-matching
    pairs instead of summing them.

    Returns ``(loss, GradientPair)``.
    """
    shape = post.shape
    if sample is None:
        sample = sample_weights(post, rng)
    elif sample.theta.shape != post.mu.shape:
        raise ShapeError("weight sample", post.mu.shape, sample.theta.shape)
    ce = ([new_sample] if new_sample is not None else []) + list(replay_batch)
    if ce:
        z = np.stack([np.asarray(zz, dtype=np.float64) for zz, _ in ce])
        y = np.array([int(yy) for _, yy in ce])
    else:
        z = np.empty((0, shape.input_dim))
        y = np.empty(0, dtype=np.int64)
    if kd_batch:
        kd_z = np.stack([np.asarray(zz, dtype=np.float64) for zz, _ in kd_batch])
        kd_h = np.stack([np.asarray(h, dtype=np.float64) for _, h in kd_batch])
    else:
        kd_z = kd_h = None
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    ce_scale = kd_scale = 1.0
    if reduction == "mean":
        ce_scale = 1.0 / max(len(ce), 1)
        kd_scale = 1.0 / max(len(kd_batch), 1)
    return elbo_loss(post, prior, sample, z, y, kd_z, kd_h, lambda1 * kl_scale, lambda2, ce_scale, kd_scale)


def elbo_loss(post, prior, sample, z, y, kd_z, kd_h, kl_weight, lambda2, ce_scale=1.0, kd_scale=1.0):
    """Array form of ``streaming_loss`` with an explicit weight draw and KL weight."""
    loss, g_theta = data_loss_and_grad(post.shape, sample.theta, z, y, kd_z, kd_h, lambda2,
                                       ce_scale, kd_scale)
    d_mu = g_theta
    d_rho = g_theta * sample.epsilon * softplus_grad(post)
    if kl_weight != 0.0 and prior is not None:
        loss += kl_weight * kl_diag_gaussians(post, prior)
        kg = kl_grads(post, prior)
        d_mu = d_mu + kl_weight * kg.d_mu
        d_rho = d_rho + kl_weight * kg.d_rho
    return loss, GradientPair(d_mu, d_rho)


# ---------------------------------------------------------------------------
# prediction


def predict_proba(post: MeanFieldPosterior, z, k: int = DEFAULT_K, rng: np.random.Generator | None = None):
    """Softmax output averaged over ``k`` weight draws (batched over rows of z)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    z = np.asarray(z, dtype=np.float64)
    z2 = _as_batch(post.shape, z)
    probs = np.zeros((z2.shape[0], post.shape.output_dim))
    for _ in range(k):
        probs += softmax(forward(post.shape, sample_weights(post, rng).theta, z2))
    probs /= k
    return probs[0] if z.ndim == 1 else probs


def entropy(p) -> np.ndarray:
    """Natural-log entropy along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def uncertainty(post: MeanFieldPosterior, z, k: int = DEFAULT_K, rng: np.random.Generator | None = None):
    """Predictive entropy of the k-draw averaged softmax."""
    h = entropy(predict_proba(post, z, k, rng))
    return float(h) if np.ndim(h) == 0 else h


def score_batch(post: MeanFieldPosterior, z, y, k: int, rng: np.random.Generator):
    """Loss, logits and uncertainty per row from k shared weight draws.

    Logits are the draw-averaged logits, the loss is ``-ln pbar[y]`` and the
    uncertainty is the entropy of ``pbar``.
    """
    z2 = _as_batch(post.shape, z)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    logits = np.zeros((z2.shape[0], post.shape.output_dim))
    probs = np.zeros_like(logits)
    for _ in range(k):
        out = forward(post.shape, sample_weights(post, rng).theta, z2)
        logits += out
        probs += softmax(out)
    logits /= k
    probs /= k
    rows = np.arange(len(y))
    loss = -np.log(np.maximum(probs[rows, y], 1e-300))
    return loss, logits, entropy(probs)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(post: MeanFieldPosterior, grads: GradientPair, opt: OptimizerState):
    """Momentum SGD on (mu, rho); weight decay touches mu only.

    Returns new (posterior, optimizer state); inputs are left untouched.
    """
    if grads.d_mu.shape != post.mu.shape or grads.d_rho.shape != post.rho.shape:
        raise ShapeError("gradient", post.mu.shape, (grads.d_mu.shape, grads.d_rho.shape))
    if not (np.all(np.isfinite(grads.d_mu)) and np.all(np.isfinite(grads.d_rho))):
        raise NonFiniteGradient("non-finite gradient; training halted")
    v_mu = opt.momentum * opt.velocity_mu + grads.d_mu
    if opt.weight_decay:
        v_mu += opt.weight_decay * post.mu
    v_rho = opt.momentum * opt.velocity_rho + grads.d_rho
    mu, rho = post.mu - opt.lr * v_mu, post.rho - opt.lr * v_rho
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(rho))):
        raise NonFiniteGradient("update produced non-finite parameters; training halted")
    new_post = MeanFieldPosterior(post.shape, mu, rho)
    new_opt = OptimizerState(v_mu, v_rho, opt.lr, opt.momentum, opt.weight_decay)
    return new_post, new_opt
