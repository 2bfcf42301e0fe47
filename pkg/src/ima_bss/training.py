"""Maximum-likelihood and IMA-regularised training of residual flows.

The objective per point is

    log p_base(g(x)) + (1 - lam) log|J_g(x)| - lam * sum_i log ||col_i(J_g(x)^{-1})||

which is the log-likelihood minus ``lam`` times the local IMA contrast of the
inverse flow at ``g(x)``.  Gradients come from the hand-written reverse pass
in the flow kernels; the optimiser is Adam with cosine learning-rate decay.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .densities import FactorizedDensity, as_array
from .errors import ConfigError, NumericalOverflowError, SingularMatrixError, TrainingAborted
from .flow import BASE_KINDS, DEFAULT_COEFF, DEFAULT_POWER_ITERS, ResidualFlow, get_kernels, save_checkpoint
from .numcore import make_rng

FULL_BATCH_LIMIT = 4096
DEFAULT_MINIBATCH = 512
DEFAULT_ITERATIONS = 20_000


@dataclass
class TrainConfig:
    lam: float = 0.0
    batch_size: int | None = None
    iterations: int = DEFAULT_ITERATIONS
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_decay: bool = True
    seed: int = 0
    base: str = "standard-normal"
    coeff: float = DEFAULT_COEFF
    power_iters: int = DEFAULT_POWER_ITERS
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    backend: str | None = None

    def __post_init__(self):
        if not (isinstance(self.lam, (int, float)) and math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lam must be >= 0, got {self.lam!r}", field="lam")
        if int(self.iterations) < 1:
            raise ConfigError("iterations must be >= 1", field="iterations")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", field="learning_rate")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam moment decays must lie in [0, 1)", field="beta1")
        if not self.eps > 0:
            raise ConfigError("eps must be positive", field="eps")
        if self.base not in BASE_KINDS:
            raise ConfigError(f"base must be one of {sorted(BASE_KINDS)}", field="base")
        if not 0 < self.coeff < 1:
            raise ConfigError("coeff must lie in (0, 1)", field="coeff")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1", field="log_every")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0", field="checkpoint_every")

    def effective_batch(self, n_points: int) -> int:
        if self.batch_size is not None:
            return min(int(self.batch_size), n_points)
        return n_points if n_points < FULL_BATCH_LIMIT else DEFAULT_MINIBATCH

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**d)


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    loglik: list[float] = field(default_factory=list)
    cima_term: list[float] = field(default_factory=list)

    COLUMNS = ("step", "objective", "loglik", "cima_term")

    def append(self, step, objective, loglik, cima_term) -> None:
        self.step.append(int(step))
        self.objective.append(float(objective))
        self.loglik.append(float(loglik))
        self.cima_term.append(float(cima_term))

    def __len__(self):
        return len(self.step)

    def rows(self):
        return list(zip(self.step, self.objective, self.loglik, self.cima_term))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                h.append(int(rec["step"]), float(rec["objective"]), float(rec["loglik"]), float(rec["cima_term"]))
        return h


class Adam:
    """Adam for gradient *ascent* on a flat parameter vector."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        params += lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))


def _base_logpdf(base, y):
    if isinstance(base, FactorizedDensity):
        if base.dim != y.shape[1]:
            raise ValueError("base density dimension does not match the flow")
        logp, _ = base.log_pdf_batch(y)
        return logp
    d = base if isinstance(base, str) else "standard-normal"
    n = y.shape[1]
    dens = FactorizedDensity.standard_normal(n) if d == "standard-normal" else FactorizedDensity.standard_logistic(n)
    logp, _ = dens.log_pdf_batch(y)
    return logp


def _points(x, dim):
    X = np.asarray(as_array(x), dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {X.shape[1]}")
    return X, single


def log_likelihood(flow: ResidualFlow, base, x):
    """Change-of-variables log density ``log p_base(g(x)) + log|J_g(x)|``.

    ``base`` is a :class:`FactorizedDensity` or one of the base names.
    Returns a float for a single point, an array for a batch.
    """
    X, single = _points(x, flow.dim)
    y, logdet = flow.forward_logdet(X)
    out = _base_logpdf(base, y) + logdet
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError("non-finite log-likelihood")
    return float(out[0]) if single else out


def regularized_objective(flow: ResidualFlow, base, x, lam: float):
    """``sum_i log p(y_i) + (1 - lam) log|J_g| - lam sum_i log||col_i(J_g^{-1})||``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    X, single = _points(x, flow.dim)
    y, logdet, P = flow.forward_logdet(X, want_jac=True)
    eye = np.broadcast_to(np.eye(flow.dim), P.shape)
    try:
        Pinv = np.linalg.solve(P, eye)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("flow Jacobian is singular") from exc
    col_terms = np.log(np.linalg.norm(Pinv, axis=1)).sum(axis=1)
    out = _base_logpdf(base, y) + (1.0 - lam) * logdet - lam * col_terms
    return float(out[0]) if single else out


def objective_and_gradient(flow: ResidualFlow, batch, lam: float, base: str = "standard-normal", backend=None):
    """Batch means ``(objective, loglik, penalty)`` and the parameter gradient.

    Entries of the gradient belonging to masked weights are exactly zero.
    """
    X, _ = _points(batch, flow.dim)
    k = get_kernels(backend)
    obj, ll, pen, grad = k.objective_grad(
        flow.theta, flow.shift, flow.scale, X, *flow._dims(), float(lam), BASE_KINDS[base]
    )
    grad = np.asarray(grad)
    if flow.mask is not None:
        grad[~flow.mask] = 0.0
    return float(obj), float(ll), float(pen), grad


def gradient(flow: ResidualFlow, batch, lam: float = 0.0, base: str = "standard-normal", backend=None) -> np.ndarray:
    """Exact gradient of the batch-mean regularised objective."""
    obj, _, _, grad = objective_and_gradient(flow, batch, lam, base, backend)
    if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
        raise NumericalOverflowError("non-finite objective or gradient")
    return grad


def train(
    flow: ResidualFlow,
    data,
    cfg: TrainConfig,
    normalize: bool = True,
    history_path=None,
) -> tuple[ResidualFlow, TrainHistory]:
    """Adam ascent on the regularised objective.

    Works on a copy of ``flow``.  After every step masks are re-applied and
    weights are spectrally normalised.  The run is fully determined by
    ``cfg.seed`` (minibatch order is the only randomness).
    """
    X = np.asarray(as_array(data), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != flow.dim:
        raise ValueError(f"data must have shape (N, {flow.dim})")
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    model = flow.copy()
    if normalize:
        model.set_normalization(X)
    model.apply_masks()
    model.spectral_normalize(cfg.coeff, cfg.power_iters)

    rng = make_rng(cfg.seed)
    n_points = X.shape[0]
    bs = cfg.effective_batch(n_points)
    full = bs >= n_points
    order = rng.permutation(n_points)
    cursor = 0
    opt = Adam(model.n_params, cfg.beta1, cfg.beta2, cfg.eps)
    kern = get_kernels(cfg.backend)
    base_code = BASE_KINDS[cfg.base]
    dims = model._dims()
    history = TrainHistory()
    last_good = model.theta.copy()
    ckpt = Path(cfg.checkpoint_path) if cfg.checkpoint_path else None

    for step in range(cfg.iterations):
        if full:
            batch = X
        else:
            if cursor + bs > n_points:
                order = rng.permutation(n_points)
                cursor = 0
            batch = X[order[cursor:cursor + bs]]
            cursor += bs
        obj, ll, pen, grad = kern.objective_grad(
            model.theta, model.shift, model.scale, batch, *dims, float(cfg.lam), base_code
        )
        grad = np.asarray(grad)
        if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
            model.theta[:] = last_good
            if history_path:
                history.to_csv(history_path)
            raise TrainingAborted("objective became non-finite", step, last_good, history)
        last_good[:] = model.theta
        if step % cfg.log_every == 0:
            history.append(step, obj, ll, pen)
        if model.mask is not None:
            grad[~model.mask] = 0.0
        lr = cosine_lr(cfg.learning_rate, step, cfg.iterations) if cfg.cosine_decay else cfg.learning_rate
        opt.step(model.theta, grad, lr)
        model.apply_masks()
        model.spectral_normalize(cfg.coeff, cfg.power_iters)
        if ckpt is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, ckpt, seed=cfg.seed, extra={"step": step + 1, "train": cfg.to_dict()})

    obj, ll, pen, _ = kern.objective_grad(
        model.theta, model.shift, model.scale, X[:FULL_BATCH_LIMIT], *dims, float(cfg.lam), base_code
    )
    history.append(cfg.iterations, obj, ll, pen)
    if history_path:
        history.to_csv(history_path)
    if ckpt is not None:
        save_checkpoint(model, ckpt, seed=cfg.seed, extra={"step": cfg.iterations, "train": cfg.to_dict()})
    return model, history
