"""MAP training, diagonal Laplace approximation and last-layer mean-field VB."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import LabeledSet
from .errors import ConfigurationError, DomainError, TrainingAbort
from .likelihoods import dirichlet_from_logits, joint_terms, log_prior, uniform_labels
from .models import Posterior, features, forward, head, predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = False
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")


@dataclass
class VbConfig:
    tau: float = 0.1
    prior_precision: float = 5e-4
    elbo_samples: int = 5
    predict_samples: int = 200
    init_log_std: float = -3.0
    learn_std: bool = True

    def __post_init__(self):
        if self.tau < 0 or not self.prior_precision > 0:
            raise ConfigurationError("need tau >= 0 and a positive prior precision")
        if self.elbo_samples < 1 or self.predict_samples < 1:
            raise ConfigurationError("MC sample counts must be positive")


def default_prior_grid():
    return list(np.logspace(-4, 4, 15))


@dataclass
class LaplaceConfig:
    prior_grid: list = field(default_factory=default_prior_grid)
    include_ood_in_fisher: bool = True
    predict_samples: int = 20
    scope: str = "full"
    seed: int = 0

    def __post_init__(self):
        if not self.prior_grid or any(not lam > 0 for lam in self.prior_grid):
            raise ConfigurationError("prior grid must be non-empty and positive")
        if self.scope not in ("full", "last-layer"):
            raise ConfigurationError(f"unknown Laplace scope {self.scope!r}")


def cosine_lr(lr0, step, total):
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


class Adam:
    def __init__(self, n, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, n, momentum=0.9, nesterov=False):
        self.mu = momentum
        self.nesterov = nesterov
        self.buf = np.zeros(n)

    def step(self, params, grad, lr):
        self.buf = self.mu * self.buf + grad
        params -= lr * (grad + self.mu * self.buf if self.nesterov else self.buf)


def _optimizer(cfg, n):
    if cfg.optimizer == "adam":
        return Adam(n, cfg.betas)
    return Sgd(n, cfg.momentum, cfg.nesterov)


class _Batches:
    """Shuffled minibatch indices; the OOD stream reshuffles whenever it runs out."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def epoch(self):
        perm = self.rng.permutation(self.n)
        return [perm[i:i + self.bs] for i in range(0, self.n, self.bs)]

    def next(self):
        if self.pos + self.bs > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        idx = self.perm[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def _check_ood(spec, D_out):
    if spec.uses_ood and (D_out is None or len(D_out) == 0):
        raise ConfigurationError(f"likelihood {spec.variant!r} needs OOD training data")


def _as_set(D_out):
    if D_out is None or isinstance(D_out, LabeledSet):
        return D_out
    return LabeledSet(np.asarray(D_out, dtype=np.float64), origin="out")


def train_map(model, spec, D, D_out=None, cfg=None):
    """Maximize the joint objective by minibatch ascent.

    The optimizer sees the objective divided by ``len(D)``; with that
    normalization ``cfg.weight_decay`` is the usual L2 coefficient, i.e. the
    prior precision is ``weight_decay * len(D)``.

    Returns ``(model, trace)`` where ``trace`` holds one dict per step with
    keys ``step``, ``lr`` and ``objective`` (the normalized minibatch value).
    """
    cfg = cfg or TrainConfig()
    D_out = _as_set(D_out)
    _check_ood(spec, D_out)
    m = len(D)
    m_out = len(D_out) if spec.uses_ood else None
    precision = cfg.weight_decay * m
    rng = np.random.default_rng(cfg.seed)
    batches = _Batches(m, cfg.batch_size, rng)
    ood_batches = _Batches(m_out, cfg.batch_size, np.random.default_rng(cfg.seed + 1)) \
        if spec.uses_ood else None
    params = model.params.copy()
    opt = _optimizer(cfg, params.size)
    total = cfg.epochs * math.ceil(m / batches.bs)
    trace, step = [], 0
    for _ in range(cfg.epochs):
        for idx in batches.epoch():
            lr = cosine_lr(cfg.lr, step, total) if cfg.cosine_decay else cfg.lr
            g = ad.Graph()
            theta = g.leaf(params)
            out_b = D_out.subset(ood_batches.next()) if ood_batches else None
            in_term, ood_term = joint_terms(spec, model, theta, D.subset(idx), out_b, m, m_out)
            obj = in_term if ood_term is None else in_term + ood_term
            if precision:
                obj = obj + log_prior(theta, precision)
            obj = obj / m
            value = obj.item()
            if not math.isfinite(value):
                raise TrainingAbort(f"non-finite objective at step {step} (lr={lr:g})", step, lr)
            g.backward(obj)
            opt.step(params, -theta.grad, lr)
            trace.append({"step": step, "lr": lr, "objective": value})
            step += 1
    log.debug("train_map: %d steps, final objective %.6g", step, trace[-1]["objective"])
    return model.copy(params), trace


def objective_and_grad(model, spec, D, D_out=None, weight_decay=0.0):
    """Full-batch normalized objective (as seen by :func:`train_map`) and its gradient."""
    D_out = _as_set(D_out)
    m = len(D)

    def fn(g, theta):
        in_term, ood_term = joint_terms(spec, model, theta, D, D_out if spec.uses_ood else None)
        obj = in_term if ood_term is None else in_term + ood_term
        if weight_decay:
            obj = obj + log_prior(theta, weight_decay * m)
        return obj / m

    return ad.value_and_grad(fn, model.params)


# --- Laplace ----------------------------------------------------------------

def _accumulate_per_example(trace, fisher, model, weights):
    """Add sum_i weights[i] * (per-example gradient)^2 read from the traced layers."""
    for a, z, i in trace:
        w_off, (n_out, n_in), b_off, _ = model.layer_slices()[i]
        d2 = z.grad ** 2 * weights[:, None]
        fisher[w_off:w_off + n_out * n_in] += (d2.T @ (a.value ** 2)).ravel()
        fisher[b_off:b_off + n_out] += d2.sum(axis=0)


def fisher_diagonal(model, spec, D, D_out=None, include_ood=True, batch_size=1024):
    """Diagonal Fisher of the joint log-likelihood at ``model.params`` (summed, not averaged).

    In-distribution rows contribute the exact expected Fisher of the
    categorical predictive: sum over classes k of p_k times the squared
    gradient of log p_k. OOD rows contribute the expected Fisher over all
    c+1 classes for ``nc`` and the squared gradient of their own OOD term
    (replicated labels for ``oe``) otherwise, times the OOD weight.
    """
    D_out = _as_set(D_out)
    c = model.n_out
    F = np.zeros(model.n_params)
    _expected_fisher(model, D.X, F, batch_size)
    if not (include_ood and spec.uses_ood and D_out is not None and len(D_out)):
        return _finite(F)
    F_out = np.zeros(model.n_params)
    if spec.variant == "nc":
        w = spec.weight(c - 1, len(D), len(D_out))
        _expected_fisher(model, D_out.X, F_out, batch_size)
        return _finite(F + w * F_out)
    w = spec.weight(c, len(D), len(D_out))
    gamma = c if spec.gamma_out is None else spec.gamma_out
    for s in range(0, len(D_out), batch_size):
        Xb = D_out.X[s:s + batch_size]
        ones = np.ones(Xb.shape[0])
        g = ad.Graph()
        trace = []
        z = forward(model, g.constant(model.params), Xb, trace)
        local = np.zeros(model.n_params)
        if spec.variant == "oe":
            lp = ad.log_softmax(z)
            for k in range(c):
                g.zero_grad()
                g.backward(ad.pick(lp, np.full(Xb.shape[0], k)).sum())
                _accumulate_per_example(trace, local, model, ones)
        else:
            g.backward(dirichlet_from_logits(z, uniform_labels(Xb.shape[0], c), gamma))
            _accumulate_per_example(trace, local, model, ones)
        F_out += local
    return _finite(F + w * F_out)


def _expected_fisher(model, X, out, batch_size):
    for s in range(0, X.shape[0], batch_size):
        g = ad.Graph()
        trace = []
        lp = ad.log_softmax(forward(model, g.constant(model.params), X[s:s + batch_size], trace))
        p = np.exp(lp.value)
        # each batch is summed on its own first, so a set fed twice in aligned
        # batches gives exactly twice the Fisher
        local = np.zeros_like(out)
        for k in range(model.n_out):
            g.zero_grad()
            g.backward(ad.pick(lp, np.full(p.shape[0], k)).sum())
            _accumulate_per_example(trace, local, model, p[:, k])
        out += local


def _finite(F):
    if not np.all(np.isfinite(F)):
        raise TrainingAbort("non-finite Fisher entries")
    return F


def _scope_slice(model, scope):
    return model.last_layer_slice if scope == "last-layer" else (0, model.n_params)


def tune_prior_precision(model, fisher, grid, val, offset=0, n_samples=20, seed=0,
                         n_classes=None):
    """Grid value minimizing the validation Brier score of the Laplace predictive.

    ``fisher`` covers ``[offset, offset + len(fisher))``. Every candidate uses
    the same MC seed. Ties go to the larger precision. Returns
    ``(best, {precision: brier})``.
    """
    if not len(grid):
        raise ConfigurationError("empty prior-precision grid")
    mean = model.params[offset:offset + fisher.size]
    scores = {}
    for lam in sorted(grid, reverse=True):
        post = Posterior("diag", mean, 1.0 / (fisher + lam), offset, n_samples)
        scores[lam] = metrics.brier(predict(model, post, val.X, seed), val.y)
    best = None
    for lam in sorted(grid, reverse=True):
        if best is None or scores[lam] < scores[best]:
            best = lam
    return best, scores


def fit_laplace(model, spec, D, D_out=None, cfg=None, val=None):
    """Diagonal Laplace posterior around ``model.params`` with a tuned prior precision.

    Without a validation set the grid must be a single value.
    """
    cfg = cfg or LaplaceConfig()
    off, n = _scope_slice(model, cfg.scope)
    F = fisher_diagonal(model, spec, D, D_out, cfg.include_ood_in_fisher)[off:off + n]
    if len(cfg.prior_grid) == 1:
        lam, scores = cfg.prior_grid[0], {}
    elif val is None:
        raise ConfigurationError("tuning the prior precision needs a validation set")
    else:
        lam, scores = tune_prior_precision(model, F, cfg.prior_grid, val, off,
                                           cfg.predict_samples, cfg.seed)
    post = Posterior("diag", model.params[off:off + n].copy(), 1.0 / (F + lam), off,
                     cfg.predict_samples)
    post.meta.update(prior_precision=lam, brier_profile=scores, fisher=F)
    return post


# --- variational Bayes -------------------------------------------------------

def kl_diag_gaussian(q_mean, q_var, p_mean, p_var):
    """KL(q || p) between diagonal Gaussians, summed over coordinates."""
    q_mean, q_var, p_mean, p_var = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (q_mean, q_var, p_mean, p_var)))
    if np.any(q_var <= 0) or np.any(p_var <= 0):
        raise DomainError("variances must be positive")
    terms = q_var / p_var + (q_mean - p_mean) ** 2 / p_var - 1.0 + np.log(p_var / q_var)
    return 0.5 * float(terms.sum())


def _kl_node(mu, log_std, prior_precision):
    # KL(N(mu, exp(2 log_std)) || N(0, 1/prior_precision)) on the tape
    q_var = ad.exp(log_std * 2.0)
    n = mu.shape[0]
    quad = (q_var + mu * mu).sum() * prior_precision
    return (quad - log_std.sum() * 2.0 + (-n - n * math.log(prior_precision))) * 0.5


def fit_vb(model, spec, D, D_out=None, cfg=None, train_cfg=None):
    """Mean-field Gaussian over the last layer, earlier layers frozen at ``model.params``.

    Maximizes E_q[log p(data | theta)] - tau * KL(q || p) with reparameterized
    samples, p = N(0, 1/prior_precision). Returns ``(posterior, trace)``;
    trace rows carry ``step, lr, objective, elbo, kl`` with ``objective`` =
    ``elbo / len(D)``.
    """
    cfg = cfg or VbConfig()
    train_cfg = train_cfg or TrainConfig()
    D_out = _as_set(D_out)
    _check_ood(spec, D_out)
    off, n = model.last_layer_slice
    m = len(D)
    m_out = len(D_out) if spec.uses_ood else None
    H = LabeledSet(features(model, D.X), D.y, D.soft, "in")
    H_out = LabeledSet(features(model, D_out.X), origin="out") if spec.uses_ood else None
    mu = model.params[off:].copy()
    log_std = np.full(n, cfg.init_log_std)
    rng = np.random.default_rng(train_cfg.seed)
    eps_rng = np.random.default_rng(train_cfg.seed + 2)
    batches = _Batches(m, train_cfg.batch_size, rng)
    ood_batches = _Batches(m_out, train_cfg.batch_size, np.random.default_rng(train_cfg.seed + 1)) \
        if spec.uses_ood else None
    opt = _optimizer(train_cfg, 2 * n)
    total = train_cfg.epochs * math.ceil(m / batches.bs)
    trace, step = [], 0
    for _ in range(train_cfg.epochs):
        for idx in batches.epoch():
            lr = cosine_lr(train_cfg.lr, step, total) if train_cfg.cosine_decay else train_cfg.lr
            g = ad.Graph()
            mu_v, ls_v = g.leaf(mu), g.leaf(log_std)
            std_v = ad.exp(ls_v)
            hb = H.subset(idx)
            ob = H_out.subset(ood_batches.next()) if ood_batches else None
            data = None
            for _s in range(cfg.elbo_samples):
                w = mu_v + std_v * eps_rng.standard_normal(n)
                in_term, ood_term = joint_terms(spec, model, None, hb, ob, m, m_out,
                                                logits_of=lambda X, w=w: head(model, w, X))
                term = in_term if ood_term is None else in_term + ood_term
                data = term if data is None else data + term
            data = data / cfg.elbo_samples
            kl = _kl_node(mu_v, ls_v, cfg.prior_precision)
            elbo = data - kl * cfg.tau if cfg.tau else data
            obj = elbo / m
            value = elbo.item()
            if not math.isfinite(value):
                raise TrainingAbort(f"non-finite ELBO at step {step} (lr={lr:g})", step, lr)
            g.backward(obj)
            grad = -np.concatenate([mu_v.grad, ls_v.grad if cfg.learn_std else np.zeros(n)])
            both = np.concatenate([mu, log_std])
            opt.step(both, grad, lr)
            mu = both[:n]
            if cfg.learn_std:
                log_std = both[n:]
            trace.append({"step": step, "lr": lr, "objective": value / m, "elbo": value,
                          "kl": kl.item()})
            step += 1
    post = Posterior("diag", mu, np.exp(2 * log_std), off, cfg.predict_samples)
    return post, trace


def write_trace(path, trace):
    """CSV with columns step, lr, objective and, if any row is a VB step, elbo and kl.

    Rows without a VB value (MAP steps before VB) leave those cells empty.
    """
    cols = ["step", "lr", "objective"]
    if any("elbo" in row for row in trace):
        cols += ["elbo", "kl"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) if k in row else "" for k in cols[1:]])
