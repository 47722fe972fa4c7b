"""Log-likelihoods for in- and out-of-distribution training data.

Every function builds nodes on the graph that owns ``theta`` and returns a
scalar node, so gradients come from :meth:`Graph.backward`. Values are sums
over the rows they are given; minibatch rescaling happens in
:func:`joint_objective`.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import LabeledSet, concat
from .errors import ConfigurationError, DomainError, UsageError
from .models import forward
from .special import lgamma

VARIANTS = ("cat", "nc", "sl", "ml", "oe")
OOD_VARIANTS = ("nc", "sl", "ml", "oe")


@dataclass
class LikelihoodSpec:
    """Which likelihood to train with.

    ``gamma``/``gamma_out`` are the Dirichlet precisions for in- and
    out-of-distribution terms (``None`` means the class count).
    ``ood_weight`` multiplies the OOD term; ``None`` picks the default of the
    variant, which for ``oe`` is the tempering that turns the OOD term into
    the usual per-batch mean of cross-entropies to uniform.
    """

    variant: str = "cat"
    gamma: float = None
    gamma_out: float = None
    ood_weight: float = None
    untempered: bool = False
    label_smoothing: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown likelihood {self.variant!r}; pick from {VARIANTS}")
        for g in (self.gamma, self.gamma_out):
            if g is not None and not g > 0:
                raise ConfigurationError("Dirichlet precision must be positive")
        if not 0 < self.label_smoothing < 1:
            raise ConfigurationError("label smoothing must lie in (0, 1)")

    @property
    def uses_ood(self):
        return self.variant in OOD_VARIANTS

    def weight(self, n_classes, m_in, m_out):
        """OOD-term multiplier for a full set of ``m_in`` in- and ``m_out`` OOD rows."""
        if self.ood_weight is not None:
            return float(self.ood_weight)
        if self.variant == "oe" and not self.untempered:
            return m_in / (n_classes * m_out)
        return 1.0


def _hard(batch):
    if isinstance(batch, LabeledSet):
        if not batch.is_hard:
            raise UsageError("this likelihood needs hard integer labels")
        return batch.X, batch.y
    return batch


def categorical_log_lik(model, theta, X, y=None):
    """Sum over rows of ``log softmax(F(x))[y]``. Accepts a LabeledSet as ``X``."""
    if y is None:
        X, y = _hard(X)
    y = np.asarray(y, dtype=np.int64)
    return ad.pick(ad.log_softmax(forward(model, theta, X)), y).sum()


def categorical_from_logits(z, y):
    return ad.pick(ad.log_softmax(z), y).sum()


def dirichlet_from_logits(z, Y, gamma):
    """Summed Dirichlet log-density of soft labels ``Y`` with concentration gamma * softmax(z)."""
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(Y <= 0):
        raise DomainError("Dirichlet likelihood needs strictly positive soft labels")
    if Y.shape != z.shape:
        raise ConfigurationError(f"soft labels {Y.shape} do not match logits {z.shape}")
    alpha = ad.softmax(z) * gamma
    per_entry = (alpha - 1.0) * np.log(Y) - ad.lgamma_(alpha)
    return per_entry.sum() + Y.shape[0] * float(lgamma(gamma))


def dirichlet_log_lik(model, theta, X, Y=None, gamma=None):
    """Sum over rows of log Dir(y | gamma * softmax(F(x)))."""
    if Y is None:
        if not X.is_soft:
            raise UsageError("Dirichlet likelihood needs soft labels")
        X, Y = X.X, X.soft
    z = forward(model, theta, X)
    gamma = z.shape[1] if gamma is None else gamma
    return dirichlet_from_logits(z, Y, gamma)


def uniform_labels(m, c):
    return np.full((m, c), 1.0 / c)


def smooth_labels(y, c, eps=0.01):
    """(1 - eps) * onehot(y) + eps / c."""
    out = np.full((len(y), c), eps / c)
    out[np.arange(len(y)), y] += 1.0 - eps
    return out


def none_class_transform(D, D_out, c):
    """Union of ``D`` and ``D_out`` with every OOD row labeled ``c`` (0-based)."""
    if D_out is None or len(D_out) == 0:
        return LabeledSet(D.X, D.y, origin="in", n_classes=c + 1)
    if len(D) and D.dim != D_out.dim:
        raise ConfigurationError(f"feature dimensions differ: {D.dim} vs {D_out.dim}")
    out = LabeledSet(D_out.X, np.full(len(D_out), c), origin="in", n_classes=c + 1)
    if len(D) == 0:
        return out
    return concat(LabeledSet(D.X, D.y, origin="in", n_classes=c + 1), out)


def replicate_ood_labels(D_out, c):
    """Each OOD row repeated once per class, labels 0..c-1 (row-major, class-minor)."""
    if c < 2:
        raise ConfigurationError("need at least two classes")
    X = D_out.X if isinstance(D_out, LabeledSet) else np.asarray(D_out, dtype=np.float64)
    return LabeledSet(np.repeat(X, c, axis=0), np.tile(np.arange(c), X.shape[0]),
                      origin="out", n_classes=c)


def oe_log_lik(model, theta, X_out, tempered=False):
    """Sum over OOD rows and all classes of ``log softmax(F(x))[k]``.

    With ``tempered`` the sum is divided by ``c * m_out``.
    """
    X_out = X_out.X if isinstance(X_out, LabeledSet) else np.asarray(X_out, dtype=np.float64)
    m, c = X_out.shape[0], model.n_out
    if m == 0:
        return theta.graph.constant(0.0)
    # evaluated on the replicated inputs: BLAS does not promise bitwise-equal
    # rows for duplicated inputs, and this must equal the replicated
    # categorical likelihood exactly
    v = categorical_log_lik(model, theta, replicate_ood_labels(X_out, c))
    return v / (c * m) if tempered else v


def mixed_log_lik(model, theta, D, X_out, gamma=None, ood_weight=1.0):
    """Categorical over hard-labeled ``D`` plus Dirichlet(u) over OOD rows."""
    value = categorical_log_lik(model, theta, D)
    X_out = X_out.X if isinstance(X_out, LabeledSet) else np.asarray(X_out, dtype=np.float64)
    if X_out.shape[0] == 0:
        return value
    c = model.n_out
    ood = dirichlet_log_lik(model, theta, X_out, uniform_labels(X_out.shape[0], c), gamma)
    return value + ood * ood_weight


def log_prior(theta, precision):
    """Zero-mean isotropic Gaussian, dropping the normalizing constant."""
    return (theta * theta).sum() * (-0.5 * precision)


def joint_terms(spec, model, theta, D, D_out=None, m_in=None, m_out=None, logits_of=None):
    """Data terms of the joint objective as separate nodes.

    ``D``/``D_out`` are (mini)batches; ``m_in``/``m_out`` are the full-set
    sizes they stand for (default: the batch sizes). Returns
    ``(in_term, ood_term)`` with the minibatch and OOD weights applied;
    ``ood_term`` is ``None`` for the plain categorical likelihood.

    ``logits_of`` maps an input matrix to a logits node; it defaults to the
    full network at ``theta`` and lets callers substitute, e.g., a sampled
    last layer on fixed features.
    """
    if logits_of is None:
        def logits_of(X):
            return forward(model, theta, X)
    m_b = len(D)
    m_in = m_b if m_in is None else m_in
    c_model = model.n_out
    if spec.variant == "sl":
        Y = D.soft if D.is_soft else smooth_labels(D.y, c_model, spec.label_smoothing)
        gamma = c_model if spec.gamma is None else spec.gamma
        in_term = dirichlet_from_logits(logits_of(D.X), Y, gamma)
    else:
        X, y = _hard(D)
        in_term = categorical_from_logits(logits_of(X), y)
    if m_b and m_in != m_b:
        in_term = in_term * (m_in / m_b)
    if not spec.uses_ood:
        return in_term, None
    if D_out is None:
        raise ConfigurationError(f"likelihood {spec.variant!r} needs OOD training data")
    X_out = D_out.X if isinstance(D_out, LabeledSet) else np.asarray(D_out, dtype=np.float64)
    mo_b = X_out.shape[0]
    m_out = mo_b if m_out is None else m_out
    if mo_b == 0:
        return in_term, in_term.graph.constant(0.0)
    if spec.variant == "nc":
        c = c_model - 1
        ood = categorical_from_logits(logits_of(X_out), np.full(mo_b, c))
        w = spec.weight(c, m_in, m_out)
    elif spec.variant in ("sl", "ml"):
        gamma = c_model if spec.gamma_out is None else spec.gamma_out
        ood = dirichlet_from_logits(logits_of(X_out), uniform_labels(mo_b, c_model), gamma)
        w = spec.weight(c_model, m_in, m_out)
    else:
        rep = replicate_ood_labels(X_out, c_model)
        ood = categorical_from_logits(logits_of(rep.X), rep.y)
        w = spec.weight(c_model, m_in, m_out)
    scale = w * m_out / mo_b
    return in_term, ood * scale if scale != 1.0 else ood


def joint_objective(spec, model, theta, D, D_out=None, prior_precision=0.0,
                    m_in=None, m_out=None):
    """Log-likelihood of both data sets plus the Gaussian log-prior (to maximize)."""
    in_term, ood_term = joint_terms(spec, model, theta, D, D_out, m_in, m_out)
    total = in_term if ood_term is None else in_term + ood_term
    if prior_precision:
        total = total + log_prior(theta, prior_precision)
    return total
