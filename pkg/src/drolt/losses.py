"""Contrastive centroid NLL, its robust upper bound, the lower bound, and the joint objective.

Every sample ``z`` of class ``c`` is scored against the class centroid with
a softmax over distances to all samples of the batch::

    P(z | mu_c) = exp(-d(mu_c, z)) / sum_{z'} exp(-d(mu_c, z'))

The robust surrogate adds ``2 * eps_c`` to the distance of every same-class
sample (numerator included), which upper-bounds the NLL for any centroid
within ``eps_c`` of the empirical one.  Flipping the sign gives the matching
lower bound.
"""

from dataclasses import dataclass

import numpy as np

from drolt import kernels
from drolt.epsilon import EpsilonPolicy

WEIGHT_MODES = ("inverse_count", "in_batch", "uniform")


@dataclass(frozen=True)
class FeatureBatch:
    """Embeddings with labels and the per-class weights w(c) of the loss."""

    embeddings: np.ndarray
    labels: np.ndarray
    class_weights: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.embeddings, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if z.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {z.shape}")
        if y.shape != (z.shape[0],):
            raise ValueError("need exactly one label per embedding")
        if y.size and (y.min() < 0 or y.max() >= w.shape[0]):
            raise ValueError(f"labels must lie in [0, {w.shape[0]})")
        if np.any(w < 0):
            raise ValueError("class weights must be nonnegative")
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_weights", w)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self):
        return self.class_weights.shape[0]


def class_weights(labels, class_counts, mode="inverse_count"):
    """w(c) under one of ``inverse_count`` (1/|S_c| from the dataset),
    ``in_batch`` (1/count in this batch) or ``uniform`` (1)."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if mode == "inverse_count":
        return np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    if mode == "in_batch":
        m = np.bincount(np.asarray(labels), minlength=len(counts)).astype(np.float64)
        return np.where(m > 0, 1.0 / np.maximum(m, 1.0), 0.0)
    if mode == "uniform":
        return np.ones_like(counts)
    raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def make_batch(embeddings, labels, class_counts, mode="inverse_count"):
    return FeatureBatch(embeddings, labels, class_weights(labels, class_counts, mode))


@dataclass
class LossResult:
    value: float
    per_sample: np.ndarray | None = None
    grad_embeddings: np.ndarray | None = None
    grad_centroids: np.ndarray | None = None
    grad_epsilon: np.ndarray | None = None
    grad_logits: np.ndarray | None = None


def _centroids(batch, bank):
    centroids = bank.centroids if hasattr(bank, "centroids") else np.asarray(bank, dtype=np.float64)
    if centroids.ndim != 2 or (len(batch) and centroids.shape[1] != batch.embeddings.shape[1]):
        raise ValueError("centroid dimension does not match embedding dimension")
    missing = np.setdiff1d(np.unique(batch.labels), np.arange(centroids.shape[0]))
    if missing.size:
        raise KeyError(f"no centroid for class {int(missing[0])}")
    if centroids.shape[0] < batch.n_classes:
        centroids = np.vstack([centroids, np.zeros((batch.n_classes - centroids.shape[0], centroids.shape[1]))])
    return centroids[: batch.n_classes]


def _radii(eps, n_classes):
    if isinstance(eps, EpsilonPolicy):
        values = eps.values()
    else:
        values = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n_classes,)).copy()
    if values.shape[0] < n_classes:
        raise ValueError(f"need a radius for each of {n_classes} classes")
    values = values[:n_classes]
    if np.any(values < 0):
        bad = int(np.flatnonzero(values < 0)[0])
        raise ValueError(f"negative radius {values[bad]} for class {bad}")
    return values


def _shifted(batch, bank, radii, sign, need_grad=True):
    if len(batch) == 0:
        raise ValueError("empty batch")
    centroids = _centroids(batch, bank)
    value, per, gz, gm, ge = kernels.margin_loss(
        batch.embeddings, batch.labels, centroids, radii, batch.class_weights, float(sign), need_grad
    )
    return LossResult(float(value), per, gz, gm, ge)


def sample_likelihood(z, centroid, batch):
    """Normalized likelihood of ``z`` (a member of ``batch``) under ``centroid``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    z = np.asarray(z, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    d_all = np.linalg.norm(batch.embeddings - centroid, axis=1)
    d_z = np.linalg.norm(z - centroid)
    m = (-d_all).max()
    log_norm = m + np.log(np.exp(-d_all - m).sum())
    return float(np.exp(-d_z - log_norm))


def nll_loss(batch, bank):
    """Class-weighted NLL with analytic gradients; ``grad_epsilon`` is zero."""
    res = _shifted(batch, bank, np.zeros(batch.n_classes), 1.0)
    res.grad_epsilon = np.zeros(batch.n_classes)
    return res


def robust_loss(batch, bank, eps):
    """Robust surrogate (upper bound) with analytic gradients.

    ``eps`` is an :class:`EpsilonPolicy` or per-class radii.  ``grad_epsilon``
    is the gradient w.r.t. the radii for a learned policy and zero otherwise.
    """
    res = _shifted(batch, bank, _radii(eps, batch.n_classes), 1.0)
    if not (isinstance(eps, EpsilonPolicy) and eps.learned):
        res.grad_epsilon = np.zeros(batch.n_classes)
    return res


def lower_bound_loss(batch, bank, eps):
    """Per-sample lower bound on the NLL over the uncertainty ball."""
    return _shifted(batch, bank, _radii(eps, batch.n_classes), -1.0, need_grad=False).per_sample


def upper_bound_loss(batch, bank, eps):
    """Per-sample upper bound (the summands of :func:`robust_loss`)."""
    return _shifted(batch, bank, _radii(eps, batch.n_classes), 1.0, need_grad=False).per_sample


def per_sample_nll(batch, centroids):
    """``-log P(z_i | mu_{y_i})`` for every sample, with explicit centroids."""
    return _shifted(batch, centroids, np.zeros(batch.n_classes), 1.0, need_grad=False).per_sample


def bound_gap_ratio(batch, bank, eps):
    """Mean over samples of ``|upper - lower| / upper``."""
    radii = _radii(eps, batch.n_classes)
    upper = upper_bound_loss(batch, bank, radii)
    lower = lower_bound_loss(batch, bank, radii)
    if np.any(upper <= 0):
        raise ValueError("robust loss is zero for some sample; gap ratio is undefined")
    return float(np.mean(np.abs(upper - lower) / upper))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted - log_norm[:, None]
    per = -log_prob[np.arange(n), labels]
    grad = np.exp(log_prob)
    grad[np.arange(n), labels] -= 1.0
    return LossResult(float(per.mean()), per_sample=per, grad_logits=grad / n)


def _mix(a, b, lam):
    if a is None and b is None:
        return None
    if a is None:
        return (1.0 - lam) * b
    if b is None:
        return lam * a
    return lam * a + (1.0 - lam) * b


def joint_loss(ce, robust, lam):
    """``lam * ce + (1 - lam) * robust``, gradients combined the same way."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return LossResult(
        value=lam * ce.value + (1.0 - lam) * robust.value,
        grad_embeddings=_mix(ce.grad_embeddings, robust.grad_embeddings, lam),
        grad_centroids=_mix(ce.grad_centroids, robust.grad_centroids, lam),
        grad_epsilon=_mix(ce.grad_epsilon, robust.grad_epsilon, lam),
        grad_logits=_mix(ce.grad_logits, robust.grad_logits, lam),
    )
