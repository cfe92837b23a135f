"""Per-class uncertainty radius policies: shared, 1/sqrt(n) scaled, and learned."""

from dataclasses import dataclass, field, replace

import numpy as np

VARIANTS = ("shared", "sqrt_n", "learned")
LEARNED_INIT = 1.0


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inverse_softplus is defined for positive values only")
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass(frozen=True)
class EpsilonPolicy:
    """Radius policy over ``len(class_counts)`` classes.

    The radius returned for each class is the metric radius consumed by the
    robust loss (the bound on how far a candidate centroid may sit from the
    empirical one).
    """

    variant: str
    class_counts: np.ndarray
    shared_value: float = 0.0
    per_class_param: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown epsilon variant {self.variant!r}; expected one of {VARIANTS}")
        counts = np.asarray(self.class_counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 1):
            raise ValueError("class_counts must be a 1-D array of positive integers")
        object.__setattr__(self, "class_counts", counts)
        if self.shared_value < 0:
            raise ValueError(f"epsilon value must be >= 0, got {self.shared_value}")
        if self.variant == "learned":
            param = self.per_class_param
            if param is None:
                param = np.full(len(counts), float(inverse_softplus(LEARNED_INIT)))
            param = np.array(param, dtype=np.float64)
            if param.shape != counts.shape:
                raise ValueError("per_class_param must have one entry per class")
            object.__setattr__(self, "per_class_param", param)

    @property
    def n_classes(self):
        return len(self.class_counts)

    @property
    def learned(self):
        return self.variant == "learned"

    def values(self):
        """Radius for every class as a float64 array."""
        if self.variant == "shared":
            return np.full(self.n_classes, float(self.shared_value))
        if self.variant == "sqrt_n":
            return self.shared_value / np.sqrt(self.class_counts.astype(np.float64))
        return softplus(self.per_class_param)


def shared(value, class_counts):
    return EpsilonPolicy("shared", class_counts, shared_value=value)


def sqrt_n(value, class_counts):
    return EpsilonPolicy("sqrt_n", class_counts, shared_value=value)


def learned(class_counts, init=LEARNED_INIT):
    counts = np.asarray(class_counts)
    param = np.full(len(counts), float(inverse_softplus(init)))
    return EpsilonPolicy("learned", counts, per_class_param=param)


def make_policy(variant, value, class_counts, init=LEARNED_INIT):
    if variant == "learned":
        return learned(class_counts, init=init)
    return EpsilonPolicy(variant, class_counts, shared_value=value)


def epsilon_for_class(policy, cls):
    if not 0 <= cls < policy.n_classes:
        raise KeyError(f"unknown class {cls} (policy covers {policy.n_classes} classes)")
    return float(policy.values()[cls])


def update_learned_epsilon(policy, grad_epsilon, lr):
    """One SGD step on the learned radii, taken in the softplus parameter space.

    ``grad_epsilon`` is the loss gradient w.r.t. the radii themselves; the
    chain rule through softplus gives the gradient on the raw parameters.
    """
    if not policy.learned:
        raise ValueError(f"cannot update radii of a {policy.variant!r} policy")
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    grad = np.asarray(grad_epsilon, dtype=np.float64)
    if grad.shape != policy.per_class_param.shape:
        raise ValueError("grad_epsilon must have one entry per class")
    param = policy.per_class_param - lr * grad * sigmoid(policy.per_class_param)
    return replace(policy, per_class_param=param)
