"""Epoch-frozen bank of empirical class centroids."""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CentroidBank:
    centroids: np.ndarray
    counts: np.ndarray
    spreads: np.ndarray
    epoch: int

    @property
    def n_classes(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def recompute(features, labels, n_classes, epoch=0):
    """Exact per-class means and mean distances to the mean.

    Every class in ``range(n_classes)`` must have at least one sample.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, d) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no samples; cannot estimate its centroid")

    centroids = np.zeros((n_classes, features.shape[1]))
    spreads = np.zeros(n_classes)
    for c in range(n_classes):
        members = features[labels == c]
        mu = members.mean(axis=0)
        centroids[c] = mu
        spreads[c] = np.linalg.norm(members - mu, axis=1).mean()
    return CentroidBank(_frozen(centroids), _frozen(counts), _frozen(spreads), int(epoch))


def get(bank, cls):
    if not 0 <= cls < bank.n_classes:
        raise KeyError(f"class {cls} is not in the centroid bank")
    return bank.centroids[cls]


def write_csv(bank, path):
    """Snapshot as ``class,count,spread,c0..c{d-1}``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "spread"] + [f"c{k}" for k in range(bank.dim)])
        for c in range(bank.n_classes):
            writer.writerow(
                [c, int(bank.counts[c]), repr(float(bank.spreads[c]))]
                + [repr(float(v)) for v in bank.centroids[c]]
            )
