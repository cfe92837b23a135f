"""Synthetic long-tail Gaussian-mixture data, Many/Med/Few splits, balanced resampling."""

from dataclasses import dataclass
import math

import numpy as np

FORMAT_VERSION = 1
MAGIC = "# drolt-dataset"


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    many_threshold: int = 100
    med_threshold: int = 20


@dataclass
class LongTailDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    true_means: np.ndarray
    class_counts: np.ndarray
    beta: float
    seed: int
    spread: float
    n_max: int

    @property
    def n_classes(self):
        return self.true_means.shape[0]

    @property
    def dim(self):
        return self.true_means.shape[1]


def count_profile(n_classes, n_max, beta):
    """Exponential long-tail profile ``round(n_max * beta ** (-c / (C - 1)))``."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if beta < 1:
        raise ValueError("imbalance factor beta must be >= 1")
    counts = np.array(
        [math.floor(n_max * beta ** (-c / (n_classes - 1)) + 0.5) for c in range(n_classes)],
        dtype=np.int64,
    )
    if counts.min() < 1:
        raise ValueError(f"n_max={n_max}, beta={beta} leaves the tail class with no samples")
    return counts


def place_means(n_classes, dim, spread, separation, rng):
    """Uniform means in a hypercube rescaled to mean pairwise distance ``separation * spread``."""
    means = rng.uniform(-0.5, 0.5, size=(n_classes, dim))
    iu = np.triu_indices(n_classes, k=1)
    diff = means[:, None, :] - means[None, :, :]
    mean_dist = np.linalg.norm(diff, axis=2)[iu].mean()
    return means * (separation * spread / mean_dist)


def synthesize(n_classes, n_max, beta, dim, spread=1.0, seed=0, separation=4.0,
               test_per_class=100, val_per_class=20):
    """Draw a long-tail training set plus class-balanced validation and test sets."""
    if not spread > 0:
        raise ValueError("cluster spread must be positive")
    counts = count_profile(n_classes, n_max, beta)
    rng = np.random.default_rng(seed)
    means = place_means(n_classes, dim, spread, separation, rng)

    def draw(per_class):
        xs, ys = [], []
        for c, n in enumerate(per_class):
            xs.append(means[c] + spread * rng.standard_normal((int(n), dim)))
            ys.append(np.full(int(n), c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    x_tr, y_tr = draw(counts)
    x_va, y_va = draw(np.full(n_classes, val_per_class))
    x_te, y_te = draw(np.full(n_classes, test_per_class))
    return LongTailDataset(x_tr, y_tr, x_va, y_va, x_te, y_te, means, counts,
                           float(beta), int(seed), float(spread), int(n_max))


def assign_splits(counts, spec=SplitSpec()):
    """Partition classes into Many (> many), Med (med..many) and Few (< med)."""
    counts = np.asarray(counts)
    many = [c for c, n in enumerate(counts) if n > spec.many_threshold]
    few = [c for c, n in enumerate(counts) if n < spec.med_threshold]
    med = [c for c, n in enumerate(counts) if spec.med_threshold <= n <= spec.many_threshold]
    return {"many": many, "med": med, "few": few}


def balanced_resample(labels, seed):
    """Infinite index stream in which every class is equally likely.

    A class is drawn uniformly, then one of its samples uniformly (so tail
    samples repeat).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot resample an empty dataset")
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    while True:
        group = members[rng.integers(len(members))]
        yield int(group[rng.integers(len(group))])


def balanced_batches(labels, batch_size, n_batches, rng):
    """``n_batches`` index arrays drawn class-uniformly with replacement."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    for _ in range(n_batches):
        picks = rng.integers(len(classes), size=batch_size)
        yield np.array([members[k][rng.integers(len(members[k]))] for k in picks], dtype=np.int64)


def _fmt(v):
    return format(float(v), ".17g")


def save(dataset, path):
    ds = dataset
    lines = [
        f"{MAGIC} v{FORMAT_VERSION}",
        f"version {FORMAT_VERSION}",
        f"classes {ds.n_classes}",
        f"dim {ds.dim}",
        f"beta {_fmt(ds.beta)}",
        f"seed {ds.seed}",
        f"spread {_fmt(ds.spread)}",
        f"n_max {ds.n_max}",
        "counts " + " ".join(str(int(n)) for n in ds.class_counts),
        "means",
    ]
    lines += [" ".join(_fmt(v) for v in row) for row in ds.true_means]
    for name, x, y in (("train", ds.x_train, ds.y_train), ("val", ds.x_val, ds.y_val),
                       ("test", ds.x_test, ds.y_test)):
        lines.append(f"{name} {len(y)}")
        lines += [f"{int(lbl)} " + " ".join(_fmt(v) for v in row) for lbl, row in zip(y, x)]
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, text):
        self.lines = text.split("\n")
        self.pos = 0

    def fail(self, msg):
        raise DatasetFormatError(f"line {self.pos}: {msg}")

    def next(self):
        if self.pos >= len(self.lines) or (self.pos == len(self.lines) - 1 and not self.lines[-1]):
            self.pos += 1
            self.fail("unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def field(self, key):
        parts = self.next().split()
        if not parts or parts[0] != key:
            self.fail(f"expected '{key}'")
        return parts[1:]

    def number(self, key, kind):
        vals = self.field(key)
        if len(vals) != 1:
            self.fail(f"'{key}' takes one value")
        try:
            return kind(vals[0])
        except ValueError:
            self.fail(f"bad value for '{key}': {vals[0]!r}")

    def row(self, width, kind=float):
        parts = self.next().split()
        if len(parts) != width:
            self.fail(f"expected {width} values, got {len(parts)}")
        try:
            return [kind(p) for p in parts]
        except ValueError:
            self.fail("non-numeric value")


def load(path):
    with open(path) as fh:
        r = _Reader(fh.read())
    header = r.next()
    if not header.startswith(MAGIC):
        r.fail("not a drolt dataset file")
    version = r.number("version", int)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version} (expected {FORMAT_VERSION})")
    n_classes = r.number("classes", int)
    dim = r.number("dim", int)
    beta = r.number("beta", float)
    seed = r.number("seed", int)
    spread = r.number("spread", float)
    n_max = r.number("n_max", int)
    try:
        counts = np.array([int(v) for v in r.field("counts")], dtype=np.int64)
    except ValueError:
        r.fail("bad class counts")
    if counts.shape != (n_classes,):
        r.fail(f"expected {n_classes} class counts")
    r.field("means")
    means = np.array([r.row(dim) for _ in range(n_classes)], dtype=np.float64).reshape(n_classes, dim)

    parts = {}
    for name in ("train", "val", "test"):
        n = r.number(name, int)
        rows = [r.row(dim + 1) for _ in range(n)]
        arr = np.array(rows, dtype=np.float64).reshape(n, dim + 1)
        parts[name] = (arr[:, 1:].copy(), arr[:, 0].astype(np.int64))
    if r.next().strip() != "end":
        r.fail("expected 'end'")
    return LongTailDataset(*parts["train"], *parts["val"], *parts["test"], means, counts,
                           beta, seed, spread, n_max)
