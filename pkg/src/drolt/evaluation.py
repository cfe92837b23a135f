"""Split accuracies, nearest-centroid layer probe, coverage estimator, and per-class reports."""

import csv
from dataclasses import asdict, dataclass
import math

import numpy as np
from scipy import stats

from drolt import kernels
from drolt.data import SplitSpec, assign_splits

PROBE_COLUMNS = ["layer", "acc_many", "acc_med", "acc_few", "acc_balanced"]
ERROR_GAP_COLUMNS = ["class", "count", "split", "train_error", "test_error", "gap"]
EPSILON_COLUMNS = ["class", "count", "epsilon"]


@dataclass(frozen=True)
class SplitAccuracy:
    """Mean per-class accuracy on each split; ``None`` when the split has no classes."""

    many: float | None
    med: float | None
    few: float | None
    balanced: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CoverageEstimate:
    p_hat: float
    trials: int
    stderr: float


def per_class_accuracy(predictions, labels, n_classes):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    hits = np.bincount(labels, weights=(predictions == labels).astype(np.float64), minlength=n_classes)
    totals = np.bincount(labels, minlength=n_classes)
    acc = np.full(n_classes, np.nan)
    seen = totals > 0
    acc[seen] = hits[seen] / totals[seen]
    return acc


def split_accuracy(predictions, labels, splits, n_classes=None):
    """Accuracy per Many/Med/Few split and balanced accuracy over all classes."""
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(max(labels.max(), max((max(v) for v in splits.values() if v), default=0))) + 1
    acc = per_class_accuracy(predictions, labels, n_classes)

    def mean_over(classes):
        vals = [acc[c] for c in classes if not np.isnan(acc[c])]
        return float(np.mean(vals)) if vals else None

    return SplitAccuracy(
        many=mean_over(splits["many"]),
        med=mean_over(splits["med"]),
        few=mean_over(splits["few"]),
        balanced=float(np.nanmean(acc)),
    )


def evaluate(net, dataset, split="test", spec=SplitSpec()):
    x, y = {"test": (dataset.x_test, dataset.y_test), "val": (dataset.x_val, dataset.y_val),
            "train": (dataset.x_train, dataset.y_train)}[split]
    return split_accuracy(net.predict(x), y, assign_splits(dataset.class_counts, spec), dataset.n_classes)


def nearest_centroid_probe(net, dataset, layer, spec=SplitSpec()):
    """Classify test samples by the nearest training-set class centroid at ``layer``.

    Layer 0 is the raw input and the last layer is the embedding.  Ties go to
    the lowest class id.
    """
    n_layers = net.n_blocks + 1
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for a {n_layers}-layer network")
    train_act = net.embed(dataset.x_train)[layer]
    test_act = net.embed(dataset.x_test)[layer]
    centroids = np.stack([train_act[dataset.y_train == c].mean(axis=0) for c in range(dataset.n_classes)])
    pred = kernels.nearest_centroid(centroids, test_act)
    return split_accuracy(pred, dataset.y_test, assign_splits(dataset.class_counts, spec), dataset.n_classes)


def probe_rows(net, dataset):
    rows = []
    for layer in range(net.n_blocks + 1):
        acc = nearest_centroid_probe(net, dataset, layer)
        rows.append({"layer": layer, "acc_many": acc.many, "acc_med": acc.med,
                     "acc_few": acc.few, "acc_balanced": acc.balanced})
    return rows


def estimate_coverage(n, sigma, d, eps_metric, trials, seed=0, chunk=20000):
    """Monte-Carlo probability that the empirical mean of ``n`` draws from
    N(0, sigma^2 I_d) lies within ``eps_metric`` of the true mean."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        draws = sigma * rng.standard_normal((m, n, d))
        centroid = draws.mean(axis=1)
        hits += int(np.count_nonzero(np.linalg.norm(centroid, axis=1) <= eps_metric))
        done += m
    p = hits / trials
    return CoverageEstimate(p, int(trials), math.sqrt(p * (1.0 - p) / trials))


def coverage_closed_form(n, sigma, d, eps_metric):
    """Chi-square form: ``n * |mu_hat|^2 / sigma^2 ~ chi2(d)``."""
    return float(stats.chi2.cdf(n * eps_metric**2 / sigma**2, d))


def error_gap_report(net, dataset, spec=SplitSpec()):
    """Per-class train and balanced-test error, most frequent class first."""
    n_classes = dataset.n_classes
    train_acc = per_class_accuracy(net.predict(dataset.x_train), dataset.y_train, n_classes)
    test_acc = per_class_accuracy(net.predict(dataset.x_test), dataset.y_test, n_classes)
    splits = assign_splits(dataset.class_counts, spec)
    split_of = {c: name for name, cls in splits.items() for c in cls}
    order = sorted(range(n_classes), key=lambda c: (-dataset.class_counts[c], c))
    rows = []
    for c in order:
        tr, te = 1.0 - train_acc[c], 1.0 - test_acc[c]
        rows.append({"class": c, "count": int(dataset.class_counts[c]), "split": split_of[c],
                     "train_error": float(tr), "test_error": float(te), "gap": float(te - tr)})
    return rows


def spearman(x, y):
    """Spearman rank correlation, or ``None`` when either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y).statistic)


def epsilon_report(policy, class_counts):
    """Rows of ``(class, count, epsilon)`` and the count/radius Spearman correlation."""
    values = policy.values()
    counts = np.asarray(class_counts)
    rows = [{"class": c, "count": int(counts[c]), "epsilon": float(values[c])} for c in range(len(counts))]
    return rows, spearman(counts, values)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row[k]) for k in columns})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
