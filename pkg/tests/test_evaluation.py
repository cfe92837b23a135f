import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drolt import epsilon, evaluation
from drolt.data import LongTailDataset, synthesize
from drolt.model import Network


def test_perfect_predictions():
    labels = np.repeat(np.arange(3), 4)
    acc = evaluation.split_accuracy(labels, labels, {"many": [0], "med": [1], "few": [2]})
    assert acc == evaluation.SplitAccuracy(1.0, 1.0, 1.0, 1.0)


def test_empty_split_is_absent():
    labels = np.array([0, 0, 1, 1])
    acc = evaluation.split_accuracy(np.array([0, 1, 1, 1]), labels, {"many": [0, 1], "med": [], "few": []})
    assert acc.med is None and acc.few is None
    assert acc.many == pytest.approx(0.75)


def test_balanced_is_mean_of_per_class():
    labels = np.array([0, 0, 0, 0, 1, 2, 2])
    pred = np.array([0, 0, 0, 1, 1, 0, 2])
    acc = evaluation.split_accuracy(pred, labels, {"many": [0], "med": [1], "few": [2]})
    assert acc.balanced == pytest.approx((0.75 + 1.0 + 0.5) / 3)


def test_uniform_random_predictions():
    rng = np.random.default_rng(0)
    c, per = 10, 2000
    labels = np.repeat(np.arange(c), per)
    acc = evaluation.split_accuracy(rng.integers(0, c, labels.size), labels, {"many": list(range(c)), "med": [], "few": []})
    sd = np.sqrt((1 / c) * (1 - 1 / c) / labels.size)
    assert abs(acc.balanced - 1 / c) < 3 * sd


def test_balanced_accuracy_ignores_test_frequency():
    # duplicating every sample of one class leaves per-class accuracy unchanged
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(4), 50)
    pred = np.where(rng.random(labels.size) < 0.7, labels, (labels + 1) % 4)
    splits = {"many": [0, 1], "med": [2], "few": [3]}
    base = evaluation.split_accuracy(pred, labels, splits)
    keep = labels == 2
    pert = evaluation.split_accuracy(np.concatenate([pred, pred[keep]]), np.concatenate([labels, labels[keep]]), splits)
    assert pert.balanced == pytest.approx(base.balanced, abs=1e-15)


def _identity_net(dim, n_classes):
    net = Network(dim, [], dim, n_classes)
    net.params["W0"] = np.eye(dim)
    return net


def _manual_dataset(x_train, y_train, x_test, y_test):
    n_classes = int(y_train.max()) + 1
    return LongTailDataset(x_train, y_train, x_train[:0], y_train[:0], x_test, y_test,
                           np.zeros((n_classes, x_train.shape[1])), np.bincount(y_train), 1.0, 0, 1.0, 1)


def test_probe_one_sample_per_class_is_1nn():
    rng = np.random.default_rng(4)
    x_train = rng.normal(size=(5, 3))
    y_train = np.arange(5)
    x_test = rng.normal(size=(200, 3))
    d = np.linalg.norm(x_test[:, None] - x_train[None], axis=2)
    y_test = np.argmin(d, axis=1)  # labels chosen so 1-NN is always right
    ds = _manual_dataset(x_train, y_train, x_test, y_test)
    for layer in (0, 1):
        assert evaluation.nearest_centroid_probe(_identity_net(3, 5), ds, layer).balanced == 1.0


def test_probe_ties_go_to_lowest_class():
    x_train = np.array([[-1.0], [1.0]])
    ds = _manual_dataset(x_train, np.array([0, 1]), np.array([[0.0], [0.0]]), np.array([0, 1]))
    acc = evaluation.nearest_centroid_probe(_identity_net(1, 2), ds, 0)
    # both test points predicted as class 0
    assert acc.balanced == 0.5
    per_class = evaluation.per_class_accuracy([0, 0], [0, 1], 2)
    np.testing.assert_array_equal(per_class, [1.0, 0.0])


def test_probe_layer_range():
    ds = synthesize(3, 10, 1, 2, seed=0, test_per_class=2, val_per_class=1)
    net = Network(2, [4, 4], 3, 3)
    with pytest.raises(IndexError):
        evaluation.nearest_centroid_probe(net, ds, 4)


def test_probe_rows_schema():
    ds = synthesize(3, 30, 10, 4, seed=0, test_per_class=5, val_per_class=1)
    rows = evaluation.probe_rows(Network(4, [8, 8], 3, 3), ds)
    assert len(rows) == 4
    assert all(list(r) == evaluation.PROBE_COLUMNS for r in rows)


def test_coverage_endpoints():
    assert evaluation.estimate_coverage(5, 1.0, 3, 0.0, 1000).p_hat == 0.0
    assert evaluation.estimate_coverage(5, 1.0, 3, 1e6, 1000).p_hat == 1.0


def test_coverage_matches_chi_square():
    for n, d, eps in [(1, 1, 0.5), (10, 4, 0.6), (50, 16, 0.5)]:
        est = evaluation.estimate_coverage(n, 1.3, d, eps, 20000, seed=n)
        exact = evaluation.coverage_closed_form(n, 1.3, d, eps)
        assert abs(est.p_hat - exact) <= 3 * max(est.stderr, 1e-3)


def test_coverage_stderr_and_determinism():
    a = evaluation.estimate_coverage(4, 1.0, 2, 0.5, 5000, seed=2, chunk=777)
    b = evaluation.estimate_coverage(4, 1.0, 2, 0.5, 5000, seed=2, chunk=777)
    assert a == b
    assert a.stderr == pytest.approx(np.sqrt(a.p_hat * (1 - a.p_hat) / 5000))


def test_coverage_rejects_no_trials():
    with pytest.raises(ValueError):
        evaluation.estimate_coverage(3, 1.0, 2, 0.5, 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 1.5), st.floats(0.05, 1.5))
def test_coverage_monotone_in_radius(e1, e2):
    lo, hi = sorted((e1, e2))
    a = evaluation.estimate_coverage(6, 1.0, 3, lo, 2000, seed=0)
    b = evaluation.estimate_coverage(6, 1.0, 3, hi, 2000, seed=0)
    # shared seed: the same draws are compared against a larger ball
    assert b.p_hat >= a.p_hat


def test_epsilon_report_sqrt_n():
    counts = np.array([500, 100, 20, 5])
    rows, rho = evaluation.epsilon_report(epsilon.sqrt_n(8.0, counts), counts)
    assert rho == -1.0
    assert [r["class"] for r in rows] == [0, 1, 2, 3]
    assert rows[3]["epsilon"] == pytest.approx(8 / np.sqrt(5))


def test_epsilon_report_shared_is_undefined():
    counts = np.array([50, 10, 2])
    _, rho = evaluation.epsilon_report(epsilon.shared(2.0, counts), counts)
    assert rho is None


def test_write_csv_round_trip(tmp_path):
    rows = [{"class": 0, "count": 3, "epsilon": 0.1}, {"class": 1, "count": 2, "epsilon": None}]
    path = tmp_path / "e.csv"
    evaluation.write_csv(path, rows, evaluation.EPSILON_COLUMNS)
    with open(path) as fh:
        back = list(csv.DictReader(fh))
    assert back[0] == {"class": "0", "count": "3", "epsilon": "0.1"}
    assert back[1]["epsilon"] == ""


def test_error_gap_sorted_by_count():
    ds = synthesize(4, 60, 10, 3, seed=2, test_per_class=10, val_per_class=1)
    rows = evaluation.error_gap_report(Network(3, [4], 3, 4), ds)
    counts = [r["count"] for r in rows]
    assert counts == sorted(counts, reverse=True)
    assert list(rows[0]) == evaluation.ERROR_GAP_COLUMNS
    for r in rows:
        assert r["gap"] == pytest.approx(r["test_error"] - r["train_error"])
