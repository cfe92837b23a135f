import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drolt import epsilon
from drolt.epsilon import EpsilonPolicy, epsilon_for_class, update_learned_epsilon

from oracles import central_diff

COUNTS = np.array([500, 120, 16, 5])


@pytest.mark.parametrize("value", [1, 2, 5, 10, 30, 70])
def test_shared_grid(value):
    policy = epsilon.shared(value, COUNTS)
    assert [epsilon_for_class(policy, c) for c in range(4)] == [value] * 4


def test_sqrt_n():
    assert epsilon_for_class(epsilon.sqrt_n(8.0, COUNTS), 2) == 2.0


def test_sqrt_n_scale_invariant_and_decreasing():
    policy = epsilon.sqrt_n(3.0, COUNTS)
    vals = policy.values()
    np.testing.assert_allclose(vals * np.sqrt(COUNTS), 3.0)
    assert np.all(np.diff(vals) > 0)  # counts are decreasing


def test_learned_param_zero_is_ln2():
    policy = EpsilonPolicy("learned", COUNTS, per_class_param=np.zeros(4))
    assert epsilon_for_class(policy, 0) == pytest.approx(np.log(2.0), rel=1e-15)


def test_learned_default_init_is_one():
    np.testing.assert_allclose(epsilon.learned(COUNTS).values(), 1.0, rtol=1e-12)


def test_unknown_class():
    with pytest.raises(KeyError):
        epsilon_for_class(epsilon.shared(1.0, COUNTS), 4)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        EpsilonPolicy("bogus", COUNTS)
    with pytest.raises(ValueError):
        epsilon.shared(-1.0, COUNTS)
    with pytest.raises(ValueError):
        epsilon.shared(1.0, [3, 0])


def test_update_zero_gradient_is_identity():
    policy = epsilon.learned(COUNTS)
    after = update_learned_epsilon(policy, np.zeros(4), 0.1)
    np.testing.assert_array_equal(after.per_class_param, policy.per_class_param)


def test_update_positive_gradient_shrinks_radius():
    policy = epsilon.learned(COUNTS)
    after = update_learned_epsilon(policy, np.array([1.0, 0.0, 0.0, 0.0]), 0.1)
    assert after.values()[0] < policy.values()[0]
    np.testing.assert_array_equal(after.values()[1:], policy.values()[1:])


def test_update_rejects_fixed_policy():
    with pytest.raises(ValueError):
        update_learned_epsilon(epsilon.shared(1.0, COUNTS), np.zeros(4), 0.1)


def test_softplus_chain_rule(rng):
    # d/dparam of g(softplus(param)) = g'(eps) * sigmoid(param), checked numerically
    param = rng.normal(size=4)
    weights = rng.normal(size=4)

    def g(p):
        return float(np.sum(weights * np.sin(epsilon.softplus(p))))

    analytic = weights * np.cos(epsilon.softplus(param)) * epsilon.sigmoid(param)
    np.testing.assert_allclose(analytic, central_diff(g, param, h=1e-6), rtol=1e-6)


def test_update_step_matches_chain_rule(rng):
    param = rng.normal(size=4)
    policy = EpsilonPolicy("learned", COUNTS, per_class_param=param)
    grad = rng.normal(size=4)
    after = update_learned_epsilon(policy, grad, 0.01)
    np.testing.assert_allclose(after.per_class_param, param - 0.01 * grad * epsilon.sigmoid(param), rtol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.floats(1e-4, 10.0))
@settings(max_examples=100)
def test_learned_radii_stay_nonnegative(grad, lr):
    policy = epsilon.learned(COUNTS)
    for _ in range(20):
        policy = update_learned_epsilon(policy, np.array(grad), lr)
    assert np.all(policy.values() >= 0)


def test_inverse_softplus_round_trip():
    y = np.array([1e-3, 0.5, 1.0, 30.0])
    np.testing.assert_allclose(epsilon.softplus(epsilon.inverse_softplus(y)), y, rtol=1e-12)
