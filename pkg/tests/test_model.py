import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drolt import centroids, epsilon, losses, model
from drolt.model import Network


def _objective(net, x, a, b):
    _, z, logits = net.forward(x)
    return float(np.sum(a * z) + np.sum(b * logits))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("widths", [[], [7], [6, 5]])
def test_gradients_match_finite_differences(activation, widths):
    rng = np.random.default_rng(len(widths))
    net = Network(4, widths, 3, 5, activation=activation, seed=2)
    for k in net.params:
        if k.startswith("b"):
            net.params[k] = rng.normal(scale=0.3, size=net.params[k].shape)
    x = rng.normal(size=(9, 4))
    a = rng.normal(size=(9, 3))
    b = rng.normal(size=(9, 5))
    net.forward(x)
    grads = net.backward(a, b)
    h = 1e-6
    for k, p in net.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = _objective(net, x, a, b)
            p[idx] = old - h
            down = _objective(net, x, a, b)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        err = np.linalg.norm(grads[k] - num) / max(np.linalg.norm(num), 1e-12)
        assert err < 1e-4, (k, err)


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        Network(2, [3], 2, 2).backward(np.zeros((1, 2)))


def test_backward_shape_checks():
    net = Network(2, [3], 2, 4)
    net.forward(np.zeros((5, 2)))
    with pytest.raises(ValueError):
        net.backward(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        net.backward(grad_logits=np.zeros((5, 3)))


def test_embed_layers():
    net = Network(3, [4, 5], 2, 3)
    acts = net.embed(np.ones((6, 3)))
    assert [a.shape[1] for a in acts] == [3, 4, 5, 2]
    with pytest.raises(ValueError, match="dimension"):
        net.embed(np.ones((1, 4)))


def test_unknown_activation():
    with pytest.raises(ValueError):
        Network(2, [2], 2, 2, activation="gelu")


def test_same_seed_same_init():
    a, b = Network(5, [8], 3, 4, seed=3), Network(5, [8], 3, 4, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_momentum_two_steps():
    net = Network(2, [], 2, 2, seed=0)
    start = {k: v.copy() for k, v in net.params.items()}
    g = {k: np.full_like(v, 0.5) for k, v in net.params.items()}
    lr, m = 0.1, 0.9
    net.sgd_step(g, lr, momentum=m)
    net.sgd_step(g, lr, momentum=m)
    for k in net.params:
        # theta_2 = theta_0 - lr * g * (1 + (1 + m))
        np.testing.assert_allclose(net.params[k], start[k] - lr * 0.5 * (1 + 1.9), rtol=0, atol=1e-15)


def test_weight_decay_pulls_toward_zero():
    net = Network(2, [3], 2, 2, seed=1)
    before = sum(np.sum(v**2) for v in net.params.values())
    zero = {k: np.zeros_like(v) for k, v in net.params.items()}
    net.sgd_step(zero, 0.1, momentum=0.0, weight_decay=0.5)
    after = sum(np.sum(v**2) for v in net.params.values())
    assert after < before


def test_step_shape_mismatch_leaves_params():
    net = Network(2, [3], 2, 2)
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    grads["bc"] = np.ones(5)
    with pytest.raises(ValueError):
        net.sgd_step(grads, 0.1)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_frozen_backbone_unchanged():
    rng = np.random.default_rng(0)
    net = model.freeze_backbone(Network(3, [4], 2, 3, seed=5))
    digest = net.backbone_digest()
    wc = net.params["Wc"].copy()
    for _ in range(10):
        net.forward(rng.normal(size=(8, 3)))
        grads = net.backward(rng.normal(size=(8, 2)), rng.normal(size=(8, 3)))
        net.sgd_step(grads, 0.1, weight_decay=0.01)
    assert net.backbone_digest() == digest
    assert not np.array_equal(net.params["Wc"], wc)
    model.unfreeze(net)
    net.sgd_step(grads, 0.1)
    assert net.backbone_digest() != digest


def test_checkpoint_round_trip(tmp_path):
    net = Network(3, [4], 2, 3, activation="relu", seed=9)
    net.velocity["W0"] += 1.5
    model.freeze_backbone(net)
    path = tmp_path / "c.npz"
    model.save_checkpoint(path, net, extra_arrays={"rng": np.arange(4)}, meta={"epoch": 7})
    back, extra, meta = model.load_checkpoint(path)
    assert back.config() == net.config()
    assert back.frozen
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
        np.testing.assert_array_equal(back.velocity[k], net.velocity[k])
    np.testing.assert_array_equal(extra["rng"], np.arange(4))
    assert meta == {"epoch": 7}


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "c.npz"
    model.save_checkpoint(path, Network(3, [4], 2, 3))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(path)


def test_checkpoint_tampered(tmp_path):
    path = tmp_path / "c.npz"
    net = Network(3, [4], 2, 3)
    model.save_checkpoint(path, net)
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    arrays["param/W0"] = arrays["param/W0"] + 1.0
    np.savez(path, **arrays)
    with pytest.raises(model.CheckpointError, match="integrity"):
        model.load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(tmp_path / "nope.npz")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_predict_matches_forward(n, d, seed):
    rng = np.random.default_rng(seed)
    net = Network(d, [3], 2, 4, seed=seed % 100)
    x = rng.normal(size=(n, d))
    _, _, logits = net.forward(x)
    np.testing.assert_array_equal(net.predict(x), np.argmax(logits, axis=1))


def _joint_value(net, x, y, counts, bank, eps, lam):
    _, z, logits = net.forward(x)
    batch = losses.make_batch(z, y, counts)
    return losses.joint_loss(losses.cross_entropy(logits, y), losses.robust_loss(batch, bank, eps), lam)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_joint_loss_end_to_end_gradient(lam):
    rng = np.random.default_rng(21)
    net = Network(6, [7, 5], 4, 3, seed=4)
    x = rng.normal(size=(12, 6))
    y = np.array([0, 1, 2] * 4)
    counts = np.array([30, 10, 3])
    bank = centroids.recompute(rng.normal(size=(9, 4)), np.repeat([0, 1, 2], 3), 3)
    eps = epsilon.sqrt_n(2.0, counts)
    res = _joint_value(net, x, y, counts, bank, eps, lam)
    grads = net.backward(res.grad_embeddings, res.grad_logits)
    h = 1e-6
    for k, p in net.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = _joint_value(net, x, y, counts, bank, eps, lam).value
            p[idx] = old - h
            down = _joint_value(net, x, y, counts, bank, eps, lam).value
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(num), 1e-8)
        assert np.linalg.norm(grads[k] - num) / scale < 1e-4, k


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(3)
    net = Network(3, [4], 2, 3, seed=1)
    net.forward(rng.normal(size=(5, 3)))
    gz, gl = rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    both = net.backward(0.3 * gz, 0.7 * gl)
    a = net.backward(gz, None)
    b = net.backward(None, gl)
    for k in both:
        np.testing.assert_allclose(both[k], 0.3 * a[k] + 0.7 * b[k], atol=1e-13)


def test_zero_upstream_zero_gradients():
    net = Network(3, [4], 2, 3)
    net.forward(np.ones((2, 3)))
    assert all(not np.any(g) for g in net.backward(np.zeros((2, 2)), np.zeros((2, 3))).values())


def test_zero_weights_zero_logits_and_identity_layer():
    net = Network(3, [], 3, 2)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    assert not np.any(net.forward(np.ones((4, 3)))[2])
    net.params["W0"] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(net.embed(x)[-1], x)


def test_forward_matches_straight_line_chain():
    rng = np.random.default_rng(8)
    net = Network(4, [5, 3], 2, 3, seed=6)
    x = rng.normal(size=(7, 4))
    h = np.tanh(x @ net.params["W0"] + net.params["b0"])
    h = np.tanh(h @ net.params["W1"] + net.params["b1"])
    z = h @ net.params["W2"] + net.params["b2"]
    np.testing.assert_allclose(net.forward(x)[2], z @ net.params["Wc"] + net.params["bc"], rtol=1e-13)


def test_plain_and_zero_lr_steps():
    net = Network(2, [], 2, 2, seed=0)
    start = {k: v.copy() for k, v in net.params.items()}
    g = {k: np.full_like(v, 0.25) for k, v in net.params.items()}
    net.sgd_step(g, 0.0)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], start[k])
    net.reset_velocity()
    net.sgd_step(g, 0.2, momentum=0.0)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], start[k] - 0.2 * 0.25)
