import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rar import mlp
from rar.mlp import MLP, CheckpointError, DivergenceError, Regressor, SGDConfig, Standardizer


def test_weighted_mse_value_and_gradient():
    pred = np.array([[1.0, 2.0], [0.0, 0.0]])
    target = np.array([[0.0, 0.0], [1.0, 1.0]])
    loss, grad = mlp.weighted_mse(pred, target, np.array([1.0, 0.5]))
    # rows: 1 + 0.5*4 = 3 and 1 + 0.5*1 = 1.5, mean 2.25
    assert loss == pytest.approx(2.25)
    assert np.allclose(grad, [[1.0, 1.0], [-1.0, -0.5]])


def test_linear_layer_gradient_closed_form():
    rng = np.random.default_rng(0)
    net = MLP.init((3, 2), rng)
    X, Y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    out, acts = net.forward(X, keep=True)
    gW, gb = net.backward(acts, mlp.weighted_mse(out, Y, np.ones(2))[1])
    R = X @ net.weights[0] + net.biases[0] - Y
    assert np.allclose(gW, 2 * X.T @ R / 5)
    assert np.allclose(gb, 2 * R.sum(0) / 5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 12), min_size=1, max_size=3))
def test_gradient_check_random_nets(seed, hidden):
    rng = np.random.default_rng(seed)
    net = MLP.init((5, *hidden, 3), rng)
    for b in net.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    X, Y = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    assert mlp.gradient_check(net, X, Y, np.array([1.0, 1.0, 0.25]), n_coords=40, seed=seed) < 1e-4


def test_constant_targets_give_constant_prediction():
    # the MSE optimum for a constant target is that constant, whatever the input
    rng = np.random.default_rng(1)
    X = rng.standard_normal((80, 4))
    Y = np.tile([0.3, -1.2], (80, 1))
    res = mlp.fit(X, Y, (), SGDConfig(learning_rate=0.05, epochs=100))
    assert np.allclose(res.model.predict(rng.standard_normal((10, 4))), [0.3, -1.2], atol=1e-6)


def test_fits_linear_map():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 2))
    X = rng.standard_normal((400, 3))
    res = mlp.fit(X, X @ A, (), SGDConfig(learning_rate=0.05, epochs=100))
    assert res.val_loss[-1] < 1e-6
    assert res.val_loss[-1] <= 0.1 * res.val_loss[0]


def test_fit_is_deterministic():
    rng = np.random.default_rng(3)
    X, Y = rng.standard_normal((50, 3)), rng.standard_normal((50, 2))
    a = mlp.fit(X, Y, (6,), SGDConfig(epochs=3, seed=4))
    b = mlp.fit(X, Y, (6,), SGDConfig(epochs=3, seed=4))
    assert mlp.save_bytes(a.model, "x") == mlp.save_bytes(b.model, "x")
    assert a.train_loss == b.train_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 3))
    with pytest.raises(DivergenceError):
        mlp.fit(X, X @ rng.standard_normal((3, 1)) * 1e3, (16, 16), SGDConfig(learning_rate=1e3, epochs=20))


def test_bad_sgd_config():
    with pytest.raises(ValueError):
        SGDConfig(learning_rate=0)
    with pytest.raises(ValueError):
        SGDConfig(validation_fraction=0.5)


def test_standardizer_roundtrip():
    X = np.random.default_rng(0).standard_normal((20, 3)) * [1, 10, 0]
    s = Standardizer.fit(X)
    assert np.allclose(s.invert(s.apply(X)), X)
    assert s.scale[2] == 1.0


def test_checkpoint_roundtrip_and_corruption():
    rng = np.random.default_rng(0)
    res = mlp.fit(rng.standard_normal((30, 4)), rng.standard_normal((30, 2)), (5,), SGDConfig(epochs=2))
    res.model.meta = {"k": 1}
    data = mlp.save_bytes(res.model, "moments")
    reg, desc = mlp.load_bytes(data)
    assert desc == "moments" and reg.meta == {"k": 1}
    assert mlp.save_bytes(reg, "moments") == data
    x = rng.standard_normal((3, 4))
    assert np.array_equal(reg.predict(x), res.model.predict(x))
    with pytest.raises(CheckpointError):
        mlp.load_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        mlp.load_bytes(b"junk" + data)
    bad = bytearray(data)
    bad[20] ^= 1
    with pytest.raises(CheckpointError):
        mlp.load_bytes(bytes(bad))
