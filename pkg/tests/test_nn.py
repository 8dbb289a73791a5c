import math

import numpy as np
import pytest

from neurotoxin.nn import (
    Batch,
    Conv2D,
    Dense,
    DiagonalQuadratic,
    DimensionError,
    Model,
    ModelSpec,
    ReLU,
    _conv_geometry,
    forward_loss,
    grad,
    hvp,
    lenet_spec,
    mlp_spec,
    sgd_step,
)


def finite_diff(model, params, batch, h=1e-5):
    out = np.empty_like(params)
    for i in range(len(params)):
        e = np.zeros_like(params)
        e[i] = h
        out[i] = (forward_loss(model, params + e, batch)[0] - forward_loss(model, params - e, batch)[0]) / (2 * h)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-6))


def reference_mlp_loss(W1, b1, W2, b2, X, y):
    """Scalar loops, no numpy vector ops on the hot path."""
    total = 0.0
    for x, label in zip(X.tolist(), y.tolist()):
        hidden = []
        for j in range(len(b1)):
            s = b1[j]
            for i in range(len(x)):
                s += x[i] * W1[i][j]
            hidden.append(max(s, 0.0))
        logits = []
        for c in range(len(b2)):
            s = b2[c]
            for j in range(len(hidden)):
                s += hidden[j] * W2[j][c]
            logits.append(s)
        m = max(logits)
        z = sum(math.exp(v - m) for v in logits)
        total += -(logits[label] - m - math.log(z))
    return total / len(y)


def random_spec(rng):
    if rng.random() < 0.3:
        c = int(rng.integers(1, 3))
        size = int(rng.integers(4, 6))
        conv = Conv2D(c, 2, 3, stride=int(rng.integers(1, 3)), padding=str(rng.choice(["valid", "same"])))
        oh = _conv_geometry(size, conv.kernel, conv.stride, conv.padding)[0]
        n_classes = int(rng.integers(2, 5))
        return ModelSpec((c, size, size), (conv, ReLU(), Dense(2 * oh * oh, n_classes)), n_classes)
    dims = int(rng.integers(2, 8))
    hidden = [int(h) for h in rng.integers(2, 10, size=int(rng.integers(0, 3)))]
    return mlp_spec(dims, hidden, int(rng.integers(2, 5)))


def random_batch(spec, rng, n=None):
    n = n or int(rng.integers(1, 6))
    return Batch(rng.normal(size=(n,) + spec.input_shape), rng.integers(0, spec.num_classes, size=n))


# ---------------------------------------------------------------- forward_loss


def test_zero_params_give_log_c_and_chance_accuracy():
    model = Model(mlp_spec(4, [6], 5))
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(20, 4)), rng.integers(0, 5, size=20))
    loss, acc = forward_loss(model, np.zeros(model.total_params), batch)
    assert loss == pytest.approx(math.log(5), abs=1e-12)
    # all logits tie, argmax picks class 0
    assert acc == pytest.approx(np.mean(batch.labels == 0))


def test_saturated_identity_model_has_near_zero_loss():
    spec = ModelSpec((4,), (Dense(4, 4, bias=False),), 4)
    model = Model(spec)
    params = np.eye(4).ravel()
    labels = np.array([0, 1, 2, 3, 2])
    loss, acc = forward_loss(model, params, Batch(50.0 * np.eye(4)[labels], labels))
    assert loss < 1e-3
    assert acc == 1.0


def test_mlp_loss_matches_scalar_reference():
    model = Model(mlp_spec(3, [4], 3))
    params = model.init_params(0)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    W1, b1, W2, b2 = (t.tolist() for t in model.unflatten(params))
    expected = reference_mlp_loss(W1, b1, W2, b2, X, y)
    loss, _ = forward_loss(model, params, Batch(X, y))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_dimension_errors_name_the_layer():
    model = Model(mlp_spec(5, [3], 2))
    with pytest.raises(DimensionError, match="layer 0"):
        forward_loss(model, model.init_params(0), Batch(np.zeros((2, 4)), np.array([0, 1])))
    with pytest.raises(DimensionError, match="params"):
        forward_loss(model, np.zeros(3), Batch(np.zeros((2, 5)), np.array([0, 1])))
    with pytest.raises(DimensionError, match="layer 2"):
        ModelSpec((5,), (Dense(5, 3), ReLU(), Dense(4, 2)), 2)


def test_total_params_is_sum_of_layers():
    spec = mlp_spec(32, [64], 10)
    assert spec.total_params == 32 * 64 + 64 + 64 * 10 + 10
    le = lenet_spec((1, 8, 8), 10)
    counts = [int(np.prod(s)) for s in le.param_shapes()]
    assert le.total_params == sum(counts)


# ---------------------------------------------------------------- grad


def test_dead_relu_unit_has_zero_gradient():
    spec = mlp_spec(2, [2], 2)
    model = Model(spec)
    W1 = np.array([[1.0, -1.0], [1.0, -1.0]])
    b1 = np.array([0.0, -5.0])
    W2 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b2 = np.zeros(2)
    params = model.flatten([W1, b1, W2, b2])
    batch = Batch(np.array([[1.0, 2.0], [0.5, 0.1], [2.0, 1.0]]), np.array([0, 1, 1]))
    g_W1, g_b1, g_W2, _ = model.unflatten(grad(model, params, batch))
    # unit 1 pre-activations are all negative
    assert np.all(g_W1[:, 1] == 0.0)
    assert g_b1[1] == 0.0
    assert np.all(g_W2[1] == 0.0)


def test_two_class_linear_gradient_matches_logistic_closed_form():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(12, 5))
    y = rng.integers(0, 2, size=12)
    model = Model(ModelSpec((5,), (Dense(5, 2, bias=False),), 2))
    W = rng.normal(size=(5, 2))
    g = grad(model, W.ravel(), Batch(X, y)).reshape(5, 2)
    z = X @ W
    p1 = 1.0 / (1.0 + np.exp(-(z[:, 1] - z[:, 0])))
    closed = X.T @ (p1 - y) / len(y)
    np.testing.assert_allclose(g[:, 1], closed, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(g[:, 0], -closed, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("case", range(100))
def test_gradient_matches_finite_differences(case):
    rng = np.random.default_rng(1000 + case)
    spec = random_spec(rng)
    while spec.total_params > 200:
        spec = random_spec(rng)
    model = Model(spec)
    params = model.init_params(rng)
    batch = random_batch(spec, rng)
    assert rel_err(grad(model, params, batch), finite_diff(model, params, batch)) < 1e-4


def test_lenet_gradient_matches_finite_differences():
    spec = lenet_spec((1, 8, 8), 3, channels=2, hidden=4)
    model = Model(spec)
    rng = np.random.default_rng(2)
    params = model.init_params(3)
    batch = random_batch(spec, rng, n=3)
    assert rel_err(grad(model, params, batch), finite_diff(model, params, batch)) < 1e-4


def test_forward_and_grad_are_pure():
    model = Model(mlp_spec(6, [5], 3))
    rng = np.random.default_rng(0)
    params = model.init_params(1)
    before = params.copy()
    batch = random_batch(model.spec, rng, n=5)
    a = model.loss_and_grad(params, batch)
    b = model.loss_and_grad(params, batch)
    assert a[0] == b[0] and a[1] == b[1]
    assert np.array_equal(a[2], b[2])
    assert np.array_equal(params, before)


def test_flatten_unflatten_round_trip_is_exact():
    model = Model(lenet_spec((1, 8, 8), 10))
    params = np.random.default_rng(3).normal(size=model.total_params)
    back = model.flatten([t.copy() for t in model.unflatten(params)])
    assert back.tobytes() == params.tobytes()


def test_init_is_bounded_by_fan_in():
    model = Model(mlp_spec(16, [8], 4))
    W1, b1, W2, b2 = model.unflatten(model.init_params(0))
    assert np.abs(W1).max() <= 1 / 4 and np.abs(b1).max() <= 1 / 4
    assert np.abs(W2).max() <= 1 / np.sqrt(8)
    assert np.array_equal(model.init_params(5), model.init_params(5))


# ---------------------------------------------------------------- sgd_step


def test_sgd_step_examples():
    p = np.array([1.0, 2.0])
    assert np.array_equal(sgd_step(p, np.array([0.5, -1.0]), 2.0), [0.0, 4.0])
    assert np.array_equal(sgd_step(p, np.array([3.0, 4.0]), 0.0), p)
    assert np.array_equal(sgd_step(p, np.zeros(2), 0.7), p)
    with pytest.raises(DimensionError):
        sgd_step(p, np.zeros(3), 0.1)


# ---------------------------------------------------------------- hvp


def test_hvp_of_zero_vector_is_zero():
    model = Model(mlp_spec(3, [4], 2))
    rng = np.random.default_rng(0)
    out = hvp(model, model.init_params(0), random_batch(model.spec, rng), np.zeros(model.total_params))
    assert np.array_equal(out, np.zeros(model.total_params))


def test_hvp_on_diagonal_quadratic():
    q = DiagonalQuadratic([3.0, 1.0])
    np.testing.assert_allclose(hvp(q, np.array([0.3, -2.0]), None, np.array([1.0, 1.0])), [3.0, 1.0], rtol=1e-10)


def dense_logistic_hessian(X, W):
    """Hessian of mean softmax CE for z = X @ W w.r.t. W.ravel() (row-major)."""
    n, d_in = X.shape
    c = W.shape[1]
    z = X @ W
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    H = np.zeros((d_in * c, d_in * c))
    for s in range(n):
        S = np.diag(p[s]) - np.outer(p[s], p[s])
        H += np.kron(np.outer(X[s], X[s]), S)
    return H / n


@pytest.mark.parametrize("seed", range(5))
def test_hvp_matches_dense_hessian_on_logistic_model(seed):
    rng = np.random.default_rng(seed)
    d_in, c = int(rng.integers(3, 9)), int(rng.integers(2, 5))
    assert d_in * c <= 50
    model = Model(ModelSpec((d_in,), (Dense(d_in, c, bias=False),), c))
    X = rng.normal(size=(10, d_in))
    y = rng.integers(0, c, size=10)
    W = rng.normal(size=(d_in, c))
    v = rng.normal(size=d_in * c)
    expected = dense_logistic_hessian(X, W) @ v
    got = hvp(model, W.ravel(), Batch(X, y), v)
    assert np.linalg.norm(got - expected) / np.linalg.norm(expected) < 1e-3


def test_hvp_symmetry_on_quadratic():
    rng = np.random.default_rng(0)
    q = DiagonalQuadratic(rng.uniform(-2, 5, size=20))
    theta = rng.normal(size=20)
    u, v = rng.normal(size=20), rng.normal(size=20)
    assert u @ hvp(q, theta, None, v) == pytest.approx(v @ hvp(q, theta, None, u), abs=1e-6)
