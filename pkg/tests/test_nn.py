import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from fedmeta.nn import Batch, ModelConfig, bias_indices, forward, grad, hvp, init_params, loss

from conftest import central_diff, generic_params, random_batch, rel_err


def random_config(rng, batchnorm):
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
    return ModelConfig(input_dim=int(rng.integers(2, 6)), num_classes=int(rng.integers(2, 4)),
                       hidden_dims=hidden, batchnorm_enabled=batchnorm)


def test_config_defaults_follow_architecture():
    cfg = ModelConfig(input_dim=16)
    assert cfg.hidden_dims == (256, 128, 64, 64)
    assert cfg.batchnorm_enabled
    with pytest.raises(ValueError):
        ModelConfig(input_dim=4, hidden_dims=())


def test_param_count_is_function_of_config():
    cfg = ModelConfig(input_dim=3, num_classes=2, hidden_dims=(4,), batchnorm_enabled=True)
    assert cfg.num_params == 3 * 4 + 4 + 4 * 2 + 2 + 2 * 4
    assert init_params(cfg, 0).shape == (cfg.num_params,)


def test_init_is_deterministic_with_zero_biases_and_unit_bn():
    cfg = ModelConfig(input_dim=2, num_classes=2, hidden_dims=(2,), batchnorm_enabled=True)
    a, b = init_params(cfg, 42), init_params(cfg, 42)
    assert np.array_equal(a, b)
    assert np.all(a[bias_indices(cfg)] == 0.0)
    assert np.array_equal(a[-4:], [1.0, 1.0, 0.0, 0.0])  # scale then shift
    assert not np.array_equal(init_params(cfg, 43), a)


def test_init_respects_fan_in_bound():
    cfg = ModelConfig(input_dim=50, num_classes=2, hidden_dims=(30,), batchnorm_enabled=False)
    p = init_params(cfg, 1)
    assert np.max(np.abs(p[:50 * 30])) <= math.sqrt(6 / 50)


def test_zero_params_give_uniform_rows():
    cfg = ModelConfig(input_dim=3, num_classes=4, hidden_dims=(5,))
    probs = forward(np.zeros(cfg.num_params), cfg, random_batch(np.random.default_rng(0), 6, 3, 4))
    assert np.allclose(probs, 0.25, atol=0, rtol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 50), bn=st.booleans())
def test_rows_sum_to_one(seed, scale, bn):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng, bn)
    p = init_params(cfg, rng) * scale
    probs = forward(p, cfg, random_batch(rng, 5, cfg.input_dim, cfg.num_classes))
    assert np.all(probs >= 0)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) <= 1e-12


def test_hand_computed_single_unit_net():
    cfg = ModelConfig(input_dim=1, num_classes=2, hidden_dims=(1,), batchnorm_enabled=False)
    # layout: W0 (1x1), b0, W1 (1x2), b1 (2)
    params = np.array([2.0, -1.0, 1.5, -0.5, 0.1, 0.2])
    probs = forward(params, cfg, Batch([[1.5], [0.2]], [0, 1]))
    h = max(0.0, 2.0 * 1.5 - 1.0)
    z0, z1 = 1.5 * h + 0.1, -0.5 * h + 0.2
    assert probs[0, 0] == pytest.approx(math.exp(z0) / (math.exp(z0) + math.exp(z1)), abs=1e-15)
    # second row: ReLU clamps to zero, only biases remain
    assert probs[1, 1] == pytest.approx(math.exp(0.2) / (math.exp(0.1) + math.exp(0.2)), abs=1e-15)


def test_loss_of_uniform_prediction_is_log2():
    cfg = ModelConfig(input_dim=3, num_classes=2, hidden_dims=(4,))
    b = random_batch(np.random.default_rng(1), 8, 3, 2)
    assert loss(np.zeros(cfg.num_params), cfg, b) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_zero_when_true_class_certain():
    cfg = ModelConfig(input_dim=1, num_classes=2, hidden_dims=(1,), batchnorm_enabled=False)
    params = np.array([0.0, 0.0, 0.0, 0.0, 100.0, -100.0])
    assert loss(params, cfg, Batch([[1.0], [2.0]], [0, 0])) == 0.0


def test_loss_floor_keeps_confident_mistakes_finite():
    cfg = ModelConfig(input_dim=1, num_classes=2, hidden_dims=(1,), batchnorm_enabled=False)
    params = np.array([0.0, 0.0, 0.0, 0.0, 1000.0, -1000.0])
    assert loss(params, cfg, Batch([[1.0]], [1])) == pytest.approx(-math.log(1e-15))


def _reference_cross_entropy(params, cfg, batch):
    """Independent forward pass (no batch norm) plus log-sum-exp cross-entropy."""
    pos, h = 0, batch.inputs
    dims = [cfg.input_dim, *cfg.hidden_dims, cfg.num_classes]
    for layer, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        w = params[pos:pos + i * o].reshape(i, o)
        b = params[pos + i * o:pos + i * o + o]
        pos += i * o + o
        h = h @ w + b
        if layer < len(dims) - 2:
            h = np.maximum(h, 0)
    logp = h - logsumexp(h, axis=1, keepdims=True)
    return -np.mean(logp[np.arange(len(batch)), batch.labels])


def test_loss_matches_independent_cross_entropy():
    rng = np.random.default_rng(7)
    for _ in range(5):
        cfg = random_config(rng, batchnorm=False)
        p = init_params(cfg, rng)
        b = random_batch(rng, 6, cfg.input_dim, cfg.num_classes)
        assert loss(p, cfg, b) == pytest.approx(_reference_cross_entropy(p, cfg, b), abs=1e-12)


@pytest.mark.parametrize("bn", [False, True])
def test_grad_matches_central_differences(bn):
    # 10 random configs x 10 random batches
    rng = np.random.default_rng(100 + bn)
    worst = 0.0
    for _ in range(10):
        cfg = random_config(rng, bn)
        assert cfg.num_params <= 200
        p = generic_params(cfg, rng)
        for _ in range(10):
            b = random_batch(rng, int(rng.integers(3, 7)), cfg.input_dim, cfg.num_classes)
            fd = central_diff(lambda q: loss(q, cfg, b), p)
            worst = max(worst, rel_err(grad(p, cfg, b), fd))
    assert worst <= 1e-6


def test_grad_vanishes_at_exact_minimizer():
    # identical inputs with balanced labels: uniform output is the global optimum
    cfg = ModelConfig(input_dim=3, num_classes=2, hidden_dims=(4, 3), batchnorm_enabled=False)
    b = Batch(np.ones((4, 3)), [0, 1, 0, 1])
    assert np.linalg.norm(grad(np.zeros(cfg.num_params), cfg, b)) <= 1e-10


@pytest.mark.parametrize("bn", [False, True])
def test_duplicated_rows_leave_mean_gradient_unchanged(bn):
    rng = np.random.default_rng(3)
    cfg = random_config(rng, bn)
    p = init_params(cfg, rng)
    b = random_batch(rng, 5, cfg.input_dim, cfg.num_classes)
    doubled = Batch(np.vstack([b.inputs, b.inputs]), np.concatenate([b.labels, b.labels]))
    np.testing.assert_allclose(grad(p, cfg, doubled), grad(p, cfg, b), rtol=0, atol=1e-12)


def test_dimension_mismatches_raise():
    cfg = ModelConfig(input_dim=3, num_classes=2, hidden_dims=(2,))
    b = random_batch(np.random.default_rng(0), 2, 3, 2)
    with pytest.raises(ValueError):
        forward(np.zeros(cfg.num_params + 1), cfg, b)
    with pytest.raises(ValueError):
        loss(np.zeros(cfg.num_params), cfg, random_batch(np.random.default_rng(0), 2, 4, 2))
    with pytest.raises(ValueError):
        grad(np.zeros(cfg.num_params), cfg, Batch(np.zeros((1, 3)), [2]))
    with pytest.raises(ValueError):
        hvp(np.zeros(cfg.num_params), cfg, b, np.zeros(3))


def test_hvp_of_zero_vector_is_zero():
    rng = np.random.default_rng(0)
    cfg = random_config(rng, True)
    p = init_params(cfg, rng)
    b = random_batch(rng, 4, cfg.input_dim, cfg.num_classes)
    assert np.array_equal(hvp(p, cfg, b, np.zeros_like(p)), np.zeros_like(p))


def dense_hessian_fd(p, cfg, b, h=1e-5):
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        cols.append((grad(p + e, cfg, b) - grad(p - e, cfg, b)) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("bn", [False, True])
def test_hvp_matches_dense_hessian(bn):
    rng = np.random.default_rng(11 + bn)
    cfg = random_config(rng, bn)
    p = generic_params(cfg, rng)
    b = random_batch(rng, 6, cfg.input_dim, cfg.num_classes)
    dense = dense_hessian_fd(p, cfg, b)
    for _ in range(3):
        v = rng.normal(size=p.size)
        assert rel_err(hvp(p, cfg, b, v), dense @ v) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bn=st.booleans())
def test_hvp_linear_and_symmetric(seed, bn):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng, bn)
    p = init_params(cfg, rng)
    b = random_batch(rng, 5, cfg.input_dim, cfg.num_classes)
    v1, v2 = rng.normal(size=(2, p.size))
    h1, h2 = hvp(p, cfg, b, v1), hvp(p, cfg, b, v2)
    np.testing.assert_allclose(hvp(p, cfg, b, v1 + v2), h1 + h2, rtol=0, atol=1e-10)
    assert abs(v1 @ h2 - v2 @ h1) <= 1e-10


def test_operations_are_pure():
    rng = np.random.default_rng(5)
    cfg = random_config(rng, True)
    p = init_params(cfg, rng)
    b = random_batch(rng, 4, cfg.input_dim, cfg.num_classes)
    p_copy, x_copy = p.copy(), b.inputs.copy()
    first = (forward(p, cfg, b), grad(p, cfg, b), hvp(p, cfg, b, p))
    second = (forward(p, cfg, b), grad(p, cfg, b), hvp(p, cfg, b, p))
    for a, c in zip(first, second):
        assert np.array_equal(a, c)
    assert np.array_equal(p, p_copy) and np.array_equal(b.inputs, x_copy)
