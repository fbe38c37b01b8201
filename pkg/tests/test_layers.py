import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbnlab import autodiff as ad
from gbnlab.autodiff import DimensionError, Tensor
from gbnlab.layers import (BatchNorm, BatchSizeError, Conv2d, Dense, LayerMode, batch_moments,
                           bn_forward, dense_forward)

from helpers import gradcheck


def closed_form_running(history, start, alpha):
    """Unrolled exponential average: (1-a)^T start + sum_t a (1-a)^(T-1-t) m_t."""
    T = len(history)
    out = (1 - alpha) ** T * start
    for t, m in enumerate(history):
        out = out + alpha * (1 - alpha) ** (T - 1 - t) * m
    return out


def test_bn_train_output_is_standardized():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, (16, 4, 5, 5))
    state = BatchNorm(4)
    out = bn_forward(Tensor(x), state, LayerMode.TRAIN).data
    _, var = batch_moments(x)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + state.xi), atol=1e-6)


def test_bn_affine_parameters_set_mean_and_scale():
    rng = np.random.default_rng(1)
    x = rng.normal(-1.0, 0.5, (32, 3))
    state = BatchNorm(3)
    state.gamma.data = np.array([2.0, 0.5, -1.0])
    state.beta.data = np.array([0.1, -0.2, 0.3])
    out = bn_forward(Tensor(x), state, LayerMode.TRAIN).data
    var = x.var(axis=0)
    assert np.abs(out.mean(axis=0) - state.beta.data).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=0), state.gamma.data ** 2 * var / (var + state.xi), atol=1e-6)


def test_running_average_recurrence_matches_closed_form():
    rng = np.random.default_rng(2)
    state = BatchNorm(3, alpha=0.1)
    means, variances = [], []
    for _ in range(50):
        x = rng.normal(rng.normal(), 1 + rng.random(), (8, 3))
        bn_forward(Tensor(x), state, LayerMode.TRAIN)
        mu, var = batch_moments(x)
        means.append(mu)
        variances.append(var)
    np.testing.assert_allclose(state.running_mean, closed_form_running(means, np.zeros(3), 0.1), atol=1e-12, rtol=0)
    np.testing.assert_allclose(state.running_var, closed_form_running(variances, np.ones(3), 0.1), atol=1e-12, rtol=0)
    assert state.num_batches_seen == 50


def test_running_average_single_step():
    state = BatchNorm(1, alpha=0.1)
    bn_forward(Tensor([[1.0], [3.0]]), state, LayerMode.TRAIN)
    assert state.running_mean[0] == pytest.approx(0.2, abs=1e-15)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0, abs=1e-15)


def test_eval_mode_uses_running_stats_without_mutation():
    rng = np.random.default_rng(3)
    state = BatchNorm(2)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 0.25])
    x = rng.standard_normal((5, 2))
    out = bn_forward(Tensor(x), state, LayerMode.EVAL).data
    np.testing.assert_allclose(out, (x - state.running_mean) / np.sqrt(state.running_var + state.xi))
    assert state.num_batches_seen == 0
    np.testing.assert_array_equal(state.running_mean, [1.0, -1.0])


def test_eval_mode_is_per_sample():
    rng = np.random.default_rng(4)
    state = BatchNorm(3)
    x = rng.standard_normal((6, 3, 2, 2))
    full = bn_forward(Tensor(x), state, LayerMode.EVAL).data
    single = np.concatenate([bn_forward(Tensor(x[i:i + 1]), state, LayerMode.EVAL).data for i in range(6)])
    np.testing.assert_array_equal(full, single)


def test_bn_errors():
    with pytest.raises(BatchSizeError):
        bn_forward(Tensor(np.zeros((1, 3))), BatchNorm(3), LayerMode.TRAIN)
    with pytest.raises(DimensionError):
        bn_forward(Tensor(np.zeros((4, 2))), BatchNorm(3), LayerMode.TRAIN)
    with pytest.raises(ValueError):
        BatchNorm(3, alpha=0.0)


@pytest.mark.parametrize("mode", [LayerMode.TRAIN, LayerMode.EVAL])
def test_bn_gradients(mode):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        state = BatchNorm(3)
        state.gamma.data = rng.normal(1, 0.3, 3)
        state.beta.data = rng.normal(0, 0.3, 3)
        state.running_mean = rng.normal(0, 1, 3)
        state.running_var = rng.uniform(0.5, 2, 3)
        x = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        w = rng.standard_normal(x.shape)
        loss = lambda: ad.tsum(bn_forward(x, state, mode) * w)
        assert gradcheck(loss, [x, state.gamma, state.beta], rng) <= 1e-4


def test_dense_and_conv_layers():
    rng = np.random.default_rng(5)
    layer = Dense(4, 3, rng=rng)
    x = rng.standard_normal((2, 4))
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ layer.weight.data + layer.bias.data)
    with pytest.raises(DimensionError):
        dense_forward(Tensor(np.zeros((2, 5))), layer.weight, layer.bias)
    conv = Conv2d(1, 2, 3, padding=1, rng=rng)
    assert conv(Tensor(np.zeros((1, 1, 4, 4)))).shape == (1, 2, 4, 4)
    names = [n for n, _ in conv.named_parameters()]
    assert names == ["weight", "bias"]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_bn_train_standardizes_any_batch(n, channels, alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(rng.normal(0, 5), rng.uniform(0.1, 5), (n, channels))
    state = BatchNorm(channels, alpha=alpha)
    out = bn_forward(Tensor(x), state, LayerMode.TRAIN).data
    var = x.var(axis=0)
    assert np.abs(out.mean(axis=0)).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=0), var / (var + state.xi), atol=1e-6)
    np.testing.assert_allclose(state.running_mean, alpha * x.mean(axis=0), atol=1e-12)
