import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagdit.flow import (
    LINEAR,
    VP_COSINE,
    cfm_loss,
    interpolate,
    lognorm_interval_prob,
    sample_t_lognorm,
    sample_t_uniform,
    target_velocity,
)
from flagdit.tensor import Tensor, finite_diff_grad, parameter, precision
from oracles import lognorm_probability

rng0 = np.random.default_rng(0)
X = rng0.standard_normal((2, 5, 3))
E = rng0.standard_normal((2, 5, 3))


@pytest.mark.parametrize("sched", [LINEAR, VP_COSINE])
def test_boundaries_exact(sched):
    assert sched.alpha(0.0) == 0 and sched.beta(0.0) == 1
    assert sched.alpha(1.0) == 1 and sched.beta(1.0) == 0
    np.testing.assert_array_equal(interpolate(X, E, 0.0, sched), E)
    np.testing.assert_array_equal(interpolate(X, E, 1.0, sched), X)


def test_linear_examples():
    np.testing.assert_allclose(interpolate(X, E, 0.5), (X + E) / 2)
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(target_velocity(X, E, t), X - E)
    assert np.all(target_velocity(X, X, 0.4) == 0)
    np.testing.assert_allclose(target_velocity(X, E, 0.0, VP_COSINE), math.pi / 2 * X)
    with pytest.raises(ValueError):
        interpolate(X, E[:1], 0.5)


@pytest.mark.parametrize("sched", ["linear", "vp_cosine"])
def test_velocity_is_time_derivative(sched):
    h = 1e-5
    for t in np.random.default_rng(1).uniform(0.01, 0.99, 50):
        fd = (interpolate(X, E, t + h, sched) - interpolate(X, E, t - h, sched)) / (2 * h)
        np.testing.assert_allclose(fd, target_velocity(X, E, t, sched), atol=1e-4)


def test_per_sample_times_broadcast():
    t = np.array([0.2, 0.9])
    out = interpolate(X, E, t)
    for i in range(2):
        np.testing.assert_allclose(out[i], t[i] * X[i] + (1 - t[i]) * E[i])


def test_cfm_loss_examples_and_gradient():
    mask = np.array([[True, True, False, True, False], [True, False, True, True, True]])
    t = np.array([0.3, 0.6])
    tgt = target_velocity(X, E, t)
    with precision(np.float64):
        assert cfm_loss(Tensor(tgt), X, E, t, patch_mask=mask).item() == 0.0
        zero = cfm_loss(Tensor(np.zeros_like(X)), X, E, t, patch_mask=mask).item()
        assert zero == pytest.approx(np.mean(((X - E)[mask]) ** 2))
        v = parameter(np.random.default_rng(2).standard_normal(X.shape))
        cfm_loss(v, X, E, t, patch_mask=mask).backward()
        n = mask.sum() * X.shape[-1]
        expected = 2 * (v.data - tgt) / n * mask[..., None]
        np.testing.assert_allclose(v.grad, expected, atol=1e-12)
        fd = finite_diff_grad(lambda a: cfm_loss(Tensor(a), X, E, t, patch_mask=mask).item(),
                              v.data, h=1e-5)
        np.testing.assert_allclose(v.grad, fd, atol=1e-8)
    with pytest.raises(ValueError, match="no entries"):
        cfm_loss(Tensor(tgt), X, E, t, patch_mask=np.zeros((2, 5), bool))


@given(st.just(0.0) | st.floats(1e-3, 3) | st.floats(-3, -1e-3), st.integers(0, 2**31 - 1))
def test_cfm_loss_nonnegative_zero_iff_equal(shift, seed):
    rng = np.random.default_rng(seed)
    x, e = rng.standard_normal((1, 3, 2)), rng.standard_normal((1, 3, 2))
    with precision(np.float64):
        tgt = target_velocity(x, e, 0.5)
        loss = cfm_loss(Tensor(tgt + shift), x, e, 0.5).item()
    assert loss >= 0
    assert (loss == 0) == (shift == 0)


def test_lognorm_sampler_statistics():
    assert 1 / (1 + math.exp(-0.0)) == 0.5
    t = sample_t_lognorm(np.random.default_rng(0), 10**5)
    assert 0.48 <= np.median(t) <= 0.52
    p = np.mean((t > 0.25) & (t < 0.75))
    assert p == pytest.approx(0.728, abs=0.01)
    assert lognorm_interval_prob(0.25, 0.75) == pytest.approx(lognorm_probability(0.25, 0.75))
    assert np.all((t >= 1e-5) & (t <= 1 - 1e-5))


def test_uniform_sampler():
    t = sample_t_uniform(np.random.default_rng(0), 10**5)
    assert np.mean(t) == pytest.approx(0.5, abs=0.005)
    assert np.all((t >= 0) & (t < 1))
    again = sample_t_uniform(np.random.default_rng(0), 10**5)
    assert t.tobytes() == again.tobytes()
