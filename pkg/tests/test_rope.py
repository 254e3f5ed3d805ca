import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagdit.rope import RopeConfigError, apply_rope, build_freqs, ntk_scale_base
from flagdit.tensor import Tensor, finite_diff_grad, parameter, precision
from oracles import ntk_base, rope_complex


def test_build_freqs_examples():
    assert build_freqs(2, 123.0).theta.tolist() == [1.0]
    np.testing.assert_allclose(build_freqs(4, 10000).theta, [1.0, 0.01])
    assert np.all(build_freqs(8, 1.0).theta == 1.0)
    with pytest.raises(RopeConfigError):
        build_freqs(5)


@given(st.integers(1, 64).map(lambda n: 2 * n), st.floats(1.5, 1e6))
def test_theta_invariants(D, base):
    th = build_freqs(D, base).theta
    assert th[0] == 1.0
    assert np.all(th > 0) and np.all(th <= 1)
    assert np.all(np.diff(th) < 0) or D == 2


def test_apply_rope_examples():
    f = build_freqs(2)
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal(apply_rope(v, 0, f), v)
    np.testing.assert_allclose(apply_rope(np.array([1.0, 0.0]), math.pi / 2, f), [0, 1], atol=1e-6)


def test_apply_rope_matches_complex_oracle():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 16))
    pos = np.arange(5) * 3 + 2
    out = apply_rope(v, pos, build_freqs(16, 500.0))
    np.testing.assert_allclose(out, rope_complex(v, pos[:, None], 500.0), atol=1e-12)


@given(st.integers(0, 10**4), st.integers(0, 2**31 - 1))
def test_norm_preserved(m, seed):
    v = np.random.default_rng(seed).standard_normal(8).astype(np.float32)
    out = apply_rope(v, m, build_freqs(8))
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), abs=1e-5)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(-200, 200),
       st.integers(0, 2**31 - 1))
def test_relative_position_property(m, n, delta, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal(16), rng.standard_normal(16)
    f = build_freqs(16)
    a = apply_rope(q, m, f) @ apply_rope(k, n, f)
    b = apply_rope(q, m + delta, f) @ apply_rope(k, n + delta, f)
    assert a == pytest.approx(b, abs=1e-4)


def test_apply_rope_tensor_gradient():
    f = build_freqs(4)
    with precision(np.float64):
        x = parameter(np.random.default_rng(1).standard_normal((3, 4)))
        w = np.random.default_rng(2).standard_normal((3, 4))
        pos = np.arange(3)
        (apply_rope(x, pos, f) * Tensor(w)).sum().backward()
        fd = finite_diff_grad(lambda v: float(np.sum(apply_rope(v, pos, f) * w)), x.data, h=1e-6)
    np.testing.assert_allclose(x.grad, fd, atol=1e-8)


def test_ntk_examples():
    assert ntk_scale_base(10000, 1.0, 8) == 10000
    assert ntk_scale_base(10000, 2.0, 8) == pytest.approx(25198.42, abs=1e-2)
    assert ntk_scale_base(10000, 2.0, 8) == pytest.approx(ntk_base(10000, 2.0, 8))
    with pytest.raises(RopeConfigError):
        ntk_scale_base(10000, 0.5, 8)
    with pytest.raises(RopeConfigError):
        ntk_scale_base(10000, 2.0, 2)


def test_ntk_lowest_frequency_matches_interpolation():
    D, s, L = 64, 2.0, 1000
    th = build_freqs(D).theta[-1]
    th2 = build_freqs(D, ntk_scale_base(10000, s, D)).theta[-1]
    assert th2 * (s * L) == pytest.approx(th * L, rel=0.01)


@given(st.floats(1.0, 50.0), st.floats(1e-3, 10.0), st.integers(2, 32).map(lambda n: 2 * n))
def test_ntk_monotone(s, ds, D):
    assert ntk_scale_base(1e4, s + ds, D) > ntk_scale_base(1e4, s, D)
