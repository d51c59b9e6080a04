import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geomatch.kernels import (KernelSpec, ParticleField, distance_sq, eval_k, field_eval,
                              field_jacobian, grad1_k, inner, kernel_matrix, rkhs_norm_sq)

coords = st.floats(-2, 2, allow_nan=False)
points = arrays(float, 2, elements=coords)


def test_eval_k_closed_forms():
    s = KernelSpec(1.0)
    assert eval_k(s, [0.3, -0.2], [0.3, -0.2]) == 1.0
    x = np.array([np.sqrt(2 * np.log(2)), 0.0])
    assert eval_k(s, x, [0.0, 0.0]) == pytest.approx(0.5, rel=1e-14)
    assert eval_k(KernelSpec(0.1), [0, 0], [0.3, 0.4]) == pytest.approx(np.exp(-12.5), rel=1e-14)


def test_kernel_spec_rejects_bad_parameters():
    for kw in ({"sigma": 0.0}, {"sigma": 1.0, "scale": -1.0}, {"sigma": 1.0, "family": "laplace"}):
        with pytest.raises(ValueError):
            KernelSpec(**kw)


def test_grad1_k_closed_form_and_zero():
    s = KernelSpec(1.0)
    np.testing.assert_array_equal(grad1_k(s, [0.2, 0.7], [0.2, 0.7]), [0.0, 0.0])
    np.testing.assert_allclose(grad1_k(s, [1, 0], [0, 0]), [-np.exp(-0.5), 0], rtol=1e-14)


@given(points, points, st.floats(0.5, 2.0))
def test_grad1_k_matches_central_difference(x, y, sigma):
    s = KernelSpec(sigma)
    h = 1e-5
    fd = [(eval_k(s, x + h * e, y) - eval_k(s, x - h * e, y)) / (2 * h) for e in np.eye(2)]
    assert np.max(np.abs(grad1_k(s, x, y) - fd)) <= 1e-8


def test_field_eval_examples():
    s = KernelSpec(0.3)
    np.testing.assert_array_equal(field_eval(ParticleField.empty(s), [0.1, 0.2]), [0, 0])
    a = np.array([0.4, -1.1])
    q = np.array([0.3, 0.6])
    np.testing.assert_allclose(field_eval(ParticleField([q], [a], s), q), a, rtol=1e-15)
    sym = ParticleField([q, -q], [a, -a], s)
    np.testing.assert_allclose(field_eval(sym, [0.0, 0.0]), 0.0, atol=1e-15)


def test_field_jacobian_examples(rng):
    s = KernelSpec(0.3)
    np.testing.assert_array_equal(field_jacobian(ParticleField.empty(s), [0.1, 0.2]), np.zeros((2, 2)))
    q = np.array([0.3, 0.6])
    np.testing.assert_array_equal(field_jacobian(ParticleField([q], [[1.0, 2.0]], s), q), np.zeros((2, 2)))


@given(st.integers(0, 10_000))
def test_field_jacobian_matches_fd(seed):
    rng = np.random.default_rng(seed)
    f = ParticleField(rng.uniform(0, 1, (6, 2)), rng.normal(size=(6, 2)), KernelSpec(0.25, 2, 1.5))
    x = rng.uniform(0, 1, 2)
    h = 1e-6
    fd = np.column_stack([(field_eval(f, x + h * e) - field_eval(f, x - h * e)) / (2 * h) for e in np.eye(2)])
    J = field_jacobian(f, x)
    assert np.linalg.norm(J - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


def test_rkhs_norm_examples():
    s = KernelSpec(0.2, 2, 3.0)
    a = np.array([0.5, -2.0])
    assert rkhs_norm_sq(ParticleField.empty(s)) == 0.0
    assert rkhs_norm_sq(ParticleField([[0.4, 0.4]], [a], s)) == pytest.approx(a @ a / 3.0, rel=1e-15)
    two = ParticleField([[0.4, 0.4], [0.4, 0.4]], [a, a], s)
    assert rkhs_norm_sq(two) == pytest.approx(4 * (a @ a) / 3.0, rel=1e-15)


@given(st.integers(0, 10_000))
def test_gram_bilinear_identities(seed):
    rng = np.random.default_rng(seed)
    s = KernelSpec(0.3, 2, 0.7)
    f = ParticleField(rng.uniform(0, 1, (5, 2)), rng.normal(size=(5, 2)), s)
    g = ParticleField(rng.uniform(0, 1, (4, 2)), rng.normal(size=(4, 2)), s)
    assert inner(f, g) == pytest.approx(inner(g, f), rel=1e-12)
    lhs = rkhs_norm_sq(f + g)
    rhs = rkhs_norm_sq(f) + 2 * inner(f, g) + rkhs_norm_sq(g)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)
    assert distance_sq(f, f) == pytest.approx(0.0, abs=1e-12)
    assert rkhs_norm_sq(f.scaled(-2.5)) == pytest.approx(6.25 * rkhs_norm_sq(f), rel=1e-12)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_kernel_matrix_is_psd(seed, sigma):
    pts = np.random.default_rng(seed).uniform(0, 1, (12, 2))
    K = kernel_matrix(KernelSpec(sigma), pts, pts)
    np.testing.assert_allclose(K, K.T, atol=0)
    assert np.min(np.linalg.eigvalsh(K)) >= -1e-10 * np.max(np.abs(K))


def test_scalar_kernel_fields():
    s = KernelSpec(0.5, 1)
    f = ParticleField([0.2, 0.8], [1.0, -0.5], s)
    z = np.array([[0.4]])
    expected = np.exp(-0.04 / 0.5) - 0.5 * np.exp(-0.16 / 0.5)
    np.testing.assert_allclose(field_eval(f, z), [[expected]], rtol=1e-14)
    assert field_jacobian(f, z).shape == (1, 1, 1)
