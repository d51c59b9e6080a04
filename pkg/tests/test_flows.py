import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from geomatch.errors import JacobianCollapseError
from geomatch.flows import (FieldPath, check_flow_bounds, integrate_contrast_flow, integrate_flow,
                            integrate_flow_reverse, path_l1, path_l2, time_integral)
from geomatch.kernels import KernelSpec, ParticleField

SEEDS = np.array([[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]])


def zero_field(x, t):
    return np.zeros_like(x), np.zeros((len(x), 2, 2))


def const_field(c):
    c = np.asarray(c, float)
    return lambda x, t: (np.broadcast_to(c, x.shape).copy(), np.zeros((len(x), 2, 2)))


def linear_field(A):
    return lambda x, t: (x @ A.T, np.broadcast_to(A, (len(x), 2, 2)).copy())


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_zero_and_constant_fields(scheme):
    tr = integrate_flow(zero_field, SEEDS, 5, scheme)
    np.testing.assert_array_equal(tr.positions, np.broadcast_to(SEEDS, tr.positions.shape))
    np.testing.assert_array_equal(tr.differentials[-1], np.broadcast_to(np.eye(2), (3, 2, 2)))
    c = [0.3, -0.1]
    tr = integrate_flow(const_field(c), SEEDS, 7, scheme)
    np.testing.assert_allclose(tr.final.positions, SEEDS + c, atol=1e-14)
    np.testing.assert_array_equal(tr.final.differentials, np.broadcast_to(np.eye(2), (3, 2, 2)))


def test_linear_field_matches_matrix_exponential():
    A = np.array([[0.3, -0.8], [0.5, 0.1]])
    E = expm(A)
    errs = []
    for N in (10, 20):
        tr = integrate_flow(linear_field(A), SEEDS, N, "rk4")
        errs.append(np.max(np.abs(tr.final.differentials - E)))
        np.testing.assert_allclose(tr.final.positions, SEEDS @ E.T, atol=1e-5)
    assert errs[0] < 1e-5
    assert errs[0] / errs[1] > 12  # fourth order


def test_reverse_flow_examples():
    tr = integrate_flow_reverse(zero_field, SEEDS, 4)
    np.testing.assert_array_equal(tr.final.positions, SEEDS)
    tr = integrate_flow_reverse(const_field([0.2, 0.1]), SEEDS, 4)
    np.testing.assert_allclose(tr.final.positions, SEEDS - [0.2, 0.1], atol=1e-14)


@given(st.integers(0, 10_000))
def test_forward_then_reverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    f = ParticleField(rng.uniform(0.2, 0.8, (5, 2)), 0.3 * rng.normal(size=(5, 2)), KernelSpec(0.2))
    path = FieldPath.constant(f, 1.0, 40)
    fwd = integrate_flow(path, SEEDS, 40)
    back = integrate_flow_reverse(path, fwd.final.positions, 40)
    assert np.max(np.abs(back.final.positions - SEEDS)) <= 1e-5


def test_flow_jacobian_is_det_of_differential(rng):
    f = ParticleField(rng.uniform(0.2, 0.8, (5, 2)), 0.3 * rng.normal(size=(5, 2)), KernelSpec(0.2))
    tr = integrate_flow(FieldPath.constant(f, 1.0, 10), SEEDS, 10)
    np.testing.assert_allclose(tr.jacobians, np.linalg.det(tr.differentials))
    assert np.all(tr.jacobians > 0)


def test_collapse_is_reported():
    A = np.array([[-30.0, 0.0], [0.0, 0.0]])
    with pytest.raises(JacobianCollapseError):
        integrate_flow(linear_field(A), SEEDS, 2, "euler")


def test_contrast_flow_examples():
    z = np.array([0.0, 0.5, 2.0])
    tr = integrate_contrast_flow(lambda z, t: (np.zeros_like(z), np.zeros_like(z)), z, 4)
    np.testing.assert_array_equal(tr.values[-1], z)
    tr = integrate_contrast_flow(lambda z, t: (np.ones_like(z), np.zeros_like(z)), z, 4)
    np.testing.assert_allclose(tr.values[-1], z + 1, atol=1e-14)
    errs = []
    for N in (10, 20):
        tr = integrate_contrast_flow(lambda z, t: (z, np.ones_like(z)), z, N)
        errs.append(np.max(np.abs(tr.values[-1] - np.e * z)) + np.max(np.abs(tr.derivatives[-1] - np.e)))
    assert errs[0] < 1e-5 and errs[0] / errs[1] > 12


def test_trajectory_csv_columns():
    tr = integrate_flow(const_field([0.1, 0.0]), SEEDS[:2], 2)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,particle_id,x,y,d11,d12,d21,d22,jac"
    assert len(lines) == 1 + 3 * 2
    row = lines[-1].split(",")
    assert float(row[2]) == pytest.approx(0.6) and float(row[-1]) == 1.0


def test_time_integral_simpson_is_exact_for_cubics():
    t = np.linspace(0, 2, 9)
    assert time_integral(t, t ** 3 - t) == pytest.approx(4.0 - 2.0, abs=1e-14)


def test_path_norms_of_constant_path():
    f = ParticleField([[0.5, 0.5]], [[3.0, 4.0]], KernelSpec(0.2))
    p = FieldPath.constant(f, 2.0, 5)
    assert path_l1(p) == pytest.approx(10.0)
    assert path_l2(p) == pytest.approx(np.sqrt(50.0))


def _random_path(rng, times, amp=0.3, spec=KernelSpec(0.2)):
    nodes = rng.uniform(0.1, 0.9, (8, 2))
    a0, a1 = amp * rng.normal(size=(2, 8, 2))
    return FieldPath(times, [ParticleField(nodes, (1 - t) * a0 + t * a1, spec) for t in times])


def test_flow_bounds_trivial_cases(rng):
    steps = 6
    times = np.linspace(0, 1, 2 * steps + 1)
    u = _random_path(rng, times)
    rep = check_flow_bounds(u, u, 1.0, probe=8, steps=steps)
    assert rep.field_lhs == 0.0 and rep.passed
    zero = FieldPath(times, [f.scaled(0.0) for f in u.fields])
    rep = check_flow_bounds(u, zero, 1.0, probe=8, steps=steps)
    assert rep.time_l1_ratio == 0.0 and rep.time_sqrt_ratio == 0.0 and rep.passed


def test_flow_bounds_on_unit_norm_fields(rng):
    steps = 6
    times = np.linspace(0, 1, 2 * steps + 1)
    u, v = _random_path(rng, times), _random_path(rng, times)
    scale = 1.0 / max(v.norms().max(), u.norms().max())
    u = FieldPath(times, [f.scaled(scale) for f in u.fields])
    v = FieldPath(times, [f.scaled(scale) for f in v.fields])
    assert check_flow_bounds(u, v, 1.0, probe=16, steps=steps).passed
