import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geomatch.geometry import grid_points, project, rectangle, single_piece_image, unit_square
from geomatch.scenes import halves_partition, run_lemma_suite
from geomatch.shape_derivative import (DomainFunctionalProblem, affine_field, boundary_derivative,
                                       compact_image_derivative, constant_field, domain_functional,
                                       image_derivative, is_degenerate, one_sided_fd, tilde_indicator)

M = 256
LEFT = rectangle(0.0, 0.0, 0.5, 1.0)


def test_domain_functional_areas():
    tol = 2.0 / M
    X = constant_field([1.0, 0.0])
    assert domain_functional(DomainFunctionalProblem(unit_square(), unit_square(), X), 0.0, M) == pytest.approx(1.0, abs=tol)
    assert domain_functional(DomainFunctionalProblem(LEFT, unit_square(), X), 0.0, M) == pytest.approx(0.5, abs=tol)
    assert domain_functional(DomainFunctionalProblem(LEFT, LEFT, X), 0.1, M) == pytest.approx(0.4, abs=tol)


def test_domain_functional_rejects_coarse_resolution():
    with pytest.raises(ValueError):
        domain_functional(DomainFunctionalProblem(LEFT, LEFT, constant_field([1, 0])), 0.0, 16)


def test_indicator_and_cut_cell_agree_at_zero():
    prob = DomainFunctionalProblem(rectangle(0.2, 0.2, 0.6, 0.6), rectangle(0.4, 0.3, 0.9, 0.8),
                                   constant_field([0.3, 0.2]), f=lambda p: 1 + p[:, 0], g=lambda p: 2 - p[:, 1])
    a = domain_functional(prob, 0.05, M)
    b = domain_functional(prob, 0.05, M, method="indicator")
    assert a == pytest.approx(b, rel=2e-2)


def test_tilde_indicator_examples():
    X = constant_field([1.0, 0.3])
    assert tilde_indicator(LEFT, X, [0.25, 0.5]) == 1
    assert tilde_indicator(LEFT, X, [0.75, 0.5]) == 0
    # on the left edge the field points inward
    assert tilde_indicator(LEFT, X, [0.0, 0.5]) == 1
    # on the right edge it points outward
    assert tilde_indicator(LEFT, X, [0.5, 0.5]) == 0


def test_boundary_derivative_examples():
    assert boundary_derivative(DomainFunctionalProblem(LEFT, unit_square(), constant_field([0, 0])), M) == 0.0
    inside = DomainFunctionalProblem(LEFT, unit_square(), constant_field([1.0, 0.0]))
    assert boundary_derivative(inside, M) == pytest.approx(0.0, abs=1e-10)
    same = DomainFunctionalProblem(LEFT, LEFT, constant_field([1.0, 0.0]))
    assert boundary_derivative(same, M) == pytest.approx(-1.0, abs=1e-10)
    assert one_sided_fd(same, 1e-3, M) == pytest.approx(-1.0, abs=1e-2)


def test_degenerate_flag_for_tangential_transport():
    assert is_degenerate(DomainFunctionalProblem(LEFT, LEFT, constant_field([0.0, 1.0])))
    assert not is_degenerate(DomainFunctionalProblem(LEFT, LEFT, constant_field([1.0, 0.3])))


@settings(max_examples=6)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.25, 0.45))
def test_boundary_derivative_matches_fd_for_random_translations(cx, cy, x0):
    if abs(cx) + abs(cy) < 0.2:
        cx = 0.5
    prob = DomainFunctionalProblem(rectangle(x0, 0.3, x0 + 0.3, 0.6), rectangle(0.3, 0.2, 0.8, 0.8),
                                   constant_field([cx, cy]), f=lambda p: 1 + p[:, 0] ** 2,
                                   g=lambda p: 1 + 0.5 * p[:, 1])
    a = boundary_derivative(prob, 512)
    fd = one_sided_fd(prob, 1e-3, 512)
    assert abs(a - fd) <= 1e-2 * max(abs(a), 1e-2)


def test_image_derivative_examples():
    n = 32
    X0 = constant_field([0.0, 0.0])
    X = constant_field([1.0, 0.0])
    halves = project([np.zeros((n, n)), np.ones((n, n))], halves_partition())
    ones = single_piece_image(np.ones((n, n)))
    assert image_derivative(halves, ones, X0) == 0.0
    assert image_derivative(halves, ones, X) == pytest.approx(-1.0, abs=1e-10)
    xs = grid_points(n)[:, 0].reshape(n, n)
    assert image_derivative(single_piece_image(xs), ones, X) == pytest.approx(-1.0, abs=1e-10)


def test_compact_form_equals_split_form(rng):
    n = 32
    pts = grid_points(n)
    f = project([(1 + pts[:, 0] * pts[:, 1]).reshape(n, n), np.cos(pts[:, 1]).reshape(n, n)], halves_partition())
    g = single_piece_image((1 + pts[:, 1]).reshape(n, n))
    X = affine_field([[0.1, 0.2], [-0.3, 0.05]], [0.4, 0.1])
    assert compact_image_derivative(f, g, X) == pytest.approx(image_derivative(f, g, X), rel=1e-10)


def test_bundled_suite_is_large_enough():
    rows = run_lemma_suite(m=128, tol=0.5)
    assert len(rows) >= 6
    assert {r[-1] for r in rows} <= {"PASS", "FAIL", "DEGENERATE"}
    assert any(r[-1] == "DEGENERATE" for r in rows)
