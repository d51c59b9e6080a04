"""Bundled scenes: derivative suite, matching targets and random states."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import LipschitzDomain, PiecewiseImage, grid_points, project, rectangle, regular_polygon
from .shape_derivative import (DomainFunctionalProblem, VectorField, affine_field, boundary_derivative,
                               constant_field, domain_functional, image_derivative, is_degenerate)


def _rot(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def _triangle(center, size, deg):
    base = np.array([[-0.5, -0.35], [0.5, -0.35], [0.0, 0.5]]) * size
    return LipschitzDomain(base @ _rot(deg).T + np.asarray(center))


def rotation_field(center, omega, drift) -> VectorField:
    c = np.asarray(center, float)
    A = omega * np.array([[0.0, -1.0], [1.0, 0.0]])
    return affine_field(A, np.asarray(drift, float) - A @ c)


def disk_partition(center=(0.5, 0.5), radius=0.25, k=64) -> list[LipschitzDomain]:
    ring = regular_polygon(center, radius, k)
    return [LipschitzDomain(ring), LipschitzDomain(rectangle(0, 0, 1, 1).vertices, [ring])]


def halves_partition() -> list[LipschitzDomain]:
    return [rectangle(0.0, 0.0, 0.5, 1.0), rectangle(0.5, 0.0, 1.0, 1.0)]


@dataclass
class LemmaScene:
    name: str
    analytic: Callable[[], float]
    fd: Callable[[float], float]
    degenerate: bool = False


def _polygon_scene(prob: DomainFunctionalProblem, m: int) -> LemmaScene:
    def fd(h):
        return (domain_functional(prob, h, m) - domain_functional(prob, 0.0, m)) / h
    return LemmaScene(prob.name, lambda: boundary_derivative(prob, m), fd, is_degenerate(prob))


def image_scene(m: int = 512, n: int = 64):
    """Piecewise-constant disk image against a two-valued half/half weight."""
    fparts = disk_partition()
    gparts = halves_partition()
    fvals = [1.0, 0.0]
    gvals = [1.0, 2.0]
    f_img = project([np.full((n, n), v) for v in fvals], fparts)
    g_img = project([np.full((n, n), v) for v in gvals], gparts)
    X = constant_field([0.6, 0.8])

    def functional(t):
        total = 0.0
        for Ui, fi in zip(fparts, fvals):
            if fi == 0.0:
                continue
            for Vj, gj in zip(gparts, gvals):
                prob = DomainFunctionalProblem(Ui, Vj, X, f=lambda p, c=fi: np.full(len(p), c),
                                               g=lambda p, c=gj: np.full(len(p), c))
                total += domain_functional(prob, t, m)
        return total

    return LemmaScene("piecewise-constant image", lambda: image_derivative(f_img, g_img, X),
                      lambda h: (functional(h) - functional(0.0)) / h)


def lemma_suite(m: int = 512) -> list[LemmaScene]:
    f_smooth = lambda p: 1.0 + 0.5 * p[:, 0] + 0.25 * np.sin(3 * p[:, 1])
    g_smooth = lambda p: 1.0 + p[:, 1] ** 2
    scenes = [
        DomainFunctionalProblem(rectangle(0.3, 0.35, 0.6, 0.65), rectangle(0.2, 0.2, 0.8, 0.8),
                                constant_field([0.7, 0.4]), f_smooth, g_smooth, name="nested rectangles"),
        DomainFunctionalProblem(rectangle(0.2, 0.2, 0.6, 0.6), rectangle(0.4, 0.3, 0.9, 0.8),
                                affine_field([[0.1, -0.4], [0.3, 0.05]], [0.5, 0.3]),
                                lambda p: np.cos(3 * p[:, 0]) + p[:, 1], lambda p: 1 + p[:, 0] * p[:, 1],
                                name="overlapping rectangles"),
        DomainFunctionalProblem(_triangle((0.45, 0.5), 0.5, 20.0), _triangle((0.55, 0.5), 0.5, -15.0),
                                rotation_field((0.5, 0.5), 0.8, (0.3, -0.2)), f_smooth, g_smooth,
                                name="rotated triangles"),
        DomainFunctionalProblem(LipschitzDomain(regular_polygon((0.45, 0.5), 0.25, 64)),
                                rectangle(0.5, 0.2, 0.9, 0.8), constant_field([1.0, 0.5]), f_smooth,
                                g_smooth, name="disk polygon vs square"),
        DomainFunctionalProblem(rectangle(0.0, 0.0, 0.5, 1.0), rectangle(0.0, 0.0, 0.5, 1.0),
                                constant_field([1.0, 0.3]), name="half-square identical domains"),
        DomainFunctionalProblem(rectangle(0.0, 0.0, 0.5, 1.0), rectangle(0.0, 0.0, 0.5, 1.0),
                                constant_field([1.0, 0.0]), name="half-square tangential"),
    ]
    return [_polygon_scene(p, m) for p in scenes] + [image_scene(m)]


def run_lemma_suite(m: int = 512, h: float = 1e-3, tol: float = 1e-2):
    """Rows ``(name, analytic, fd, rel_err, status)``; status is PASS, FAIL or DEGENERATE."""
    rows = []
    for sc in lemma_suite(m):
        if sc.degenerate:
            rows.append((sc.name, float("nan"), float("nan"), float("nan"), "DEGENERATE"))
            continue
        a = sc.analytic()
        f = sc.fd(h)
        err = abs(a - f) / max(abs(a), 1e-6)
        rows.append((sc.name, a, f, err, "PASS" if err <= tol else "FAIL"))
    return rows


# -- matching scenes ---------------------------------------------------------

def gaussian_image(n, center, width=0.12, amplitude=1.0):
    p = grid_points(n)
    r2 = np.sum((p - np.asarray(center)) ** 2, axis=1)
    return (amplitude * np.exp(-r2 / (2 * width ** 2))).reshape(n, n)


def translated_gaussian(n: int = 32, shift=(0.06, 0.04)):
    a = gaussian_image(n, (0.5, 0.5))
    b = gaussian_image(n, (0.5 + shift[0], 0.5 + shift[1]))
    return project([a], [rectangle(0, 0, 1, 1)]), project([b], [rectangle(0, 0, 1, 1)])


def disk_image(n: int, center, radius: float, inside: float = 1.0, outside: float = 0.0,
               k: int = 32) -> PiecewiseImage:
    parts = disk_partition(center, radius, k)
    return project([np.full((n, n), inside), np.full((n, n), outside)], parts)


def translated_disk(n: int = 32, shift=(0.06, 0.0), radius=0.2):
    return disk_image(n, (0.5, 0.5), radius), disk_image(n, (0.5 + shift[0], 0.5 + shift[1]), radius)


def pure_contrast(n: int = 32, radius=0.2):
    """Same geometry, remapped intensities: 0.2/0.8 becomes 0.1/0.9."""
    return (disk_image(n, (0.5, 0.5), radius, inside=0.8, outside=0.2),
            disk_image(n, (0.5, 0.5), radius, inside=0.9, outside=0.1))


def bounded_hamiltonian_state(seed: int, n: int = 32):
    """Two-piece state used by the conservation and two-route studies.

    The amplitudes keep the motion gentle against the grid spacing (the ``Pi``
    bumps move by well under their radius) while the contrast field is strong
    enough for the energy drift to sit clearly above round-off.
    """
    from .hamiltonian import random_state
    img = project([np.zeros((n, n)), np.ones((n, n))], halves_partition())
    return random_state(np.random.default_rng(seed), img, amp_curve=0.2, amp_grid=20.0,
                        variation=0.02, curve_subdivisions=32)
