"""Flows of time-dependent velocity fields with co-integrated differentials.

A velocity oracle is any callable ``field(x, t) -> (v, dv)`` with ``x`` of
shape ``(P, d)``, ``v`` of shape ``(P, d)`` and ``dv`` of shape ``(P, d, d)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import JacobianCollapseError, NonFiniteError
from .kernels import ParticleField, field_eval_with_jacobian, kernel_matrix, rkhs_norm_sq

SCHEMES = ("euler", "rk4")
JACOBIAN_FLOOR = 1e-8


@dataclass
class FlowState:
    positions: np.ndarray
    differentials: np.ndarray
    jacobians: np.ndarray
    time: float


@dataclass
class FlowTrajectory:
    times: np.ndarray
    positions: np.ndarray       # (N+1, P, d)
    differentials: np.ndarray   # (N+1, P, d, d)

    @property
    def jacobians(self) -> np.ndarray:
        return np.linalg.det(self.differentials)

    def __len__(self):
        return len(self.times)

    def state(self, k: int) -> FlowState:
        return FlowState(self.positions[k], self.differentials[k],
                         np.linalg.det(self.differentials[k]), float(self.times[k]))

    @property
    def final(self) -> FlowState:
        return self.state(-1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "particle_id", "x", "y", "d11", "d12", "d21", "d22", "jac"])
        jac = self.jacobians
        for k, t in enumerate(self.times):
            for p in range(self.positions.shape[1]):
                q = self.positions[k, p]
                D = self.differentials[k, p]
                w.writerow([repr(float(t)), p, repr(float(q[0])), repr(float(q[1])),
                            repr(float(D[0, 0])), repr(float(D[0, 1])),
                            repr(float(D[1, 0])), repr(float(D[1, 1])), repr(float(jac[k, p]))])
        return buf.getvalue()


@dataclass
class ContrastFlowState:
    values: np.ndarray
    derivatives: np.ndarray
    time: float


@dataclass
class ContrastTrajectory:
    times: np.ndarray
    values: np.ndarray        # (N+1, P)
    derivatives: np.ndarray   # (N+1, P)

    def state(self, k: int) -> ContrastFlowState:
        return ContrastFlowState(self.values[k], self.derivatives[k], float(self.times[k]))


def _check(q, D):
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(D))):
        raise NonFiniteError("flow state became non-finite")
    jac = np.linalg.det(D)
    if np.any(jac <= JACOBIAN_FLOOR):
        raise JacobianCollapseError(f"jacobian fell to {jac.min():.3e}")


def _step(field, q, D, t, dt, scheme):
    if scheme == "euler":
        v, dv = field(q, t)
        return q + dt * v, D + dt * (dv @ D)
    v1, a1 = field(q, t)
    k1q, k1D = v1, a1 @ D
    v2, a2 = field(q + 0.5 * dt * k1q, t + 0.5 * dt)
    D2 = D + 0.5 * dt * k1D
    k2q, k2D = v2, a2 @ D2
    v3, a3 = field(q + 0.5 * dt * k2q, t + 0.5 * dt)
    D3 = D + 0.5 * dt * k2D
    k3q, k3D = v3, a3 @ D3
    v4, a4 = field(q + dt * k3q, t + dt)
    D4 = D + dt * k3D
    k4q, k4D = v4, a4 @ D4
    q = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    D = D + dt / 6.0 * (k1D + 2 * k2D + 2 * k3D + k4D)
    return q, D


def integrate_flow(field: Callable, seeds, steps: int = 20, scheme: str = "rk4",
                   t0: float = 0.0, t1: float = 1.0) -> FlowTrajectory:
    """Solve ``dq/dt = v(q, t)`` and ``dD/dt = dv(q, t) D`` from ``D = Id``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    q = np.array(seeds, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    P, d = q.shape
    D = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    dt = (t1 - t0) / steps
    times = t0 + dt * np.arange(steps + 1)
    qs = [q]
    Ds = [D]
    for k in range(steps):
        q, D = _step(field, q, D, times[k], dt, scheme)
        _check(q, D)
        qs.append(q)
        Ds.append(D)
    return FlowTrajectory(times, np.array(qs), np.array(Ds))


def integrate_flow_reverse(field: Callable, seeds, steps: int = 20, scheme: str = "rk4",
                           T: float = 1.0) -> FlowTrajectory:
    """Flow of ``-v(., T - t)``; the final positions are ``phi_{T,0}(seeds)``.

    ``times`` of the returned trajectory are the *forward* times ``T - t``.
    """

    def back(x, t):
        v, dv = field(x, T - t)
        return -v, -dv

    tr = integrate_flow(back, seeds, steps, scheme, 0.0, T)
    return FlowTrajectory(T - tr.times, tr.positions, tr.differentials)


def integrate_contrast_flow(field: Callable, seeds, steps: int = 20, scheme: str = "rk4",
                            t0: float = 0.0, t1: float = 1.0) -> ContrastTrajectory:
    """One-dimensional flow on the intensity axis; ``field(z, t) -> (s, ds)`` on 1-D arrays."""
    z = np.asarray(seeds, dtype=float).reshape(-1)

    def lifted(x, t):
        s, ds = field(x[:, 0], t)
        return np.asarray(s).reshape(-1, 1), np.asarray(ds).reshape(-1, 1, 1)

    tr = integrate_flow(lifted, z[:, None], steps, scheme, t0, t1)
    return ContrastTrajectory(tr.times, tr.positions[..., 0], tr.differentials[..., 0, 0])


# -- time-dependent kernel fields -------------------------------------------

class FieldPath:
    """A velocity path given by kernel fields sampled at increasing times.

    Between samples the field is interpolated linearly in time; RK4 only
    queries sample times when the samples sit on the half-step grid.
    """

    def __init__(self, times: Sequence[float], fields: Sequence[ParticleField]):
        self.times = np.asarray(times, dtype=float)
        self.fields = list(fields)
        if len(self.times) != len(self.fields):
            raise ValueError("one field per sample time")

    @classmethod
    def constant(cls, f: ParticleField, T: float = 1.0, steps: int = 20) -> "FieldPath":
        times = np.linspace(0.0, T, 2 * steps + 1)
        return cls(times, [f] * len(times))

    def _locate(self, t):
        k = int(np.searchsorted(self.times, t))
        if k < len(self.times) and abs(self.times[k] - t) < 1e-12:
            return k, k, 0.0
        if k > 0 and abs(self.times[k - 1] - t) < 1e-12:
            return k - 1, k - 1, 0.0
        k = min(max(k, 1), len(self.times) - 1)
        t0, t1 = self.times[k - 1], self.times[k]
        return k - 1, k, (t - t0) / (t1 - t0)

    def at(self, t: float) -> ParticleField:
        i, j, th = self._locate(t)
        if i == j or th == 0.0:
            return self.fields[i]
        return self.fields[i].scaled(1 - th) + self.fields[j].scaled(th)

    def __call__(self, x, t):
        return field_eval_with_jacobian(self.at(t), x)

    def scalar_oracle(self):
        """Adapter for 1-D contrast paths: ``(z, t) -> (s, ds)`` on flat arrays."""

        def oracle(z, t):
            v, dv = self(np.asarray(z, dtype=float).reshape(-1, 1), t)
            return v[:, 0], dv[:, 0, 0]

        return oracle

    def norms(self) -> np.ndarray:
        return np.sqrt(np.maximum([rkhs_norm_sq(f) for f in self.fields], 0.0))

    def __sub__(self, other: "FieldPath") -> "FieldPath":
        if not np.allclose(self.times, other.times):
            raise ValueError("paths must share sample times")
        return FieldPath(self.times, [_difference(f, g) for f, g in zip(self.fields, other.fields)])


def _difference(f: ParticleField, g: ParticleField) -> ParticleField:
    # on shared nodes subtract covectors; the concatenated form loses half the digits
    if f.nodes.shape == g.nodes.shape and np.array_equal(f.nodes, g.nodes):
        return ParticleField(f.nodes, f.covectors - g.covectors, f.spec)
    return f + g.scaled(-1.0)


def time_integral(times, values) -> float:
    """Composite Simpson on uniform samples with an even interval count, else trapezoid."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(times) - 1
    if n == 0:
        return 0.0
    h = np.diff(times)
    if n % 2 == 0 and np.allclose(h, h[0]):
        return float(h[0] / 3.0 * (values[0] + values[-1] + 4 * values[1:-1:2].sum()
                                   + 2 * values[2:-1:2].sum()))
    return float(np.sum(0.5 * h * (values[1:] + values[:-1])))


def path_l1(path: FieldPath) -> float:
    return time_integral(path.times, path.norms())


def path_l2(path: FieldPath) -> float:
    return float(np.sqrt(time_integral(path.times, path.norms() ** 2)))


# -- empirical stability bounds ---------------------------------------------

@dataclass
class BoundReport:
    c_V: float
    field_lhs: float
    field_rhs: float
    time_l1_ratio: float
    time_sqrt_ratio: float

    @property
    def field_ok(self) -> bool:
        return self.field_lhs <= self.field_rhs * (1 + 1e-9) + 1e-14

    @property
    def time_ok(self) -> bool:
        return self.time_l1_ratio <= 1 + 1e-9 and self.time_sqrt_ratio <= 1 + 1e-9

    @property
    def passed(self) -> bool:
        return self.field_ok and self.time_ok


def _sup_ratio(f: ParticleField, pts) -> float:
    nrm = np.sqrt(max(rkhs_norm_sq(f), 0.0))
    if nrm == 0.0 or len(f) == 0:
        return 0.0
    v, dv = field_eval_with_jacobian(f, pts)
    sup = max(np.max(np.linalg.norm(v, axis=1)), np.max(np.linalg.norm(dv, ord=2, axis=(1, 2))))
    return float(sup / nrm)


def estimate_cV(paths: Sequence[FieldPath], pts) -> float:
    """Sampled ``sup ||v||_{1,inf} / ||v||_V`` over all fields of the given paths."""
    best = 0.0
    for p in paths:
        for f in p.fields:
            best = max(best, _sup_ratio(f, pts))
    return best


def check_flow_bounds(u_path: FieldPath, v_path: FieldPath, T: float = 1.0,
                      probe: int = 16, steps: int | None = None,
                      scheme: str = "rk4") -> BoundReport:
    """Evaluate both sides of the field-perturbation and time-regularity flow bounds.

    Paths must be sampled on the half-step grid of ``steps`` RK4 steps over ``[0, T]``.
    """
    if steps is None:
        steps = (len(v_path.times) - 1) // 2
    g = (np.arange(probe) + 0.5) / probe
    X, Y = np.meshgrid(g, g, indexing="xy")
    seeds = np.column_stack([X.ravel(), Y.ravel()])
    fu = integrate_flow(u_path, seeds, steps, scheme, 0.0, T)
    fv = integrate_flow(v_path, seeds, steps, scheme, 0.0, T)
    diff = v_path - u_path
    pts = np.vstack([seeds, fu.positions.reshape(-1, 2), fv.positions.reshape(-1, 2)])
    c_V = estimate_cV([u_path, v_path, diff], pts)

    lhs = float(np.max(np.linalg.norm(fu.positions - fv.positions, axis=-1)))
    rhs = c_V * path_l1(diff) * np.exp(c_V * path_l1(v_path))

    # time regularity on step endpoints of the v flow
    norms = v_path.norms()
    l2 = path_l2(v_path)
    ts = fv.times
    cum = np.concatenate([[0.0], np.cumsum([
        time_integral(v_path.times[2 * k:2 * k + 3], norms[2 * k:2 * k + 3]) for k in range(steps)])])
    worst_l1 = 0.0
    worst_sqrt = 0.0
    for i in range(len(ts)):
        for j in range(i + 1, len(ts)):
            gap = float(np.max(np.linalg.norm(fv.positions[j] - fv.positions[i], axis=-1)))
            b1 = c_V * (cum[j] - cum[i])
            b2 = c_V * np.sqrt(ts[j] - ts[i]) * l2
            worst_l1 = max(worst_l1, gap / b1 if b1 > 0 else (0.0 if gap == 0 else np.inf))
            worst_sqrt = max(worst_sqrt, gap / b2 if b2 > 0 else (0.0 if gap == 0 else np.inf))
    return BoundReport(c_V, lhs, float(rhs), worst_l1, worst_sqrt)
