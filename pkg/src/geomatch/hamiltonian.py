"""Hamiltonian system on curve particles and per-piece intensity grids.

State: curve particles ``Q0`` with covector densities ``P0`` (weights are
segment lengths), and per piece ``i`` an intensity grid ``Qi`` with a scalar
density ``Pi`` on the fixed reference cell centres (weight = cell area).

The discretisation is exactly Hamiltonian: ``H`` is a quadratic form in the
momenta, the grid gradient ``G`` is a fixed linear operator, and the ``Pi``
equation uses its adjoint, so ``sum_j w Pi_j`` is preserved by advection and
``H`` is conserved up to the time integrator error.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import NonFiniteError
from .flows import FieldPath, integrate_contrast_flow, integrate_flow_reverse
from .geodesic import xp_contrast_flow, xp_spatial_flow
from .geometry import bilinear, grid_gradient, grid_gradient_adjoint, grid_points, segment_distance
from .kernels import KernelSpec, ParticleField, field_eval, field_eval_with_jacobian


@dataclass
class HamiltonianState:
    Q0: np.ndarray          # (K, 2)
    Qi: np.ndarray          # (r, n, n)
    P0: np.ndarray          # (K, 2)
    Pi: np.ndarray          # (r, n, n)
    curve_weights: np.ndarray
    kernel_v: KernelSpec = field(default_factory=lambda: KernelSpec(0.15))
    kernel_s: KernelSpec = field(default_factory=lambda: KernelSpec(0.25, 1))
    fd_order: int = 4        # order of the central difference stencil for grad Qi

    def __post_init__(self):
        self.Q0 = np.asarray(self.Q0, dtype=float).reshape(-1, 2)
        self.P0 = np.asarray(self.P0, dtype=float).reshape(-1, 2)
        self.Qi = np.asarray(self.Qi, dtype=float)
        self.Pi = np.asarray(self.Pi, dtype=float)
        self.curve_weights = np.asarray(self.curve_weights, dtype=float).reshape(-1)
        if self.Qi.ndim == 2:
            self.Qi = self.Qi[None]
        if self.Pi.ndim == 2:
            self.Pi = self.Pi[None]
        if len(self.Q0) != len(self.P0) or len(self.Q0) != len(self.curve_weights):
            raise ValueError("curve positions, covectors and weights must have equal length")
        if self.Qi.shape != self.Pi.shape or self.Qi.shape[1] != self.Qi.shape[2]:
            raise ValueError("Qi and Pi must share one square grid per piece")
        if self.kernel_s.dimension != 1:
            self.kernel_s = KernelSpec(self.kernel_s.sigma, 1, self.kernel_s.scale)

    @property
    def n(self) -> int:
        return self.Qi.shape[1]

    @property
    def r(self) -> int:
        return self.Qi.shape[0]

    @property
    def grid_weight(self) -> float:
        return 1.0 / (self.n * self.n)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.Q0.ravel(), self.Qi.ravel(), self.P0.ravel(), self.Pi.ravel()])

    def unpack(self, x) -> "HamiltonianState":
        K = len(self.Q0)
        g = self.Qi.size
        a, b, c = 2 * K, 2 * K + g, 4 * K + g
        return replace(self, Q0=x[:a].reshape(-1, 2), Qi=x[a:b].reshape(self.Qi.shape),
                       P0=x[b:c].reshape(-1, 2), Pi=x[c:].reshape(self.Pi.shape))


def _grid_gradients(state: HamiltonianState) -> np.ndarray:
    return np.stack([grid_gradient(q, state.fd_order) for q in state.Qi])  # (r, n, n, 2)


def minimized_controls(state: HamiltonianState):
    """Optimal ``(v, s)``: curve nodes carry ``w_k P0_k``, grid nodes ``-w sum_i Pi grad Qi``."""
    w = state.grid_weight
    grads = _grid_gradients(state)
    grid_cov = -w * np.sum(state.Pi[..., None] * grads, axis=0).reshape(-1, 2)
    nodes = np.vstack([state.Q0, grid_points(state.n)])
    cov = np.vstack([state.curve_weights[:, None] * state.P0, grid_cov])
    # nodes with a zero covector do not change the field
    keep = np.any(cov != 0, axis=1)
    v = ParticleField(nodes[keep], cov[keep], state.kernel_v)
    sc = (w * state.Pi).reshape(-1)
    keep = sc != 0
    s = ParticleField(state.Qi.reshape(-1, 1)[keep], sc[keep, None], state.kernel_s)
    return v, s


def _axis_kernel(n: int, sigma: float) -> np.ndarray:
    x = (np.arange(n) + 0.5) / n
    return np.exp(-((x[:, None] - x[None, :]) ** 2) / (2.0 * sigma * sigma))


# Covectors below this fraction of the largest one are skipped when they act
# as kernel nodes; the difference stays far below round-off in H.
NODE_CUTOFF = 1e-15


def _live(c, axis=None):
    mag = np.abs(c) if axis is None else np.max(np.abs(c), axis=axis)
    top = mag.max() if mag.size else 0.0
    return mag > NODE_CUTOFF * top


def _evaluate(state: HamiltonianState) -> dict:
    """Fields of the minimized controls at every node that the equations need.

    The grid-to-grid part of ``v`` uses the separable form of the Gaussian on
    the tensor grid, ``v = K1 C K1 / scale`` per component.
    """
    n, w = state.n, state.grid_weight
    kv, ks = state.kernel_v, state.kernel_s
    K = len(state.Q0)
    grads = _grid_gradients(state)
    A = -w * np.sum(state.Pi[..., None] * grads, axis=0)          # (n, n, 2)
    a0 = state.curve_weights[:, None] * state.P0
    pts = grid_points(n)
    K1 = _axis_kernel(n, kv.sigma)
    vg = np.stack([K1 @ A[..., c] @ K1 for c in range(2)], axis=-1) / kv.scale
    vq = np.zeros((K, 2))
    dvq = np.zeros((K, 2, 2))
    if K:
        vg = vg + field_eval(ParticleField(state.Q0, a0, kv), pts).reshape(n, n, 2)
        keep = _live(A.reshape(-1, 2), axis=1)
        nodes = np.vstack([state.Q0, pts[keep]])
        cov = np.vstack([a0, A.reshape(-1, 2)[keep]])
        vq, dvq = field_eval_with_jacobian(ParticleField(nodes, cov, kv), state.Q0)
    c = (w * state.Pi).reshape(-1)
    keep = _live(c)
    z = state.Qi.reshape(-1, 1)
    sv, ds = field_eval_with_jacobian(ParticleField(z[keep], c[keep, None], ks), z)
    return {"grads": grads, "A": A, "a0": a0, "vg": vg, "vq": vq, "dvq": dvq,
            "sv": sv[:, 0].reshape(state.Qi.shape), "ds": ds[:, 0, 0].reshape(state.Qi.shape)}


def _value(state: HamiltonianState, ev: dict) -> float:
    # Gram(u) / scale = sum over nodes of covector . u(node)
    gv = np.sum(ev["a0"] * ev["vq"]) + np.sum(ev["A"] * ev["vg"])
    gs = np.sum(state.grid_weight * state.Pi * ev["sv"])
    return 0.5 * float(gv + gs)


def hamiltonian_value(state: HamiltonianState) -> float:
    """``H = (1/2) [Gram(v) / lambda + Gram(s) / beta]`` as weighted double sums."""
    return _value(state, _evaluate(state))


def hamiltonian_gradient(state: HamiltonianState):
    """Partial derivatives ``(dH/dQ0, dH/dQi, dH/dP0, dH/dPi)`` (plain, not density-scaled)."""
    return _gradient(state, _evaluate(state))


def _gradient(state: HamiltonianState, ev: dict):
    w = state.grid_weight
    K = len(state.Q0)
    vg, grads = ev["vg"], ev["grads"]
    dQ0 = np.einsum("kab,ka->kb", ev["dvq"], ev["a0"]) if K else np.zeros((0, 2))
    dP0 = state.curve_weights[:, None] * ev["vq"] if K else np.zeros((0, 2))
    dPi = w * (ev["sv"] - np.sum(grads * vg[None], axis=-1))
    dQi = np.stack([grid_gradient_adjoint(-w * P[..., None] * vg, state.fd_order)
                    for P in state.Pi]) + w * state.Pi * ev["ds"]
    return dQ0, dQi, dP0, dPi


def ham_rhs(state: HamiltonianState) -> HamiltonianState:
    """Time derivative of every component (returned as a state-shaped container)."""
    return _rhs(state, _evaluate(state))


def _rhs(state: HamiltonianState, ev: dict) -> HamiltonianState:
    w = state.grid_weight
    dQ0, dQi, dP0, dPi = _gradient(state, ev)
    cw = state.curve_weights[:, None]
    return replace(state, Q0=dP0 / cw if len(cw) else dP0, Qi=dPi / w,
                   P0=-dQ0 / cw if len(cw) else dQ0, Pi=-dQi / w)


@dataclass
class HamiltonianTrajectory:
    times: np.ndarray
    states: list
    energies: np.ndarray

    @property
    def relative_drift(self) -> float:
        h0 = self.energies[0]
        if h0 == 0:
            return float(np.max(np.abs(self.energies)))
        return float(np.max(np.abs(self.energies - h0)) / abs(h0))


def integrate_hamiltonian(state0: HamiltonianState, T: float = 1.0, steps: int = 40,
                          scheme: str = "rk4") -> HamiltonianTrajectory:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dt = T / steps

    def f(x):
        return ham_rhs(state0.unpack(x)).pack()

    x = state0.pack()
    st = state0
    states = [state0]
    ev = _evaluate(st)
    energies = [_value(st, ev)]
    for _ in range(steps):
        # the evaluation that gave H at the current state also gives k1
        k1 = _rhs(st, ev).pack()
        if scheme == "euler":
            x = x + dt * k1
        else:
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("hamiltonian integration became non-finite")
        st = state0.unpack(x)
        states.append(st)
        ev = _evaluate(st)
        energies.append(_value(st, ev))
    return HamiltonianTrajectory(np.linspace(0.0, T, steps + 1), states, np.array(energies))


def _spline_sample(values, pts):
    """Cubic-spline interpolation of cell-centred grid values at points of M."""
    n = values.shape[0]
    coords = np.asarray(pts, dtype=float)[:, ::-1].T * n - 0.5
    return map_coordinates(values, coords, order=3, mode="nearest")


def reconstruct(state0: HamiltonianState, T: float = 1.0, steps: int = 40,
                sample_steps=None) -> HamiltonianTrajectory:
    """Closed-form solution from the flows ``(phi, d phi, eta, d eta)``.

    The flows are those of the geodesic particle system started from the
    momenta of ``state0``; grid quantities are then evaluated by pulling back
    through the flow.  ``sample_steps`` selects the step indices to evaluate
    (all of them by default).
    """
    n, r = state0.n, state0.r
    w = state0.grid_weight
    K = len(state0.Q0)
    grid = grid_points(n)
    grads0 = _grid_gradients(state0)
    p_a = -np.sum(state0.Pi[..., None] * grads0, axis=0).reshape(-1, 2)
    # particles without momentum keep a zero covector and never affect the fields
    live = np.any(p_a != 0, axis=1)
    p_act = np.vstack([state0.P0, p_a[live]])
    w_act = np.concatenate([state0.curve_weights, np.full(int(live.sum()), w)])
    q0 = np.vstack([state0.Q0, grid[live]])
    kv, ks = state0.kernel_v, state0.kernel_s
    qs, Ds, node_q, node_a = xp_spatial_flow(np, q0, p_act, w_act, kv.sigma, kv.scale, steps, T)
    c = w * state0.Pi.reshape(-1)
    z0 = state0.Qi.reshape(-1)[c != 0]
    c = c[c != 0]
    zs, dzs, node_z, node_b = xp_contrast_flow(np, z0, c, ks.sigma, ks.scale, steps, T)
    times = np.linspace(0.0, T, steps + 1)
    half = np.linspace(0.0, T, 2 * steps + 1)
    v_path = FieldPath(half, [ParticleField(q, a, kv) for q, a in zip(node_q, node_a)])
    s_path = FieldPath(half, [ParticleField(z[:, None], b[:, None], ks) for z, b in zip(node_z, node_b)])
    if sample_steps is None:
        sample_steps = range(steps + 1)
    states, energies, ts = [], [], []
    from .geodesic import xp_inv_t_apply
    for k in sample_steps:
        t = times[k]
        Q0 = qs[k][:K]
        P0, _ = xp_inv_t_apply(np, Ds[k][:K], state0.P0) if K else (state0.P0, None)
        if k == 0:
            Qi, Pi = state0.Qi.copy(), state0.Pi.copy()
        else:
            sub_v = FieldPath(half[: 2 * k + 1], v_path.fields[: 2 * k + 1])
            sub_s = FieldPath(half[: 2 * k + 1], s_path.fields[: 2 * k + 1])
            back = integrate_flow_reverse(sub_v, grid, k, "rk4", t)
            y = back.positions[-1]
            jac_back = np.linalg.det(back.differentials[-1])
            Qi = np.empty_like(state0.Qi)
            Pi = np.empty_like(state0.Pi)
            for i in range(r):
                q_at = bilinear(state0.Qi[i], y)
                p_at = _spline_sample(state0.Pi[i], y)
                ct = integrate_contrast_flow(sub_s.scalar_oracle(), q_at, k, "rk4", 0.0, t)
                Qi[i] = ct.values[-1].reshape(n, n)
                Pi[i] = (p_at * jac_back / ct.derivatives[-1]).reshape(n, n)
        st = replace(state0, Q0=Q0, Qi=Qi, P0=P0, Pi=Pi)
        states.append(st)
        energies.append(hamiltonian_value(st))
        ts.append(t)
    return HamiltonianTrajectory(np.array(ts), states, np.array(energies))


def component_errors(a: HamiltonianState, b: HamiltonianState) -> dict:
    """Relative differences per component, normalised by the second argument."""
    out = {}
    for name in ("Q0", "Qi", "P0", "Pi"):
        x, y = getattr(a, name), getattr(b, name)
        den = np.linalg.norm(y)
        out[name] = float(np.linalg.norm(x - y) / den) if den > 0 else float(np.linalg.norm(x - y))
    return out


_PLACEMENT_LATTICE = 64


def random_state(rng, partition_image, amp_curve: float = 1.0, amp_grid: float = 1.0,
                 kernel_v: KernelSpec | None = None, kernel_s: KernelSpec | None = None,
                 curve_subdivisions: int = 1, variation: float = 0.3,
                 margin: float = 0.02, power: int = 4) -> HamiltonianState:
    """Random bounded state: smooth ``Qi`` and a smooth compact bump ``Pi`` inside each piece.

    Each bump is ``cos^power`` of the scaled radius, centred near the point of
    the piece farthest from the jump curve and the unit-square border, with a
    radius that stops ``margin`` short of both.  ``Qi`` is a piece level plus a
    plane wave of amplitude ``variation``.
    """
    img = partition_image
    n = img.n
    pts = grid_points(n)
    lab = img.labels(pts)
    curve = img.curve(curve_subdivisions)
    K = len(curve)

    def clearance(p):
        d_curve = segment_distance(p, curve.a, curve.b) if K else np.full(len(p), np.inf)
        return np.minimum(d_curve, np.min(np.column_stack([p, 1 - p]), axis=1))

    # bump placement uses a fixed candidate lattice, so a given rng draws the
    # same continuous state at every grid resolution
    cand = grid_points(_PLACEMENT_LATTICE)
    cand_lab = img.labels(cand)
    cand_clear = clearance(cand)
    # well separated piece levels, so the contrast field is never a pure shift
    slots = rng.permutation(img.r)
    Qi, Pi = [], []
    for i in range(img.r):
        g = rng.normal(size=2)
        level = 0.2 + 0.6 * (slots[i] + rng.uniform(0.25, 0.75)) / img.r
        Q = level + variation * np.sin(2 * np.pi * (pts @ g) / 3.0 + rng.uniform(0, 2 * np.pi))
        inside = lab == i
        j = np.argmax(np.where(cand_lab == i, cand_clear, -np.inf))
        ctr = cand[j] + rng.uniform(-1.0, 1.0, size=2) / _PLACEMENT_LATTICE
        radius = max(float(clearance(ctr[None])[0]) - margin, 1e-3)
        rho = np.linalg.norm(pts - ctr, axis=1) / radius
        bump = np.where(rho < 1, np.cos(0.5 * np.pi * np.minimum(rho, 1)) ** power, 0.0)
        P = amp_grid * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * bump * inside
        Qi.append(Q.reshape(n, n))
        Pi.append(P.reshape(n, n))
    P0 = amp_curve * rng.normal(size=(K, 2))
    return HamiltonianState(curve.midpoints, np.array(Qi), P0, np.array(Pi), curve.lengths,
                            kernel_v or KernelSpec(0.15), kernel_s or KernelSpec(0.25, 1))
