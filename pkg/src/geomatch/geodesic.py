"""Geodesic shooting from an initial momentum triple ``(p_a, p_b, p_c)``.

Spatial particles are the grid cell centres (carrying ``p_a``), the jump
curve quadrature nodes (carrying ``p_b``) and passive polygon vertices that
track the deformation of the pieces.  Their covectors are transported by the
inverse transpose of the co-integrated differential.  Contrast particles live
on the intensity axis: one per grid node and piece, started at the intensity
that the backward map assigns to the node at the final time.

The numerical core (``xp_*``) takes an array namespace so the matcher can
differentiate exactly the scheme used here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import JacobianCollapseError, NonFiniteError, SingularDifferentialError
from .flows import JACOBIAN_FLOOR, ContrastFlowState, FieldPath, FlowState, integrate_contrast_flow
from .geometry import (JumpCurve, LipschitzDomain, PiecewiseImage, cell_boxes, grid_points,
                       xp_bilinear, xp_box_coverage)
from .kernels import KernelSpec, ParticleField, rkhs_norm_sq, xp_field, xp_gram_form

DET_FLOOR = 1e-10


@dataclass
class MomentumTriple:
    p_a: np.ndarray  # (n*n, 2) density on grid nodes
    p_b: np.ndarray  # (K, 2) density on jump-curve nodes
    p_c: np.ndarray  # (n*n,) contrast density on grid nodes

    def __post_init__(self):
        self.p_a = np.asarray(self.p_a, dtype=float).reshape(-1, 2)
        self.p_b = np.asarray(self.p_b, dtype=float).reshape(-1, 2)
        self.p_c = np.asarray(self.p_c, dtype=float).reshape(-1)
        for arr in (self.p_a, self.p_b, self.p_c):
            if not np.all(np.isfinite(arr)):
                raise ValueError("momenta must be finite")

    @classmethod
    def zeros(cls, n: int, K: int) -> "MomentumTriple":
        return cls(np.zeros((n * n, 2)), np.zeros((K, 2)), np.zeros(n * n))

    @classmethod
    def zeros_like_image(cls, img: PiecewiseImage, subdivisions: int = 1) -> "MomentumTriple":
        return cls.zeros(img.n, len(img.curve(subdivisions)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.p_a.ravel(), self.p_b.ravel(), self.p_c])

    def unflat(self, x) -> "MomentumTriple":
        x = np.asarray(x, dtype=float)
        na, nb = self.p_a.size, self.p_b.size
        return MomentumTriple(x[:na], x[na:na + nb], x[na + nb:])

    def scaled(self, c: float) -> "MomentumTriple":
        return MomentumTriple(c * self.p_a, c * self.p_b, c * self.p_c)

    def __add__(self, other: "MomentumTriple") -> "MomentumTriple":
        return MomentumTriple(self.p_a + other.p_a, self.p_b + other.p_b, self.p_c + other.p_c)

    def is_zero(self) -> bool:
        return not (np.any(self.p_a) or np.any(self.p_b) or np.any(self.p_c))


# -- static description of a shooting problem -------------------------------

@dataclass
class ShootingContext:
    image: PiecewiseImage
    kernel_v: KernelSpec
    kernel_s: KernelSpec
    subdivisions: int = 1
    densify: float | None = None

    def __post_init__(self):
        img = self.image
        n = img.n
        if self.kernel_s.dimension != 1:
            self.kernel_s = KernelSpec(self.kernel_s.sigma, 1, self.kernel_s.scale)
        self.grid = grid_points(n)
        self.grid_weight = 1.0 / (n * n)
        self.curve = img.curve(self.subdivisions)
        self.curve_nodes = self.curve.midpoints
        self.curve_weights = self.curve.lengths
        dens = self.densify if self.densify is not None else 1.0 / n
        self.vertices, self.piece_index_edges = img.vertex_table(dens)
        self.piece_grids = np.stack([np.asarray(g, float) for g in img.intensities])
        self.boxes = cell_boxes(n, 1)

    @property
    def n(self) -> int:
        return self.image.n

    @property
    def r(self) -> int:
        return self.image.r

    @property
    def K(self) -> int:
        return len(self.curve)

    @property
    def n_active(self) -> int:
        return self.n * self.n + self.K

    def slices(self):
        g = self.n * self.n
        k = g + self.K
        v = k + len(self.vertices)
        j = v + self.K
        return slice(0, g), slice(g, k), slice(k, v), slice(v, j), slice(j, j + self.K)

    def particles(self) -> np.ndarray:
        c = self.curve
        return np.vstack([self.grid, self.curve_nodes, self.vertices, c.a, c.b])

    def active_weights(self) -> np.ndarray:
        return np.concatenate([np.full(self.n * self.n, self.grid_weight), self.curve_weights])


# -- array-namespace core ------------------------------------------------------

def xp_inv_t_apply(xp, D, p):
    """``D^{-T} p`` for stacks of 2x2 matrices; also returns the determinants."""
    det = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    x = (D[:, 1, 1] * p[:, 0] - D[:, 1, 0] * p[:, 1]) / det
    y = (-D[:, 0, 1] * p[:, 0] + D[:, 0, 0] * p[:, 1]) / det
    return xp.stack([x, y], axis=1), det


def _hermite_mid(x0, x1, d0, d1, dt):
    return 0.5 * (x0 + x1) + dt * (d0 - d1) / 8.0


def _is_jax(xp) -> bool:
    return xp.__name__.startswith("jax")


def _loop(xp, step, carry, xs, wrap=None):
    """``lax.scan`` under JAX (with optional rematerialisation), a plain loop otherwise.

    ``step(carry, x) -> (carry, out)``; returns the final carry and stacked outputs.
    """
    if _is_jax(xp):
        import jax
        body = wrap(step) if wrap is not None else step
        return jax.lax.scan(body, carry, xp.asarray(xs))
    outs = []
    for x in xs:
        carry, o = step(carry, x)
        outs.append(o)
    stacked = tuple(np.stack([o[i] for o in outs]) for i in range(len(outs[0])))
    return carry, stacked


def _interleave(xp, ends, mids):
    """Samples on the half-step grid from endpoint ``(N+1, ...)`` and midpoint ``(N, ...)`` stacks."""
    n = mids.shape[0]
    body = xp.stack([ends[:-1], mids], axis=1).reshape((2 * n,) + ends.shape[1:])
    return xp.concatenate([body, ends[-1:]], axis=0)


def xp_spatial_flow(xp, q0, p_act, w_act, sigma, scale, steps, T, scheme="rk4", wrap=None):
    """Co-integrate positions and differentials of every particle.

    The first ``len(p_act)`` particles carry the momenta.  Returns positions
    ``(N+1, P, 2)``, differentials ``(N+1, P, 2, 2)`` and the node samples
    ``(2N+1, n_act, 2)`` positions and covectors of the velocity path on the
    half-step grid.
    """
    na = p_act.shape[0]
    P = q0.shape[0]
    dt = T / steps
    D0 = xp.broadcast_to(xp.eye(2), (P, 2, 2)) + 0.0 * q0[:, :, None]

    def covec(D):
        a, _ = xp_inv_t_apply(xp, D[:na], p_act)
        return w_act[:, None] * a

    def rhs(q, D):
        a = covec(D)
        v, dv = xp_field(xp, q, q[:na], a, sigma, scale)
        return v, xp.einsum("pij,pjk->pik", dv, D), dv, a

    def step(carry, _):
        q, D = carry
        k1q, k1D, dv0, a0 = rhs(q, D)
        if scheme == "euler":
            return (q + dt * k1q, D + dt * k1D), (q, D, k1q[:na], dv0[:na], a0)
        k2q, k2D, _, _ = rhs(q + 0.5 * dt * k1q, D + 0.5 * dt * k1D)
        k3q, k3D, _, _ = rhs(q + 0.5 * dt * k2q, D + 0.5 * dt * k2D)
        k4q, k4D, _, _ = rhs(q + dt * k3q, D + dt * k3D)
        qn = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
        Dn = D + dt / 6.0 * (k1D + 2 * k2D + 2 * k3D + k4D)
        return (qn, Dn), (q, D, k1q[:na], dv0[:na], a0)

    (qT, DT), (qs, Ds, vs, dvs, As) = _loop(xp, step, (q0, D0), np.arange(steps), wrap)
    vT, _, dvT, aT = rhs(qT, DT)
    qs = xp.concatenate([qs, qT[None]], axis=0)
    Ds = xp.concatenate([Ds, DT[None]], axis=0)
    vs = xp.concatenate([vs, vT[None, :na]], axis=0)
    dvs = xp.concatenate([dvs, dvT[None, :na]], axis=0)
    As = xp.concatenate([As, aT[None]], axis=0)
    qa = qs[:, :na]
    das = -xp.einsum("tmba,tmb->tma", dvs, As)
    qm = _hermite_mid(qa[:-1], qa[1:], vs[:-1], vs[1:], dt)
    am = _hermite_mid(As[:-1], As[1:], das[:-1], das[1:], dt)
    return qs, Ds, _interleave(xp, qa, qm), _interleave(xp, As, am)


def xp_reverse_points(xp, node_q, node_a, y, sigma, scale, steps, T, scheme="rk4", wrap=None):
    """Positions ``phi_{T,0}(y)`` by integrating ``-v`` backwards through the sampled path."""
    dt = T / steps

    def vel(x, j):
        v, _ = xp_field(xp, x, node_q[j], node_a[j], sigma, scale, jacobian=False)
        return v

    def back(x, k):
        # from t_{k+1} to t_k
        hi, mid, lo = 2 * (k + 1), 2 * k + 1, 2 * k
        k1 = -vel(x, hi)
        if scheme == "euler":
            return x + dt * k1, ()
        k2 = -vel(x + 0.5 * dt * k1, mid)
        k3 = -vel(x + 0.5 * dt * k2, mid)
        k4 = -vel(x + dt * k3, lo)
        return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), ()

    if _is_jax(xp):
        x, _ = _loop(xp, back, y, np.arange(steps)[::-1].copy(), wrap)
        return x
    x = y
    for k in reversed(range(steps)):
        x, _ = back(x, k)
    return x


def xp_contrast_flow(xp, z0, c, sigma, scale, steps, T, scheme="rk4", wrap=None):
    """Contrast particles ``z`` with derivatives ``dz = d eta_{0,t}``; covectors ``c / dz``.

    Returns values ``(N+1, P)``, derivatives ``(N+1, P)`` and the half-step
    samples of nodes and covectors of the contrast path.
    """
    dt = T / steps

    def field1(z, dz):
        b = c / dz
        e = z[:, None] - z[None, :]
        k = xp.exp(-(e * e) / (2.0 * sigma * sigma))
        s = (k @ b) / scale
        ds = -(z * s - k @ (b * z) / scale) / (sigma * sigma)
        return s, ds, b

    def step(carry, _):
        z, dz = carry
        s1, g1, b0 = field1(z, dz)
        k1z, k1d = s1, g1 * dz
        if scheme == "euler":
            return (z + dt * k1z, dz + dt * k1d), (z, dz, s1, g1, b0)
        s2, g2, _ = field1(z + 0.5 * dt * k1z, dz + 0.5 * dt * k1d)
        k2z, k2d = s2, g2 * (dz + 0.5 * dt * k1d)
        s3, g3, _ = field1(z + 0.5 * dt * k2z, dz + 0.5 * dt * k2d)
        k3z, k3d = s3, g3 * (dz + 0.5 * dt * k2d)
        s4, g4, _ = field1(z + dt * k3z, dz + dt * k3d)
        k4z, k4d = s4, g4 * (dz + dt * k3d)
        zn = z + dt / 6.0 * (k1z + 2 * k2z + 2 * k3z + k4z)
        dn = dz + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        return (zn, dn), (z, dz, s1, g1, b0)

    (zT, dT), (zs, dzs, ss, gs, bs) = _loop(xp, step, (z0, xp.ones_like(z0)), np.arange(steps), wrap)
    sT, gT, bT = field1(zT, dT)
    zs = xp.concatenate([zs, zT[None]], axis=0)
    dzs = xp.concatenate([dzs, dT[None]], axis=0)
    ss = xp.concatenate([ss, sT[None]], axis=0)
    gs = xp.concatenate([gs, gT[None]], axis=0)
    bs = xp.concatenate([bs, bT[None]], axis=0)
    zm = _hermite_mid(zs[:-1], zs[1:], ss[:-1], ss[1:], dt)
    bm = _hermite_mid(bs[:-1], bs[1:], -gs[:-1] * bs[:-1], -gs[1:] * bs[1:], dt)
    return zs, dzs, _interleave(xp, zs, zm), _interleave(xp, bs, bm)


def xp_piece_coverage(xp, verts, index_edges, boxes):
    """Fraction of each box covered by each transported piece, shape ``(r, C)``."""
    x0, x1, y0, y1 = boxes
    area = (x1 - x0) * (y1 - y0)
    out = []
    for ia, ib in index_edges:
        out.append(xp_box_coverage(xp, verts[ia], verts[ib], x0, x1, y0, y1) / area)
    return xp.stack(out)


def xp_normalized_coverage(xp, cov):
    """Per-cell piece fractions rescaled to sum to one where anything covers the cell."""
    tot = xp.sum(cov, axis=0)
    ok = tot > 1e-12
    safe = xp.where(ok, tot, 1.0)
    return xp.where(ok[None, :], cov / safe[None, :], 0.0)


def xp_shoot_core(xp, arrays: dict, p_a, p_b, p_c, steps, T, scheme="rk4", wrap=None):
    """Full discrete shooting map; ``arrays`` holds the static context as ``xp`` arrays."""
    sv, lam = arrays["sigma_v"], arrays["lambda"]
    ss, beta = arrays["sigma_s"], arrays["beta"]
    q0 = arrays["particles"]
    w_act = arrays["w_act"]
    p_act = xp.concatenate([p_a, p_b], axis=0)
    na = p_act.shape[0]
    qs, Ds, nq, nA = xp_spatial_flow(xp, q0, p_act, w_act, sv, lam, steps, T, scheme, wrap)
    grid = arrays["grid"]
    y_back = xp_reverse_points(xp, nq, nA, grid, sv, lam, steps, T, scheme, wrap)
    vs = arrays["vertex_slice"]
    verts_T = qs[-1][vs]
    cov_raw = xp_piece_coverage(xp, verts_T, arrays["index_edges"], arrays["boxes"])
    cov = xp_normalized_coverage(xp, cov_raw)
    grids = arrays["piece_grids"]
    r = grids.shape[0]
    z0 = xp.concatenate([xp_bilinear(xp, grids[i], y_back) for i in range(r)])
    c = arrays["grid_weight"] * xp.concatenate([cov[i] * p_c for i in range(r)])
    zs, dzs, nz, nb = xp_contrast_flow(xp, z0, c, ss, beta, steps, T, scheme, wrap)
    kin_v = xp_gram_form(xp, q0[:na], w_act[:, None] * p_act, sv, lam)
    d2 = (z0[:, None] - z0[None, :]) ** 2
    kin_s = xp.sum(c * (xp.exp(-d2 / (2 * ss * ss)) @ c)) / beta
    return {"qs": qs, "Ds": Ds, "node_q": nq, "node_a": nA, "y_back": y_back,
            "coverage": cov, "z0": z0, "weights_c": c, "zs": zs, "dzs": dzs,
            "node_z": nz, "node_b": nb, "kinetic": 0.5 * (kin_v + kin_s),
            "I1": zs[-1].reshape(r, -1)}


def context_arrays(ctx: ShootingContext, xp=np) -> dict:
    sl = ctx.slices()
    return {
        "sigma_v": ctx.kernel_v.sigma, "lambda": ctx.kernel_v.scale,
        "sigma_s": ctx.kernel_s.sigma, "beta": ctx.kernel_s.scale,
        "particles": xp.asarray(ctx.particles()), "w_act": xp.asarray(ctx.active_weights()),
        "grid": xp.asarray(ctx.grid), "grid_weight": ctx.grid_weight,
        "vertex_slice": sl[2], "index_edges": ctx.piece_index_edges,
        "boxes": tuple(xp.asarray(b) for b in ctx.boxes),
        "piece_grids": xp.asarray(ctx.piece_grids),
    }


# -- numpy-facing API -----------------------------------------------------------

@dataclass
class ShootingState:
    grid_flow: FlowState
    curve_flow: FlowState
    contrast_flow: ContrastFlowState
    speeds: tuple
    time: float
    current_image: PiecewiseImage | None = None


@dataclass
class ShootingTrajectory:
    context: ShootingContext
    momenta: MomentumTriple
    steps: int
    T: float
    scheme: str
    raw: dict
    states: list = field(default_factory=list)
    v_path: FieldPath | None = None
    s_path: FieldPath | None = None

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def final(self) -> ShootingState:
        return self.states[-1]

    @property
    def final_image(self) -> PiecewiseImage:
        return self.states[-1].current_image

    def vertex_positions(self, k: int = -1) -> np.ndarray:
        return self.raw["qs"][k][self.context.slices()[2]]

    def image_at(self, k: int) -> PiecewiseImage:
        """``I_t`` at step ``k`` from the reverse flow and the contrast path up to ``t_k``."""
        if k == self.steps or k == -1:
            return self.final_image
        ctx = self.context
        if k == 0:
            return ctx.image
        t = self.times[k]
        nq = self.raw["node_q"][: 2 * k + 1]
        nA = self.raw["node_a"][: 2 * k + 1]
        y = xp_reverse_points(np, nq, nA, ctx.grid, ctx.kernel_v.sigma, ctx.kernel_v.scale,
                              k, t, self.scheme)
        vals = [xp_bilinear(np, g, y) for g in ctx.piece_grids]
        sub = FieldPath(self.s_path.times[: 2 * k + 1], self.s_path.fields[: 2 * k + 1])
        out = []
        for v0 in vals:
            tr = integrate_contrast_flow(sub.scalar_oracle(), v0, k, self.scheme, 0.0, t)
            out.append(tr.values[-1])
        return _assemble_image(ctx, self.raw["qs"][k], out)


def _rings_from_edges(ia, ib):
    rings, cur = [], [ia[0]]
    for k in range(len(ia)):
        if k + 1 < len(ia) and ib[k] == ia[k + 1]:
            cur.append(ia[k + 1])
        else:
            rings.append(cur)
            if k + 1 < len(ia):
                cur = [ia[k + 1]]
    return rings


def _assemble_image(ctx: ShootingContext, q, values) -> PiecewiseImage:
    n = ctx.n
    sl = ctx.slices()
    verts = q[sl[2]]
    pieces = []
    for (ia, ib), orig in zip(ctx.piece_index_edges, ctx.image.pieces):
        rings = [verts[r] for r in _rings_from_edges(ia, ib)]
        try:
            pieces.append(LipschitzDomain(rings[0], rings[1:]))
        except ValueError:
            pieces.append(orig)
    grids = [np.asarray(v).reshape(n, n) for v in values]
    img = PiecewiseImage(pieces, grids, n)
    c = ctx.curve
    if len(c):
        jc = JumpCurve(q[sl[3]], q[sl[4]], c.plus_values, c.minus_values, c.plus_piece, c.minus_piece)
        img.jump = jc
        img.jump = img.curve(1)
    return img


def _check_flow(raw, nact):
    if not all(np.all(np.isfinite(raw[k])) for k in ("qs", "Ds", "zs", "dzs")):
        raise NonFiniteError("shooting produced non-finite values")
    det = np.linalg.det(raw["Ds"][:, :nact])
    if np.any(np.abs(det) < DET_FLOOR):
        raise SingularDifferentialError("differential became singular")
    if np.any(det <= JACOBIAN_FLOOR):
        raise JacobianCollapseError(f"jacobian fell to {det.min():.3e}")


def _paths(ctx: ShootingContext, raw, steps, T):
    times = np.linspace(0.0, T, 2 * steps + 1)
    vf = [ParticleField(q, a, ctx.kernel_v) for q, a in zip(raw["node_q"], raw["node_a"])]
    sf = [ParticleField(z[:, None], b[:, None], ctx.kernel_s) for z, b in zip(raw["node_z"], raw["node_b"])]
    return FieldPath(times, vf), FieldPath(times, sf)


def shoot(I0: PiecewiseImage, mom: MomentumTriple, steps: int = 20, scheme: str = "rk4",
          kernel_v: KernelSpec | None = None, kernel_s: KernelSpec | None = None,
          T: float = 1.0, context: ShootingContext | None = None) -> ShootingTrajectory:
    """Shoot the coupled spatial/contrast system and assemble ``I_T``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    ctx = context or ShootingContext(I0, kernel_v or KernelSpec(0.15), kernel_s or KernelSpec(0.25, 1))
    if mom.p_a.shape[0] != ctx.n * ctx.n or mom.p_b.shape[0] != ctx.K or mom.p_c.shape[0] != ctx.n * ctx.n:
        raise ValueError("momentum shapes do not match the image")
    raw = xp_shoot_core(np, context_arrays(ctx), mom.p_a, mom.p_b, mom.p_c, steps, T, scheme)
    _check_flow(raw, ctx.n_active)
    traj = ShootingTrajectory(ctx, mom, steps, T, scheme, raw)
    traj.v_path, traj.s_path = _paths(ctx, raw, steps, T)
    g, c = ctx.slices()[:2]
    for k in range(steps + 1):
        q, D = raw["qs"][k], raw["Ds"][k]
        vf = traj.v_path.fields[2 * k]
        sf = traj.s_path.fields[2 * k]
        st = ShootingState(
            FlowState(q[g], D[g], np.linalg.det(D[g]), traj.times[k]),
            FlowState(q[c], D[c], np.linalg.det(D[c]), traj.times[k]),
            ContrastFlowState(raw["zs"][k], raw["dzs"][k], traj.times[k]),
            (rkhs_norm_sq(vf), rkhs_norm_sq(sf)), float(traj.times[k]))
        traj.states.append(st)
    traj.states[-1].current_image = _assemble_image(ctx, raw["qs"][-1], list(raw["I1"]))
    traj.states[0].current_image = I0
    return traj


def velocities_from_momenta(traj: ShootingTrajectory, mom: MomentumTriple, k: int):
    """Kernel fields ``(v, s)`` at step ``k`` built from the stored flow state."""
    ctx = traj.context
    st = traj.states[k]
    D = np.concatenate([st.grid_flow.differentials, st.curve_flow.differentials])
    det = np.linalg.det(D)
    if np.any(np.abs(det) < DET_FLOOR):
        raise SingularDifferentialError("differential is not invertible")
    p = np.vstack([mom.p_a, mom.p_b])
    a, _ = xp_inv_t_apply(np, D, p)
    nodes = np.vstack([st.grid_flow.positions, st.curve_flow.positions])
    v = ParticleField(nodes, ctx.active_weights()[:, None] * a, ctx.kernel_v)
    c = _contrast_weights(traj, mom)
    s = ParticleField(st.contrast_flow.values[:, None], (c / st.contrast_flow.derivatives)[:, None],
                      ctx.kernel_s)
    return v, s


def _contrast_weights(traj: ShootingTrajectory, mom: MomentumTriple) -> np.ndarray:
    ctx = traj.context
    cov = traj.raw["coverage"]
    return ctx.grid_weight * np.concatenate([cov[i] * mom.p_c for i in range(ctx.r)])


def transport_momentum(mom: MomentumTriple, traj: ShootingTrajectory):
    """Closed-form transported momenta per step: ``(t, P_a, P_b, P_c)``.

    ``P_a`` and ``P_b`` are the spatial densities ``[d phi_{0,t}]^{-T} p``;
    ``P_c`` is the contrast density ``p_c d[eta_{t,0}]`` per contrast particle.
    """
    out = []
    c_over_w = np.concatenate([traj.raw["coverage"][i] * mom.p_c for i in range(traj.context.r)])
    for st in traj.states:
        det_g = np.abs(np.linalg.det(st.grid_flow.differentials))
        det_c = np.abs(np.linalg.det(st.curve_flow.differentials)) if len(mom.p_b) else np.ones(1)
        if np.any(det_g < DET_FLOOR) or np.any(det_c < DET_FLOOR):
            raise SingularDifferentialError("differential is not invertible")
        pa, _ = xp_inv_t_apply(np, st.grid_flow.differentials, mom.p_a)
        pb, _ = xp_inv_t_apply(np, st.curve_flow.differentials, mom.p_b) if len(mom.p_b) else (mom.p_b, None)
        pc = c_over_w / st.contrast_flow.derivatives
        out.append((st.time, pa, pb, pc))
    return out


def speed_profile(traj: ShootingTrajectory) -> np.ndarray:
    """Rows ``(t, ||v_t||^2, ||s_t||^2)`` in the weighted Gram convention."""
    return np.array([(st.time, st.speeds[0], st.speeds[1]) for st in traj.states])


def relative_drift(traj: ShootingTrajectory) -> tuple[float, float]:
    sp = speed_profile(traj)
    out = []
    for col in (1, 2):
        ref = sp[0, col]
        out.append(float(np.max(np.abs(sp[:, col] - ref)) / ref) if ref > 0 else 0.0)
    return tuple(out)


# -- Picard map -----------------------------------------------------------------

def picard_step(candidate: tuple[FieldPath, FieldPath], mom: MomentumTriple, I0: PiecewiseImage,
                T: float, steps: int, context: ShootingContext | None = None,
                kernel_v: KernelSpec | None = None, kernel_s: KernelSpec | None = None):
    """One application of the fixed-point map on a velocity path pair.

    Flows are integrated through the candidate path; the returned path is
    rebuilt from the fixed momenta along those flows, on the same half-step
    sample times.
    """
    if T > 1.0:
        raise ValueError("T must be <= 1")
    ctx = context or ShootingContext(I0, kernel_v or KernelSpec(0.15), kernel_s or KernelSpec(0.25, 1))
    v_path, s_path = candidate
    dt = T / steps
    times = np.linspace(0.0, T, 2 * steps + 1)
    if len(v_path.times) != len(times) or not np.allclose(v_path.times, times):
        raise ValueError("candidate must be sampled on the half-step grid")
    q0 = ctx.particles()
    na = ctx.n_active
    p_act = np.vstack([mom.p_a, mom.p_b])
    w = ctx.active_weights()

    # forward flow through the candidate, Hermite samples at midpoints
    q = q0.copy()
    D = np.broadcast_to(np.eye(2), (len(q0), 2, 2)).copy()
    qs, Ds, vq, dvq = [q], [D], [], []
    for k in range(steps + 1):
        v, dv = v_path(q, times[2 * k])
        vq.append(v)
        dvq.append(dv)
        if k == steps:
            break
        t = times[2 * k]
        k1q, k1D = v, dv @ D
        v2, a2 = v_path(q + 0.5 * dt * k1q, t + 0.5 * dt)
        k2q, k2D = v2, a2 @ (D + 0.5 * dt * k1D)
        v3, a3 = v_path(q + 0.5 * dt * k2q, t + 0.5 * dt)
        k3q, k3D = v3, a3 @ (D + 0.5 * dt * k2D)
        v4, a4 = v_path(q + dt * k3q, t + dt)
        k4q, k4D = v4, a4 @ (D + dt * k3D)
        q = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        D = D + dt / 6 * (k1D + 2 * k2D + 2 * k3D + k4D)
        qs.append(q)
        Ds.append(D)

    def covec(D):
        a, det = xp_inv_t_apply(np, D[:na], p_act)
        if np.any(np.abs(det) < DET_FLOOR):
            raise SingularDifferentialError("differential is not invertible")
        return w[:, None] * a

    fields = []
    for k in range(steps + 1):
        a_k = covec(Ds[k])
        if k > 0:
            a_p = covec(Ds[k - 1])
            da0 = -np.einsum("mba,mb->ma", dvq[k - 1][:na], a_p)
            da1 = -np.einsum("mba,mb->ma", dvq[k][:na], a_k)
            qm = _hermite_mid(qs[k - 1][:na], qs[k][:na], vq[k - 1][:na], vq[k][:na], dt)
            am = _hermite_mid(a_p, a_k, da0, da1, dt)
            fields.append(ParticleField(qm, am, ctx.kernel_v))
        fields.append(ParticleField(qs[k][:na], a_k, ctx.kernel_v))
    new_v = FieldPath(times, fields)

    # contrast: backward map of the candidate, coverage of the transported pieces
    y = ctx.grid.copy()
    for k in reversed(range(steps)):
        hi, lo = times[2 * k + 2], times[2 * k]
        k1 = -v_path(y, hi)[0]
        k2 = -v_path(y + 0.5 * dt * k1, hi - 0.5 * dt)[0]
        k3 = -v_path(y + 0.5 * dt * k2, hi - 0.5 * dt)[0]
        k4 = -v_path(y + dt * k3, lo)[0]
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    verts = qs[-1][ctx.slices()[2]]
    cov = xp_normalized_coverage(np, xp_piece_coverage(np, verts, ctx.piece_index_edges, ctx.boxes))
    z0 = np.concatenate([xp_bilinear(np, g, y) for g in ctx.piece_grids])
    c = ctx.grid_weight * np.concatenate([cov[i] * mom.p_c for i in range(ctx.r)])
    oracle = s_path.scalar_oracle()
    z, dz = z0.copy(), np.ones_like(z0)
    zs, dzs, sv, gv = [z], [dz], [], []
    for k in range(steps + 1):
        s, g = oracle(z, times[2 * k])
        sv.append(s)
        gv.append(g)
        if k == steps:
            break
        t = times[2 * k]
        k1z, k1d = s, g * dz
        s2, g2 = oracle(z + 0.5 * dt * k1z, t + 0.5 * dt)
        k2z, k2d = s2, g2 * (dz + 0.5 * dt * k1d)
        s3, g3 = oracle(z + 0.5 * dt * k2z, t + 0.5 * dt)
        k3z, k3d = s3, g3 * (dz + 0.5 * dt * k2d)
        s4, g4 = oracle(z + dt * k3z, t + dt)
        k4z, k4d = s4, g4 * (dz + dt * k3d)
        z = z + dt / 6 * (k1z + 2 * k2z + 2 * k3z + k4z)
        dz = dz + dt / 6 * (k1d + 2 * k2d + 2 * k3d + k4d)
        zs.append(z)
        dzs.append(dz)
    sf = []
    for k in range(steps + 1):
        b_k = c / dzs[k]
        if k > 0:
            b_p = c / dzs[k - 1]
            zm = _hermite_mid(zs[k - 1], zs[k], sv[k - 1], sv[k], dt)
            bm = _hermite_mid(b_p, b_k, -gv[k - 1] * b_p, -gv[k] * b_k, dt)
            sf.append(ParticleField(zm[:, None], bm[:, None], ctx.kernel_s))
        sf.append(ParticleField(zs[k][:, None], b_k[:, None], ctx.kernel_s))
    return new_v, FieldPath(times, sf)


def zero_path(ctx: ShootingContext, T: float, steps: int) -> tuple[FieldPath, FieldPath]:
    times = np.linspace(0.0, T, 2 * steps + 1)
    return (FieldPath(times, [ParticleField.empty(ctx.kernel_v)] * len(times)),
            FieldPath(times, [ParticleField.empty(ctx.kernel_s)] * len(times)))


def path_distance(a: tuple[FieldPath, FieldPath], b: tuple[FieldPath, FieldPath]) -> float:
    """``L^2`` distance in time of the summed squared field distances."""
    from .flows import time_integral
    dv = a[0] - b[0]
    ds = a[1] - b[1]
    vals = np.array([rkhs_norm_sq(f) + rkhs_norm_sq(g) for f, g in zip(dv.fields, ds.fields)])
    return float(np.sqrt(max(time_integral(dv.times, vals), 0.0)))


def path_size(a: tuple[FieldPath, FieldPath]) -> float:
    from .flows import time_integral
    vals = np.array([rkhs_norm_sq(f) + rkhs_norm_sq(g) for f, g in zip(a[0].fields, a[1].fields)])
    return float(np.sqrt(max(time_integral(a[0].times, vals), 0.0)))
