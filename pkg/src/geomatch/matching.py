"""Matching energy, its gradient and Armijo gradient descent over initial momenta.

The energy gradient is reverse-mode differentiation (JAX) of the same
discrete shooting scheme that :func:`geodesic.shoot` runs with NumPy, which is
the discrete adjoint of the RK4 recursion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import shapely

import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from .errors import LineSearchStallError, NonFiniteError, SingularDifferentialError  # noqa: E402
from .geodesic import (DET_FLOOR, MomentumTriple, ShootingContext, ShootingTrajectory,  # noqa: E402
                       context_arrays, shoot, xp_inv_t_apply, xp_shoot_core)
from .geometry import PiecewiseImage, cell_boxes, grid_points  # noqa: E402
from .kernels import KernelSpec, ParticleField  # noqa: E402

log = logging.getLogger(__name__)


@dataclass
class MatchConfig:
    lam: float = 1.0
    beta: float = 1.0
    sigma_attach: float = 1.0
    steps: int = 10
    max_iters: int = 100
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    grad_tol: float = 1e-10
    channels: int = 1
    sigma_v: float = 0.15
    sigma_s: float = 0.25
    T: float = 1.0
    scheme: str = "rk4"
    channel_sigmas: tuple | None = None
    max_shrinks: int = 40

    def __post_init__(self):
        for name in ("lam", "beta", "sigma_attach", "sigma_v", "sigma_s", "T", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 1 or self.max_iters < 0:
            raise ValueError("steps must be >= 1 and max_iters >= 0")
        if not 0 < self.armijo_c <= 0.5:
            raise ValueError("armijo_c must lie in (0, 0.5]")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def kernel_v(self) -> KernelSpec:
        return KernelSpec(self.sigma_v, 2, self.lam)

    @property
    def kernel_s(self) -> KernelSpec:
        return KernelSpec(self.sigma_s, 1, self.beta)


@dataclass
class MatchResult:
    momenta: MomentumTriple
    energy_history: list
    attachment_history: list
    final_image: PiecewiseImage
    trajectory: ShootingTrajectory
    iterations: int = 0
    kinetic_history: list = field(default_factory=list)

    def momentum_report(self) -> dict:
        """Norms of the momentum parts and the share of ``||v_0||^2`` carried by curve nodes."""
        ctx = self.trajectory.context
        m = self.momenta
        w = ctx.grid_weight
        grid = ParticleField(ctx.grid, w * m.p_a, ctx.kernel_v)
        curve = ParticleField(ctx.curve_nodes, ctx.curve_weights[:, None] * m.p_b, ctx.kernel_v)
        from .kernels import inner, rkhs_norm_sq
        total = rkhs_norm_sq(grid + curve)
        curve_share = (rkhs_norm_sq(curve) + inner(grid, curve)) / total if total > 0 else 0.0
        return {
            "p_a_l2": float(np.sqrt(w * np.sum(m.p_a ** 2))),
            "p_b_l2": float(np.sqrt(np.sum(ctx.curve_weights[:, None] * m.p_b ** 2))),
            "p_c_l2": float(np.sqrt(w * np.sum(m.p_c ** 2))),
            "curve_share_v0": float(curve_share),
        }


# -- attachment ------------------------------------------------------------------

def _jump_cell_mask(target: PiecewiseImage, n: int) -> np.ndarray:
    """1 for cells kept in the attachment, 0 for cells touched by the target jump curve."""
    mask = np.ones(n * n)
    if len(target.jump) == 0:
        return mask
    x0, x1, y0, y1 = cell_boxes(n, 1)
    boxes = shapely.box(x0, y0, x1, y1)
    segs = shapely.linestrings(np.stack([target.jump.a, target.jump.b], axis=1))
    hits = shapely.STRtree(boxes).query(segs, predicate="intersects")
    mask[np.unique(hits[1])] = 0.0
    return mask


@dataclass
class AttachmentData:
    targets: np.ndarray   # (channels, n*n) target values at cell centres
    masks: np.ndarray     # (channels, n*n)
    weights: np.ndarray   # (channels,) 1/sigma^2
    multi: bool

    @classmethod
    def build(cls, targets, n: int, cfg: MatchConfig, r: int) -> "AttachmentData":
        tl = list(targets) if isinstance(targets, (list, tuple)) else [targets]
        pts = grid_points(n)
        vals, masks = [], []
        for t in tl:
            if t.n != n:
                raise ValueError("images must share the grid")
            vals.append(t.sample(pts))
            masks.append(_jump_cell_mask(t, n))
        multi = cfg.channels > 1
        if multi:
            if len(tl) != r or cfg.channels != r:
                raise ValueError("multi-channel mode needs one target per piece")
            sig = cfg.channel_sigmas or (cfg.sigma_attach,) * r
            w = 1.0 / np.asarray(sig, float) ** 2
        else:
            if len(tl) != 1:
                raise ValueError("single-channel mode needs one target")
            w = np.array([1.0 / cfg.sigma_attach ** 2])
        return cls(np.array(vals), np.array(masks), w, multi)


def xp_attachment(xp, I1, cov, data: AttachmentData, cell_area):
    """Per-channel weighted squared differences; ``cov`` are normalised piece fractions."""
    if not data.multi:
        T = data.targets[0]
        r2 = (I1 - T[None, :]) ** 2
        return xp.sum(data.masks[0] * xp.sum(cov * r2, axis=0)) * cell_area, \
            xp.sum(data.masks[0] * xp.sum(cov * r2, axis=0)) * cell_area * data.weights[0]
    raw = 0.0
    tot = 0.0
    for i in range(I1.shape[0]):
        T = data.targets[i]
        term = cov[i] * (I1[i] - T) ** 2 + (1.0 - cov[i]) * T ** 2
        a = xp.sum(data.masks[i] * term) * cell_area
        raw = raw + a
        tot = tot + data.weights[i] * a
    return raw, tot


# -- energy and gradient ----------------------------------------------------------

class EnergyModel:
    """Cached NumPy and JAX evaluators of the matching energy for one scene."""

    def __init__(self, I0: PiecewiseImage, Itarg, cfg: MatchConfig, context: ShootingContext | None = None):
        self.cfg = cfg
        self.I0 = I0
        self.ctx = context or ShootingContext(I0, cfg.kernel_v, cfg.kernel_s)
        self.data = AttachmentData.build(Itarg, I0.n, cfg, I0.r)
        self.np_arrays = context_arrays(self.ctx, np)
        self.jx_arrays = context_arrays(self.ctx, jnp)
        self.cell_area = self.ctx.grid_weight
        self._jit_value = None
        self._jit_grad = None

    def _value(self, xp, arrays, p_a, p_b, p_c, wrap=None):
        cfg = self.cfg
        out = xp_shoot_core(xp, arrays, p_a, p_b, p_c, cfg.steps, cfg.T, cfg.scheme, wrap)
        raw, weighted = xp_attachment(xp, out["I1"], out["coverage"], self.data, self.cell_area)
        kin = cfg.T * out["kinetic"]
        return kin + weighted, kin, raw, out

    def numpy_energy(self, mom: MomentumTriple):
        tot, kin, raw, _ = self._value(np, self.np_arrays, mom.p_a, mom.p_b, mom.p_c)
        return float(tot), float(kin), float(raw)

    def _build(self):
        arrays = self.jx_arrays

        def f(p_a, p_b, p_c):
            tot, kin, raw, _ = self._value(jnp, arrays, p_a, p_b, p_c, wrap=jax.checkpoint)
            return tot, (kin, raw)

        self._jit_value = jax.jit(f)
        self._jit_grad = jax.jit(jax.value_and_grad(f, argnums=(0, 1, 2), has_aux=True))

    def energy(self, mom: MomentumTriple):
        if self._jit_value is None:
            self._build()
        tot, (kin, raw) = self._jit_value(jnp.asarray(mom.p_a), jnp.asarray(mom.p_b), jnp.asarray(mom.p_c))
        return float(tot), float(kin), float(raw)

    def value_and_grad(self, mom: MomentumTriple):
        if self._jit_grad is None:
            self._build()
        (tot, (kin, raw)), (ga, gb, gc) = self._jit_grad(
            jnp.asarray(mom.p_a), jnp.asarray(mom.p_b), jnp.asarray(mom.p_c))
        g = MomentumTriple(np.asarray(ga), np.asarray(gb), np.asarray(gc))
        return (float(tot), float(kin), float(raw)), g

    def metric_weights(self) -> MomentumTriple:
        """Quadrature weights of each momentum entry (the ``L^2(mu)`` metric)."""
        ctx = self.ctx
        n2 = ctx.n * ctx.n
        return MomentumTriple(np.full((n2, 2), ctx.grid_weight),
                              np.repeat(ctx.curve_weights[:, None], 2, axis=1),
                              np.full(n2, ctx.grid_weight))


def energy(mom: MomentumTriple, I0: PiecewiseImage, Itarg, cfg: MatchConfig, model: EnergyModel | None = None):
    """``(total, kinetic, attachment)``; attachment is reported before the ``1/sigma^2`` weights."""
    model = model or EnergyModel(I0, Itarg, cfg)
    return model.energy(mom)


def energy_gradient(mom: MomentumTriple, I0: PiecewiseImage, Itarg, cfg: MatchConfig,
                    model: EnergyModel | None = None, method: str = "adjoint") -> MomentumTriple:
    """Gradient of the total energy with respect to ``(p_a, p_b, p_c)``.

    ``method="forward"`` perturbs each coordinate (central differences of the
    NumPy energy) and is limited to 200 unknowns.
    """
    model = model or EnergyModel(I0, Itarg, cfg)
    if method == "adjoint":
        return model.value_and_grad(mom)[1]
    if method != "forward":
        raise ValueError(f"unknown method {method!r}")
    x = mom.flat()
    if x.size > 200:
        raise ValueError("forward sensitivities are limited to 200 unknowns")
    g = np.zeros_like(x)
    h = 1e-6
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (model.numpy_energy(mom.unflat(x + e))[0] - model.numpy_energy(mom.unflat(x - e))[0]) / (2 * h)
    return mom.unflat(g)


# -- descent ---------------------------------------------------------------------

def match(I0: PiecewiseImage, Itarg, cfg: MatchConfig, model: EnergyModel | None = None,
          callback=None) -> MatchResult:
    """Armijo gradient descent from zero momenta in the ``L^2(mu)`` metric."""
    model = model or EnergyModel(I0, Itarg, cfg)
    ctx = model.ctx
    mom = MomentumTriple.zeros(ctx.n, ctx.K)
    W = model.metric_weights().flat()
    (E, kin, att), g = model.value_and_grad(mom)
    hist_E, hist_A, hist_K = [E], [att], [kin]
    step = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gf = g.flat()
        d = -gf / W
        slope = float(gf @ d)
        gnorm = float(np.sqrt(-slope))
        if not np.isfinite(gnorm):
            raise NonFiniteError("gradient is not finite")
        if gnorm < cfg.grad_tol:
            it -= 1
            break
        if step is None:
            step = 1.0 / (1.0 + gnorm)
        x = mom.flat()
        accepted = False
        for _ in range(cfg.max_shrinks):
            cand = mom.unflat(x + step * d)
            try:
                Ec, kc, ac = model.energy(cand)
            except (NonFiniteError, SingularDifferentialError):
                Ec = np.inf
            if np.isfinite(Ec) and Ec <= E + cfg.armijo_c * step * slope:
                accepted = True
                break
            step *= cfg.armijo_shrink
        if not accepted:
            raise LineSearchStallError(f"no Armijo step within {cfg.max_shrinks} shrinks at iteration {it}")
        mom = cand
        (E, kin, att), g = model.value_and_grad(mom)
        hist_E.append(E)
        hist_A.append(att)
        hist_K.append(kin)
        log.info("iter %d energy %.6e attachment %.6e step %.3e", it, E, att, step)
        if callback is not None:
            callback(it, mom, E, att)
        step *= 2.0
    traj = shoot(I0, mom, cfg.steps, cfg.scheme, T=cfg.T, context=ctx)
    return MatchResult(mom, hist_E, hist_A, traj.final_image, traj, it, hist_K)


# -- attachment gradient as per-time kernel data ----------------------------------

def _piece_splines(ctx: ShootingContext):
    from scipy.interpolate import RectBivariateSpline
    ax = (np.arange(ctx.n) + 0.5) / ctx.n
    return [RectBivariateSpline(ax, ax, g) for g in ctx.piece_grids]


def _cells_of(pts, n: int) -> np.ndarray:
    ij = np.clip(np.floor(np.asarray(pts) * n).astype(int), 0, n - 1)
    return ij[:, 1] * n + ij[:, 0]


def attachment_gradient_fields(traj: ShootingTrajectory, Itarg: PiecewiseImage, eps: float = 1e-6):
    """Per-step kernel data ``(time, nodes, covectors)`` of the attachment derivative in ``v``.

    The derivative of the cell attachment ``sum_y mask cov_i |I_1,i(y) - I_targ(y)|^2``
    along a path perturbation ``dv`` equals ``int <covectors, dv_t(nodes)> dt``.
    Bulk covectors sit on the cell centres traced back to time ``t``; jump
    covectors sit on the transported curve nodes and carry the transported
    normal measure (Nanson's formula).  The contrast path is held fixed.
    """
    ctx = traj.context
    n = ctx.n
    steps = len(traj.states) - 1
    T = float(traj.times[-1])
    w_cell = ctx.grid_weight
    targ = Itarg.sample(ctx.grid)
    mask = _jump_cell_mask(Itarg, n)
    from .flows import integrate_flow_reverse
    back = integrate_flow_reverse(traj.v_path, ctx.grid, steps, "rk4", T)
    x0 = back.positions[-1]
    D10 = back.differentials[-1]
    I1 = traj.raw["zs"][-1].reshape(ctx.r, -1)
    deta = traj.raw["dzs"][-1].reshape(ctx.r, -1)
    cov = traj.raw["coverage"]
    spl = _piece_splines(ctx)
    # spline pull-back of I_0; eta is applied to first order around the shot samples
    z0 = traj.raw["z0"].reshape(ctx.r, -1)
    I1 = I1 + deta * (np.stack([sp.ev(x0[:, 1], x0[:, 0]) for sp in spl]) - z0)
    g = np.zeros((n * n, 2))
    for i, sp in enumerate(spl):
        gi = np.column_stack([sp.ev(x0[:, 1], x0[:, 0], dy=1), sp.ev(x0[:, 1], x0[:, 0], dx=1)])
        g += (mask * cov[i] * (I1[i] - targ) * deta[i])[:, None] * gi
    # d/deps I_1(y) = grad J(x) . d phi_{1,0}; transport the covector to time t
    g0 = -2.0 * w_cell * np.einsum("nji,nj->ni", D10, g)
    K = ctx.K
    if K:
        sub_nodes, sub_N = _jump_normal_measure(traj, I1, targ, mask)
    out = []
    for k, st in enumerate(traj.states):
        j = steps - k
        cb, det = xp_inv_t_apply(np, back.differentials[j], g0)
        if np.any(np.abs(det) < DET_FLOOR):
            raise SingularDifferentialError("differential is not invertible")
        nodes = [back.positions[j]]
        covs = [cb]
        if K:
            cj, _ = xp_inv_t_apply(np, sub_nodes.differentials[k], sub_N)
            nodes.append(sub_nodes.positions[k])
            covs.append(-cj)
        out.append((st.time, np.vstack(nodes), np.vstack(covs)))
    return out


def _cell_pieces(a, b, n: int):
    """Split segments at grid lines: ``(segment index, cell index, length fraction)``."""
    seg, cell, frac = [], [], []
    d = b - a
    for k in range(len(a)):
        ts = [0.0, 1.0]
        for ax in (0, 1):
            if d[k, ax] != 0.0:
                lo, hi = sorted((a[k, ax], b[k, ax]))
                lines = np.arange(np.ceil(lo * n), np.floor(hi * n) + 1) / n
                ts.extend(((lines - a[k, ax]) / d[k, ax]).tolist())
        ts = np.unique(np.clip(ts, 0.0, 1.0))
        mid = a[k] + d[k] * (0.5 * (ts[1:] + ts[:-1]))[:, None]
        seg.extend([k] * len(mid))
        cell.extend(_cells_of(mid, n).tolist())
        frac.extend(np.diff(ts).tolist())
    return np.array(seg, int), np.array(cell, int), np.array(frac)


def _jump_normal_measure(traj: ShootingTrajectory, I1, targ, mask):
    """Curve term on a refined copy of the jump curve.

    Sub-segments (at most a quarter cell long) are flowed forward; at the final
    time each transported chord is split exactly at the grid lines so every
    cell contributes with its own residual jump.  Returns the flowed
    sub-segment midpoints and the pulled-back normal measures ``d phi_{0,1}^T N_1``.
    """
    from .flows import integrate_flow
    ctx = traj.context
    n = ctx.n
    steps = len(traj.states) - 1
    T = float(traj.times[-1])
    curve = ctx.curve
    K = len(curve.a)
    s = max(1, int(np.ceil(4 * n * curve.lengths.max())))
    tpar = np.linspace(0.0, 1.0, s + 1)
    P = curve.a[:, None, :] + (curve.b - curve.a)[:, None, :] * tpar[None, :, None]
    ends = integrate_flow(traj.v_path, P.reshape(-1, 2), steps, "rk4", 0.0, T).positions[-1]
    E1 = ends.reshape(K, s + 1, 2)
    a1 = E1[:, :-1].reshape(-1, 2)
    b1 = E1[:, 1:].reshape(-1, 2)
    mids = integrate_flow(traj.v_path, (0.5 * (P[:, 1:] + P[:, :-1])).reshape(-1, 2), steps, "rk4", 0.0, T)
    pp = np.repeat(np.maximum(curve.plus_piece, 0), s)
    mp = np.repeat(np.maximum(curve.minus_piece, 0), s)
    seg, cell, frac = _cell_pieces(a1, b1, n)
    jp = I1[pp[seg], cell]
    jm = I1[mp[seg], cell]
    dens = np.bincount(seg, mask[cell] * frac * (jp - jm) * (jp + jm - 2.0 * targ[cell]), len(a1))
    d1 = b1 - a1
    N1 = dens[:, None] * np.column_stack([-d1[:, 1], d1[:, 0]])
    return mids, np.einsum("nji,nj->ni", mids.differentials[-1], N1)


def pair_with_path(grad_fields, path, T: float = 1.0) -> float:
    """``int_0^T <grad_t, dv_t> dt`` by Simpson over step endpoints."""
    from .flows import time_integral
    vals = []
    times = []
    for t, nodes, cov in grad_fields:
        dv = path.at(t)
        from .kernels import field_eval
        vals.append(float(np.sum(cov * field_eval(dv, nodes))) if len(dv) else 0.0)
        times.append(t)
    return time_integral(times, vals)


def attachment_along_path(ctx: ShootingContext, v_path, Itarg: PiecewiseImage, steps: int, T: float = 1.0) -> float:
    """Cell attachment ``sum_y mask cov_i |I_0,i o phi_{1,0} - I_targ|^2`` for a velocity path (no contrast).

    Piece values are pulled back with cubic splines and, for several pieces,
    weighted by the exact coverage of the pushed-forward pieces, so the value
    is smooth in the path and moving jumps are seen.
    """
    from .flows import integrate_flow, integrate_flow_reverse
    from .geodesic import xp_normalized_coverage, xp_piece_coverage
    tr = integrate_flow_reverse(v_path, ctx.grid, steps, "rk4", T)
    y0 = tr.positions[-1]
    target = Itarg.sample(ctx.grid)
    mask = _jump_cell_mask(Itarg, ctx.n)
    vals = np.stack([sp.ev(y0[:, 1], y0[:, 0]) for sp in _piece_splines(ctx)])
    if ctx.r == 1:
        cov = np.ones_like(vals)
    else:
        verts = integrate_flow(v_path, ctx.vertices, steps, "rk4", 0.0, T).positions[-1]
        cov = xp_normalized_coverage(np, xp_piece_coverage(np, verts, ctx.piece_index_edges, ctx.boxes))
    return float(np.sum(mask * cov * (vals - target[None]) ** 2) * ctx.grid_weight)

