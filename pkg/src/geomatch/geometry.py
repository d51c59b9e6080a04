"""Piecewise-Lipschitz images on the unit square.

An image is a partition of ``M = [0,1]^2`` into polygons, one globally
extended intensity grid per polygon, and the jump curve made of the shared
piece boundaries.  Grids are sampled at cell centres ``(i + 1/2) / n`` and
indexed ``grid[iy, ix]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

from functools import lru_cache

import numpy as np

from .errors import OnJumpError, OutsideDomainError, PartitionGapError

EDGE_TOL = 1e-12


class Location(enum.IntEnum):
    OUTSIDE = 0
    INSIDE = 1
    BOUNDARY = 2


# -- grids ------------------------------------------------------------------

def grid_axis(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def grid_points(n: int) -> np.ndarray:
    """Cell centres of an ``n x n`` grid, flattened row-major (index ``iy * n + ix``)."""
    X, Y = np.meshgrid(grid_axis(n), grid_axis(n), indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def xp_bilinear(xp, grid, pts):
    """Bilinear interpolation of a cell-centred grid; linear extrapolation outside."""
    n = grid.shape[0]
    u = pts[:, 0] * n - 0.5
    w = pts[:, 1] * n - 0.5
    i0 = xp.clip(xp.floor(u), 0, n - 2)
    j0 = xp.clip(xp.floor(w), 0, n - 2)
    fu = u - i0
    fw = w - j0
    i0 = i0.astype(int)
    j0 = j0.astype(int)
    g00 = grid[j0, i0]
    g01 = grid[j0, i0 + 1]
    g10 = grid[j0 + 1, i0]
    g11 = grid[j0 + 1, i0 + 1]
    return ((1 - fu) * (1 - fw) * g00 + fu * (1 - fw) * g01
            + (1 - fu) * fw * g10 + fu * fw * g11)


def bilinear(grid, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return xp_bilinear(np, np.asarray(grid, dtype=float), pts)


@lru_cache(maxsize=32)
def difference_matrix(n: int, order: int = 2) -> np.ndarray:
    """1-D derivative matrix on ``n`` cell centres of ``[0, 1]``.

    ``order=2`` reproduces :func:`numpy.gradient` (central inside, one-sided
    first order on the two end nodes).  ``order=4`` uses the five-point
    central stencil wherever it fits and falls back to the ``order=2`` rows
    on the two outermost nodes at each end.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    h = 1.0 / n
    D = np.zeros((n, n))
    if n < 2:
        return D
    D[0, :2] = [-1.0 / h, 1.0 / h]
    D[-1, -2:] = [-1.0 / h, 1.0 / h]
    for i in range(1, n - 1):
        if order == 4 and 2 <= i <= n - 3:
            D[i, i - 2:i + 3] = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
        else:
            D[i, i - 1] = -0.5 / h
            D[i, i + 1] = 0.5 / h
    D.setflags(write=False)
    return D


def grid_gradient(grid, order: int = 2) -> np.ndarray:
    """Central differences (one-sided on the grid border); returns ``(n, n, 2)``."""
    g = np.asarray(grid, dtype=float)
    D = difference_matrix(g.shape[0], order)
    return np.stack([g @ D.T, D @ g], axis=-1)


def grid_gradient_adjoint(field_xy, order: int = 2) -> np.ndarray:
    """Adjoint of :func:`grid_gradient`: maps an ``(n, n, 2)`` field to ``(n, n)``."""
    D = difference_matrix(field_xy.shape[0], order)
    return field_xy[..., 0] @ D + D.T @ field_xy[..., 1]


# -- polygons ---------------------------------------------------------------

def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def _ring_is_simple(ring: np.ndarray) -> bool:
    k = len(ring)
    for i in range(k):
        a, b = ring[i], ring[(i + 1) % k]
        for j in range(i + 2, k):
            if i == 0 and j == k - 1:
                continue
            if _segments_cross(a, b, ring[j], ring[(j + 1) % k]):
                return False
    return True


@dataclass
class LipschitzDomain:
    """Simple polygon, stored counter-clockwise, optionally with polygonal holes.

    Holes are an extension needed to express a disk-in-square partition with
    two pieces; they are stored clockwise so every ring keeps the interior on
    its left.
    """

    vertices: np.ndarray
    holes: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) > 1 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise ValueError("a polygon needs at least three vertices")
        if _signed_area(v) < 0:
            v = v[::-1].copy()
        if not _ring_is_simple(v):
            raise ValueError("polygon is not simple")
        self.vertices = v
        holes = []
        for h in self.holes:
            h = np.asarray(h, dtype=float).reshape(-1, 2)
            if len(h) > 1 and np.allclose(h[0], h[-1]):
                h = h[:-1]
            if _signed_area(h) > 0:
                h = h[::-1].copy()
            holes.append(h)
        self.holes = holes
        if not self.area > 0:
            raise ValueError("polygon must have positive area")

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.vertices] + list(self.holes)

    @property
    def area(self) -> float:
        return sum(_signed_area(r) for r in self.rings)

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None] - v[None], axis=-1)))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge start and end points of every ring, interior on the left."""
        a = np.vstack(self.rings)
        b = np.vstack([np.roll(r, -1, axis=0) for r in self.rings])
        return a, b

    def transformed(self, fn) -> "LipschitzDomain":
        return LipschitzDomain(fn(self.vertices), [fn(h) for h in self.holes])


def rectangle(x0, y0, x1, y1) -> LipschitzDomain:
    return LipschitzDomain([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def unit_square() -> LipschitzDomain:
    return rectangle(0.0, 0.0, 1.0, 1.0)


def regular_polygon(center, radius, k, phase=0.0) -> np.ndarray:
    th = phase + 2 * np.pi * np.arange(k) / k
    return np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])


def locate(domain: LipschitzDomain, pts, tol: float = EDGE_TOL) -> np.ndarray:
    """Winding-number classification of many points; returns :class:`Location` codes."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    a, b = domain.edges()
    out = np.empty(len(pts), dtype=np.int8)
    chunk = max(1, 200_000 // max(1, len(a)))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        px = p[:, 0:1]
        py = p[:, 1:2]
        ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
        left = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
        up = (ay <= py) & (by > py) & (left > 0)
        down = (ay > py) & (by <= py) & (left < 0)
        wn = up.sum(axis=1) - down.sum(axis=1)
        # distance to segments for the boundary state
        ex, ey = bx - ax, by - ay
        L2 = ex * ex + ey * ey
        t = np.clip(((px - ax) * ex + (py - ay) * ey) / L2, 0.0, 1.0)
        dx = px - (ax + t * ex)
        dy = py - (ay + t * ey)
        dmin = np.sqrt(np.min(dx * dx + dy * dy, axis=1))
        loc = np.where(wn != 0, Location.INSIDE, Location.OUTSIDE)
        loc = np.where(dmin <= tol, Location.BOUNDARY, loc)
        out[s:s + chunk] = loc
    return out


def point_in_polygon(domain: LipschitzDomain, x) -> Location:
    return Location(int(locate(domain, np.asarray(x, dtype=float).reshape(1, 2))[0]))


def segment_distance(pts, a, b) -> np.ndarray:
    """Distance from each point to the nearest of the segments ``a[k] -> b[k]``."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(a) == 0:
        return np.full(len(pts), np.inf)
    px, py = pts[:, 0:1], pts[:, 1:2]
    ex, ey = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    L2 = np.maximum(ex * ex + ey * ey, 1e-300)
    t = np.clip(((px - a[:, 0]) * ex + (py - a[:, 1]) * ey) / L2, 0.0, 1.0)
    dx = px - (a[:, 0] + t * ex)
    dy = py - (a[:, 1] + t * ey)
    return np.sqrt(np.min(dx * dx + dy * dy, axis=1))


# -- coverage areas (polygon ∩ axis-aligned boxes) --------------------------

def _clamp_primitive(xp, y, y0, y1):
    # antiderivative of clamp(s, y0, y1) - y0, vanishing at s = y0
    h = y1 - y0
    lo = y <= y0
    hi = y >= y1
    mid = 0.5 * (y - y0) ** 2
    top = 0.5 * h * h + h * (y - y1)
    return xp.where(lo, 0.0, xp.where(hi, top, mid))


def xp_box_coverage(xp, a, b, x0, x1, y0, y1):
    """Area of (polygon given by signed edges ``a -> b``) ∩ boxes.

    ``x0, x1, y0, y1`` are arrays of box bounds with shape ``(C,)``; ``a`` and
    ``b`` are ``(E, 2)`` edge endpoints with the interior on the left.  The
    result is exact for polygons and piecewise smooth in the vertices.
    """
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    X0, X1 = x0[:, None], x1[:, None]
    Y0, Y1 = y0[:, None], y1[:, None]
    dx = bx - ax
    dy = by - ay
    lo = xp.minimum(ax, bx)
    hi = xp.maximum(ax, bx)
    u0 = xp.clip(lo, X0, X1)
    u1 = xp.clip(hi, X0, X1)
    span = u1 - u0  # clipped x extent (>= 0)
    small = xp.abs(dx) < 1e-14
    sdx = xp.where(small, 1.0, dx)
    slope = dy / sdx
    ya = ay + slope * (u0 - ax)
    yb = ay + slope * (u1 - ax)
    dyc = yb - ya
    flat = xp.abs(dyc) < 1e-13
    sdyc = xp.where(flat, 1.0, dyc)
    ymid = 0.5 * (ya + yb)
    flat_val = (xp.clip(ymid, Y0, Y1) - Y0) * span
    curved = (_clamp_primitive(xp, yb, Y0, Y1) - _clamp_primitive(xp, ya, Y0, Y1)) * span / sdyc
    integral = xp.where(flat, flat_val, curved)
    sign = -xp.sign(dx)
    return xp.sum(xp.where(small, 0.0, sign * integral), axis=1)


def box_coverage(domain_or_edges, x0, x1, y0, y1) -> np.ndarray:
    if isinstance(domain_or_edges, LipschitzDomain):
        a, b = domain_or_edges.edges()
    else:
        a, b = domain_or_edges
    return xp_box_coverage(np, np.asarray(a, float), np.asarray(b, float),
                           np.atleast_1d(x0), np.atleast_1d(x1),
                           np.atleast_1d(y0), np.atleast_1d(y1))


def cell_boxes(n: int, sub: int = 1):
    """Bounds of the ``(n*sub)^2`` sub-cells, ordered by coarse cell then sub-cell."""
    m = n * sub
    iy, ix = np.divmod(np.arange(n * n), n)
    sy, sx = np.divmod(np.arange(sub * sub), sub)
    fx = (ix[:, None] * sub + sx[None, :]).ravel()
    fy = (iy[:, None] * sub + sy[None, :]).ravel()
    return fx / m, (fx + 1) / m, fy / m, (fy + 1) / m


# -- jump curves and images -------------------------------------------------

@dataclass
class JumpCurve:
    """Oriented segments ``a -> b`` with left-hand unit normals ``nu``.

    ``plus_values`` are the limits from the ``+nu`` side.  ``plus_piece`` and
    ``minus_piece`` record the adjacent pieces (-1 when unknown).
    """

    a: np.ndarray
    b: np.ndarray
    plus_values: np.ndarray
    minus_values: np.ndarray
    plus_piece: np.ndarray | None = None
    minus_piece: np.ndarray | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1, 2)
        self.b = np.asarray(self.b, dtype=float).reshape(-1, 2)
        self.plus_values = np.asarray(self.plus_values, dtype=float).reshape(-1)
        self.minus_values = np.asarray(self.minus_values, dtype=float).reshape(-1)
        k = len(self.a)
        if self.plus_piece is None:
            self.plus_piece = -np.ones(k, dtype=int)
        if self.minus_piece is None:
            self.minus_piece = -np.ones(k, dtype=int)
        self.plus_piece = np.asarray(self.plus_piece, dtype=int).reshape(-1)
        self.minus_piece = np.asarray(self.minus_piece, dtype=int).reshape(-1)

    def __len__(self):
        return len(self.a)

    @classmethod
    def empty(cls) -> "JumpCurve":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.b - self.a, axis=1)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)

    @property
    def normals(self) -> np.ndarray:
        d = self.b - self.a
        L = np.maximum(self.lengths, 1e-300)
        return np.column_stack([-d[:, 1], d[:, 0]]) / L[:, None]

    @property
    def jumps(self) -> np.ndarray:
        return (self.plus_values - self.minus_values)[:, None] * self.normals

    def flipped(self) -> "JumpCurve":
        return JumpCurve(self.b.copy(), self.a.copy(), self.minus_values.copy(),
                         self.plus_values.copy(), self.minus_piece.copy(), self.plus_piece.copy())

    def refined(self, k: int) -> "JumpCurve":
        """Split every segment into ``k`` equal parts, carrying the jump data over."""
        t = np.arange(k + 1) / k
        pts = self.a[:, None, :] + t[None, :, None] * (self.b - self.a)[:, None, :]
        return JumpCurve(pts[:, :-1].reshape(-1, 2), pts[:, 1:].reshape(-1, 2),
                         np.repeat(self.plus_values, k), np.repeat(self.minus_values, k),
                         np.repeat(self.plus_piece, k), np.repeat(self.minus_piece, k))


def curve_quadrature(curve: JumpCurve):
    """Midpoint rule on the jump curve: (nodes, weights = segment lengths, normals)."""
    return curve.midpoints, curve.lengths, curve.normals


def _in_unit_square(p, tol=1e-12):
    return np.all((p >= -tol) & (p <= 1 + tol), axis=-1)


def _split_edges(domain_edges, all_vertices, tol=1e-10):
    """Split edges at foreign vertices lying in their interior (T-junctions)."""
    out_a, out_b = [], []
    a_all, b_all = domain_edges
    for a, b in zip(a_all, b_all):
        e = b - a
        L2 = float(e @ e)
        t = ((all_vertices - a) @ e) / L2
        perp = np.abs((all_vertices[:, 0] - a[0]) * e[1] - (all_vertices[:, 1] - a[1]) * e[0])
        mask = (t > 1e-9) & (t < 1 - 1e-9) & (perp / np.sqrt(L2) < tol)
        ts = np.unique(np.concatenate([[0.0], t[mask], [1.0]]))
        pts = a + ts[:, None] * e
        out_a.append(pts[:-1])
        out_b.append(pts[1:])
    return np.vstack(out_a), np.vstack(out_b)


@dataclass
class PiecewiseImage:
    pieces: list
    intensities: list
    grid_resolution: int
    jump: JumpCurve = field(default_factory=JumpCurve.empty)

    @property
    def n(self) -> int:
        return self.grid_resolution

    @property
    def r(self) -> int:
        return len(self.pieces)

    def piece_edges(self, densify: float | None = None):
        """Per-piece edges split at T-junctions, optionally densified to a max length."""
        allv = np.vstack([np.vstack(p.rings) for p in self.pieces])
        out = []
        for piece in self.pieces:
            a, b = _split_edges(piece.edges(), allv)
            if densify:
                aa, bb = [], []
                for p, q in zip(a, b):
                    k = max(1, int(np.ceil(np.linalg.norm(q - p) / densify - 1e-9)))
                    t = np.arange(k + 1) / k
                    pts = p + t[:, None] * (q - p)
                    aa.append(pts[:-1])
                    bb.append(pts[1:])
                a, b = np.vstack(aa), np.vstack(bb)
            out.append((a, b))
        return out

    def vertex_table(self, densify: float | None = None, decimals: int = 10):
        """Unique boundary vertices and, per piece, index pairs of its edges.

        Shared edges reference the same vertices so transported pieces keep
        tiling the plane.
        """
        edges = self.piece_edges(densify)
        keys: dict = {}
        verts = []
        index_edges = []

        def key_of(p):
            k = (round(float(p[0]), decimals), round(float(p[1]), decimals))
            if k not in keys:
                keys[k] = len(verts)
                verts.append(np.asarray(p, dtype=float))
            return keys[k]

        for a, b in edges:
            ia = np.array([key_of(p) for p in a], dtype=int)
            ib = np.array([key_of(p) for p in b], dtype=int)
            index_edges.append((ia, ib))
        return np.array(verts), index_edges

    def curve(self, subdivisions: int = 1) -> JumpCurve:
        """Jump curve refined with jump data resampled at the new midpoints."""
        c = self.jump.refined(subdivisions) if subdivisions > 1 else self.jump
        if len(c) == 0:
            return c
        m = c.midpoints
        plus = np.array([bilinear(self.intensities[i], m[k:k + 1])[0]
                         for k, i in enumerate(c.plus_piece)]) if c.plus_piece.min() >= 0 else c.plus_values
        minus = np.array([bilinear(self.intensities[i], m[k:k + 1])[0]
                          for k, i in enumerate(c.minus_piece)]) if c.minus_piece.min() >= 0 else c.minus_values
        return JumpCurve(c.a, c.b, plus, minus, c.plus_piece, c.minus_piece)

    def labels(self, pts, strict: bool = False) -> np.ndarray:
        """Index of the piece containing each point (boundary points go to a touching piece)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        lab = -np.ones(len(pts), dtype=int)
        bnd = -np.ones(len(pts), dtype=int)
        for i, piece in enumerate(self.pieces):
            loc = locate(piece, pts)
            lab = np.where((lab < 0) & (loc == Location.INSIDE), i, lab)
            bnd = np.where((bnd < 0) & (loc == Location.BOUNDARY), i, bnd)
        lab = np.where(lab < 0, bnd, lab)
        if not strict and np.any(lab < 0):
            miss = lab < 0
            inner = np.clip(pts[miss], 1e-9, 1 - 1e-9)
            sub = self.labels(inner, strict=True)
            lab[miss] = np.where(sub < 0, 0, sub)
        return lab

    def sample(self, pts) -> np.ndarray:
        """Lenient vectorised evaluation: never raises, used on transported points."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        lab = self.labels(pts)
        out = np.empty(len(pts))
        for i, g in enumerate(self.intensities):
            m = lab == i
            if np.any(m):
                out[m] = bilinear(g, pts[m])
        return out

    def grid_values(self) -> np.ndarray:
        """Projected image sampled at its own cell centres, shape ``(n, n)``."""
        n = self.n
        return self.sample(grid_points(n)).reshape(n, n)


def _validate_partition(partition, tol=1e-9, probe: int = 97):
    total = sum(p.area for p in partition)
    pts = grid_points(probe)
    count = np.zeros(len(pts), dtype=int)
    boundary = np.zeros(len(pts), dtype=bool)
    for p in partition:
        loc = locate(p, pts, tol=1e-9)
        count += loc == Location.INSIDE
        boundary |= loc == Location.BOUNDARY
    if np.any(count > 1):
        raise PartitionGapError("pieces overlap")
    if np.any((count == 0) & ~boundary):
        raise PartitionGapError("pieces leave a gap in the unit square")
    if abs(total - 1.0) > tol:
        raise PartitionGapError(f"piece areas sum to {total!r}, expected 1")


def project(components: Sequence, partition: Sequence[LipschitzDomain],
            validate: bool = True) -> PiecewiseImage:
    """Assemble ``I = sum_i I^i 1_{U_i}`` with its jump curve."""
    comps = [np.asarray(c, dtype=float) for c in components]
    parts = list(partition)
    if len(comps) != len(parts):
        raise ValueError("one intensity grid per piece is required")
    n = comps[0].shape[0]
    for c in comps:
        if c.shape != (n, n):
            raise ValueError("all component grids must share one square shape")
    if validate:
        _validate_partition(parts)
    img = PiecewiseImage(parts, comps, n)
    img.jump = _assemble_jump(img)
    return img


def _assemble_jump(img: PiecewiseImage) -> JumpCurve:
    A, B, plus, minus, pp, mp = [], [], [], [], [], []
    delta = 1e-7
    for i, (a, b) in enumerate(img.piece_edges()):
        if len(a) == 0:
            continue
        mid = 0.5 * (a + b)
        d = b - a
        nu = np.column_stack([-d[:, 1], d[:, 0]]) / np.linalg.norm(d, axis=1)[:, None]
        probe = mid - delta * nu
        inside_m = _in_unit_square(probe, tol=0.0)
        nb = -np.ones(len(a), dtype=int)
        for j, piece in enumerate(img.pieces):
            if j == i:
                continue
            loc = locate(piece, probe[inside_m], tol=1e-12)
            sel = np.where(inside_m)[0][loc == Location.INSIDE]
            nb[sel] = np.where(nb[sel] < 0, j, nb[sel])
        keep = inside_m & (nb > i)
        for k in np.where(keep)[0]:
            A.append(a[k])
            B.append(b[k])
            plus.append(bilinear(img.intensities[i], mid[k:k + 1])[0])
            minus.append(bilinear(img.intensities[nb[k]], mid[k:k + 1])[0])
            pp.append(i)
            mp.append(nb[k])
    if not A:
        return JumpCurve.empty()
    return JumpCurve(np.array(A), np.array(B), np.array(plus), np.array(minus),
                     np.array(pp), np.array(mp))


def eval_image(img: PiecewiseImage, x) -> float:
    x = np.asarray(x, dtype=float).reshape(2)
    if not _in_unit_square(x[None], tol=0.0)[0]:
        raise OutsideDomainError(f"{x} lies outside the unit square")
    tol = EDGE_TOL * np.sqrt(2.0)
    if len(img.jump) and segment_distance(x[None], img.jump.a, img.jump.b)[0] <= tol:
        raise OnJumpError(f"{x} lies on the jump curve")
    lab = img.labels(x[None])[0]
    return float(bilinear(img.intensities[lab], x[None])[0])


def sbv_derivative(img: PiecewiseImage):
    """Absolutely continuous gradient per piece and jump vectors ``(f+ - f-) nu``."""
    grads = [grid_gradient(g) for g in img.intensities]
    return grads, img.jump.jumps


def single_piece_image(grid) -> PiecewiseImage:
    return project([grid], [unit_square()])
