"""Gaussian reproducing kernels and kernel-sum velocity fields.

A :class:`ParticleField` stores ``v(x) = (1/scale) sum_j k(x, node_j) covector_j``.
The helpers prefixed with ``xp_`` take an array namespace (``numpy`` or
``jax.numpy``) so the same arithmetic backs both the plain shooting code and
the differentiated energy used by the matcher.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class KernelSpec:
    sigma: float
    dimension: int = 2
    scale: float = 1.0
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if int(self.dimension) < 1:
            raise ValueError("dimension must be >= 1")

    def to_dict(self) -> dict:
        return {"family": self.family, "sigma": self.sigma, "scale": self.scale,
                "dimension": self.dimension}


@dataclass
class ParticleField:
    nodes: np.ndarray
    covectors: np.ndarray
    spec: KernelSpec = field(default_factory=lambda: KernelSpec(sigma=1.0))

    def __post_init__(self):
        d = self.spec.dimension
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, d)
        self.covectors = np.asarray(self.covectors, dtype=float).reshape(-1, d)
        if len(self.nodes) != len(self.covectors):
            raise ValueError("nodes and covectors must have equal length")

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def empty(cls, spec: KernelSpec) -> "ParticleField":
        d = spec.dimension
        return cls(np.zeros((0, d)), np.zeros((0, d)), spec)

    def __add__(self, other: "ParticleField") -> "ParticleField":
        return ParticleField(np.vstack([self.nodes, other.nodes]),
                             np.vstack([self.covectors, other.covectors]), self.spec)

    def scaled(self, c: float) -> "ParticleField":
        return ParticleField(self.nodes.copy(), c * self.covectors, self.spec)


# -- array-namespace generic primitives ------------------------------------

def xp_sqdist(xp, x, y):
    """Pairwise squared distances between rows of ``x`` (M,d) and ``y`` (N,d)."""
    if xp is np:
        return cdist(x, y, "sqeuclidean"), None
    d2 = 0.0
    for c in range(x.shape[1]):
        e = x[:, c][:, None] - y[:, c][None, :]
        d2 = d2 + e * e
    return d2, None


def xp_field(xp, x, nodes, cov, sigma, scale, jacobian=True):
    """Velocity (M,d) and optionally its Jacobian (M,d,d) at points ``x``."""
    d2, _ = xp_sqdist(xp, x, nodes)
    k = xp.exp(-d2 / (2.0 * sigma * sigma))
    if not jacobian:
        return (k @ cov) / scale, None
    # sum_j cov[j,a] k[m,j] (x[m,b] - y[j,b]) = x[m,b] (k cov)[m,a] - (k (cov y^T))[m,a,b]
    d = cov.shape[1]
    outer = (cov[:, :, None] * nodes[:, None, :]).reshape(-1, d * d)
    kc = k @ xp.concatenate([cov, outer], axis=1)
    kcov = kc[:, :d]
    kcy = kc[:, d:].reshape(-1, d, d)
    v = kcov / scale
    dv = -(kcov[:, :, None] * x[:, None, :] - kcy) / (sigma * sigma * scale)
    return v, dv


def xp_gram_form(xp, nodes, cov, sigma, scale):
    d2, _ = xp_sqdist(xp, nodes, nodes)
    k = xp.exp(-d2 / (2.0 * sigma * sigma))
    return xp.sum(cov * (k @ cov)) / scale


# -- public operations ------------------------------------------------------

def eval_k(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-r2 / (2.0 * spec.sigma ** 2)))


def grad1_k(spec: KernelSpec, x, y) -> np.ndarray:
    """Derivative of ``k(x, y)`` with respect to its first argument."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return -(x - y) / spec.sigma ** 2 * eval_k(spec, x, y)


def kernel_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    d = spec.dimension
    x = np.asarray(x, dtype=float).reshape(-1, d)
    y = np.asarray(y, dtype=float).reshape(-1, d)
    d2, _ = xp_sqdist(np, x, y)
    return np.exp(-d2 / (2.0 * spec.sigma ** 2))


def field_eval(f: ParticleField, x) -> np.ndarray:
    """Evaluate the field at one point (returns (d,)) or at many points (M,d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    pts = x.reshape(-1, f.spec.dimension)
    if len(f) == 0:
        out = np.zeros_like(pts)
    else:
        out, _ = xp_field(np, pts, f.nodes, f.covectors, f.spec.sigma, f.spec.scale,
                          jacobian=False)
    return out[0] if single else out


def field_jacobian(f: ParticleField, x) -> np.ndarray:
    """Jacobian ``dv`` with rows indexing components of v and columns d/dx_k."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    d = f.spec.dimension
    pts = x.reshape(-1, d)
    if len(f) == 0:
        out = np.zeros((len(pts), d, d))
    else:
        _, out = xp_field(np, pts, f.nodes, f.covectors, f.spec.sigma, f.spec.scale)
    return out[0] if single else out


def field_eval_with_jacobian(f: ParticleField, x):
    d = f.spec.dimension
    pts = np.asarray(x, dtype=float).reshape(-1, d)
    if len(f) == 0:
        return np.zeros_like(pts), np.zeros((len(pts), d, d))
    return xp_field(np, pts, f.nodes, f.covectors, f.spec.sigma, f.spec.scale)


def rkhs_norm_sq(f: ParticleField) -> float:
    """Weighted Gram form ``(1/scale) sum_ij a_i . k(q_i, q_j) a_j``.

    With ``scale = lambda`` this is ``lambda * ||v||_V^2`` for the field
    ``v = (1/lambda) sum_j k(q_j, .) a_j``; it is never negative.
    """
    if len(f) == 0:
        return 0.0
    K = kernel_matrix(f.spec, f.nodes, f.nodes)
    return float(np.sum(f.covectors * (K @ f.covectors)) / f.spec.scale)


def inner(f: ParticleField, g: ParticleField) -> float:
    """Gram pairing of two fields sharing a kernel, consistent with :func:`rkhs_norm_sq`."""
    if len(f) == 0 or len(g) == 0:
        return 0.0
    K = kernel_matrix(f.spec, f.nodes, g.nodes)
    return float(np.sum(f.covectors * (K @ g.covectors)) / f.spec.scale)


def distance_sq(f: ParticleField, g: ParticleField) -> float:
    return rkhs_norm_sq(f + g.scaled(-1.0))
