"""Text-first file formats and the flat key-value run configuration.

Grids are stored top row first (the row with the largest ``y``), which is the
usual orientation of PGM viewers; in memory row ``iy`` holds ``y = (iy+0.5)/n``.
All floating point text uses ``repr`` so values survive a round trip exactly.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .geodesic import MomentumTriple
from .geometry import JumpCurve, LipschitzDomain, PiecewiseImage, project, unit_square
from .hamiltonian import HamiltonianState
from .kernels import KernelSpec


# -- atomic output ---------------------------------------------------------------

def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to a temporary file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    return repr(float(x))


def thread_cap() -> int:
    """Worker cap from ``GEOMATCH_THREADS`` (0, the default, means sequential)."""
    raw = os.environ.get("GEOMATCH_THREADS", "0").strip()
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"GEOMATCH_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError("GEOMATCH_THREADS must be >= 0")
    return value


# -- PGM ---------------------------------------------------------------------------

@dataclass
class PGMImage:
    values: np.ndarray   # (n, n) in [0, 1], row iy = y index
    maxval: int = 255
    magic: str = "P5"


def _pgm_header(data: bytes):
    """Return (magic, width, height, maxval, offset of the raster)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P2", "P5"):
        raise FormatError(f"unsupported PGM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError("invalid PGM dimensions or maxval")
    return magic, width, height, maxval, pos


def read_pgm(path) -> PGMImage:
    data = Path(path).read_bytes()
    magic, width, height, maxval, pos = _pgm_header(data)
    if width != height:
        raise FormatError(f"grids must be square, got {width}x{height}")
    count = width * height
    if magic == "P2":
        try:
            raw = np.array([int(t) for t in data[pos:].split()], dtype=np.int64)
        except ValueError:
            raise FormatError("non-integer sample in P2 raster") from None
        if raw.size != count:
            raise FormatError(f"expected {count} samples, found {raw.size}")
    else:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = data[pos:pos + count * dtype.itemsize]
        if len(body) != count * dtype.itemsize:
            raise FormatError("truncated P5 raster")
        raw = np.frombuffer(body, dtype=dtype).astype(np.int64)
    if np.any(raw > maxval):
        raise FormatError("sample exceeds maxval")
    grid = raw.reshape(height, width)[::-1] / float(maxval)
    return PGMImage(grid, maxval, magic)


def pgm_bytes(values, maxval: int = 255, magic: str = "P5") -> bytes:
    g = np.asarray(values, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise FormatError("PGM output needs a square grid")
    if magic not in ("P2", "P5"):
        raise FormatError(f"unsupported PGM magic {magic!r}")
    q = np.clip(np.rint(g[::-1] * maxval), 0, maxval).astype(np.int64)
    n = g.shape[0]
    head = f"{magic}\n{n} {n}\n{maxval}\n".encode("ascii")
    if magic == "P2":
        rows = "\n".join(" ".join(str(v) for v in row) for row in q)
        return head + rows.encode("ascii") + b"\n"
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    return head + q.astype(dtype).tobytes()


def write_pgm(path, values, maxval: int = 255, magic: str = "P5") -> None:
    atomic_write(path, pgm_bytes(values, maxval, magic))


# -- full-precision grids ------------------------------------------------------------

def grid_text(values) -> str:
    g = np.asarray(values, dtype=float)
    lines = [f"grid {g.shape[0]}"]
    lines += [" ".join(_fmt(v) for v in row) for row in g[::-1]]
    return "\n".join(lines) + "\n"


def read_grid(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split()[0] != "grid":
        raise FormatError(f"{path}: missing 'grid n' header")
    try:
        n = int(lines[0].split()[1])
        rows = [[float(t) for t in ln.split()] for ln in lines[1:]]
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed grid file") from None
    if len(rows) != n or any(len(r) != n for r in rows):
        raise FormatError(f"{path}: expected {n} rows of {n} values")
    return np.array(rows)[::-1].copy()


# -- images with sidecars --------------------------------------------------------------

def _read_ring(lines, i, count, where):
    pts = []
    for k in range(count):
        try:
            x, y = (float(t) for t in lines[i + k].split())
        except (IndexError, ValueError):
            raise FormatError(f"{where}: bad vertex record") from None
        pts.append((x, y))
    return np.array(pts), i + count


def parse_sidecar(text: str, where: str = "sidecar"):
    """Return ``[(grid_ref, outer, holes)]`` in piece order."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split()[:2] != ["format", "geomatch-sidecar"]:
        raise FormatError(f"{where}: first record must be 'format geomatch-sidecar 1'")
    pieces, i, declared = [], 1, None
    while i < len(lines):
        head = lines[i].split()
        if head[0] == "pieces" and len(head) == 2:
            declared = int(head[1])
            i += 1
        elif head[0] == "piece" and len(head) == 3:
            ref, outer, holes = head[2], None, []
            i += 1
            while i < len(lines) and lines[i] != "end":
                rec = lines[i].split()
                if rec[0] in ("outer", "hole") and len(rec) == 2:
                    ring, i = _read_ring(lines, i + 1, int(rec[1]), where)
                    if rec[0] == "outer":
                        outer = ring
                    else:
                        holes.append(ring)
                else:
                    raise FormatError(f"{where}: unexpected record {lines[i]!r}")
            if i >= len(lines):
                raise FormatError(f"{where}: piece without 'end'")
            pieces.append((ref, outer, holes))
            i += 1
        else:
            raise FormatError(f"{where}: unexpected record {lines[i]!r}")
    if declared is None or declared != len(pieces) or not pieces:
        raise FormatError(f"{where}: 'pieces' count does not match the piece records")
    return pieces


def load_image(path_pgm, path_sidecar=None) -> PiecewiseImage:
    """Image from a raw PGM grid and a sidecar listing piece polygons and grid references.

    A grid reference is ``single`` (the PGM itself; one piece, polygon
    optional), ``self`` (the PGM grid reused for this piece), or a path
    relative to the sidecar to a ``.pgm`` or full-precision ``.grid`` file.
    """
    pgm = read_pgm(path_pgm)
    if path_sidecar is None:
        return project([pgm.values], [unit_square()])
    sidecar = Path(path_sidecar)
    pieces = parse_sidecar(sidecar.read_text(), str(sidecar))
    n = pgm.values.shape[0]
    grids, domains = [], []
    for ref, outer, holes in pieces:
        if ref == "single":
            if len(pieces) != 1:
                raise FormatError("'single' is only valid for one-piece images")
            grid = pgm.values
        elif ref == "self":
            grid = pgm.values
        else:
            p = sidecar.parent / ref
            grid = read_grid(p) if p.suffix == ".grid" else read_pgm(p).values
        if grid.shape != (n, n):
            raise FormatError(f"piece grid {ref!r} does not match the {n}x{n} image")
        grids.append(grid)
        if outer is None:
            if len(pieces) != 1:
                raise FormatError("every piece of a multi-piece image needs an outer ring")
            domains.append(unit_square())
        else:
            try:
                domains.append(LipschitzDomain(outer, holes))
            except ValueError as exc:
                raise FormatError(f"bad polygon: {exc}") from None
    return project(grids, domains)


def sidecar_text(img: PiecewiseImage, refs) -> str:
    out = ["format geomatch-sidecar 1", f"pieces {img.r}"]
    for i, (ref, dom) in enumerate(zip(refs, img.pieces)):
        out.append(f"piece {i} {ref}")
        out.append(f"outer {len(dom.vertices)}")
        out += [f"{_fmt(x)} {_fmt(y)}" for x, y in dom.vertices]
        for h in dom.holes:
            out.append(f"hole {len(h)}")
            out += [f"{_fmt(x)} {_fmt(y)}" for x, y in h]
        out.append("end")
    return "\n".join(out) + "\n"


def save_image(img: PiecewiseImage, path_pgm, path_sidecar=None, maxval: int = 255,
               magic: str = "P5") -> None:
    """Write the composite grid as PGM plus exact per-piece ``.grid`` files and a sidecar."""
    path_pgm = Path(path_pgm)
    write_pgm(path_pgm, img.grid_values(), maxval, magic)
    if path_sidecar is None:
        return
    sidecar = Path(path_sidecar)
    refs = []
    for i, g in enumerate(img.intensities):
        name = f"{sidecar.stem}.piece{i}.grid"
        atomic_write(sidecar.parent / name, grid_text(g))
        refs.append(name)
    atomic_write(sidecar, sidecar_text(img, refs))


# -- curves ------------------------------------------------------------------------------

def curve_text(curve: JumpCurve) -> str:
    rows = ["# ax ay bx by nux nuy fplus fminus"]
    for a, b, nu, fp, fm in zip(curve.a, curve.b, curve.normals, curve.plus_values, curve.minus_values):
        rows.append(" ".join(_fmt(v) for v in (*a, *b, *nu, fp, fm)))
    return "\n".join(rows) + "\n"


def write_curve(path, curve: JumpCurve) -> None:
    atomic_write(path, curve_text(curve))


def read_curve(path) -> JumpCurve:
    recs = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        try:
            vals = [float(t) for t in ln.split()]
        except ValueError:
            raise FormatError(f"{path}: non-numeric curve record") from None
        if len(vals) != 8:
            raise FormatError(f"{path}: curve records have 8 fields, got {len(vals)}")
        recs.append(vals)
    if not recs:
        return JumpCurve.empty()
    r = np.array(recs)
    curve = JumpCurve(r[:, 0:2], r[:, 2:4], r[:, 6], r[:, 7])
    if not np.allclose(curve.normals, r[:, 4:6], atol=1e-9):
        raise FormatError(f"{path}: stored normals disagree with segment orientation")
    return curve


# -- momenta ---------------------------------------------------------------------------------

def momenta_text(mom: MomentumTriple, n: int) -> str:
    K = len(mom.p_b)
    rows = [f"momenta n {n} K {K}", "# kind index components"]
    for j in np.flatnonzero(np.any(mom.p_a != 0, axis=1)):
        rows.append(f"a {j} {_fmt(mom.p_a[j, 0])} {_fmt(mom.p_a[j, 1])}")
    for k in np.flatnonzero(np.any(mom.p_b != 0, axis=1)):
        rows.append(f"b {k} {_fmt(mom.p_b[k, 0])} {_fmt(mom.p_b[k, 1])}")
    for j in np.flatnonzero(mom.p_c != 0):
        rows.append(f"c {j} {_fmt(mom.p_c[j])}")
    return "\n".join(rows) + "\n"


def write_momenta(path, mom: MomentumTriple, n: int) -> None:
    atomic_write(path, momenta_text(mom, n))


def read_momenta(path) -> tuple[MomentumTriple, int]:
    """Momenta and the grid size they refer to; entries not listed are zero."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[0] != "momenta" or head[1] != "n" or head[3] != "K":
        raise FormatError(f"{path}: first record must be 'momenta n <n> K <K>'")
    n, K = int(head[2]), int(head[4])
    mom = MomentumTriple.zeros(n, K)
    sizes = {"a": (n * n, 2), "b": (K, 2), "c": (n * n, 1)}
    for ln in lines[1:]:
        rec = ln.split()
        kind = rec[0]
        if kind not in sizes or len(rec) != 2 + sizes[kind][1]:
            raise FormatError(f"{path}: bad momentum record {ln!r}")
        idx = int(rec[1])
        if not 0 <= idx < sizes[kind][0]:
            raise FormatError(f"{path}: index {idx} out of range for kind {kind}")
        vals = [float(t) for t in rec[2:]]
        if kind == "a":
            mom.p_a[idx] = vals
        elif kind == "b":
            mom.p_b[idx] = vals
        else:
            mom.p_c[idx] = vals[0]
    return mom, n


# -- Hamiltonian states -------------------------------------------------------------------------

def state_text(st: HamiltonianState) -> str:
    kv, ks = st.kernel_v, st.kernel_s
    out = ["hamiltonian-state 1", f"n {st.n}", f"r {st.r}", f"K {len(st.Q0)}",
           f"kernel_v {_fmt(kv.sigma)} {_fmt(kv.scale)}", f"kernel_s {_fmt(ks.sigma)} {_fmt(ks.scale)}",
           f"fd_order {st.fd_order}", "[curve]", "# x y px py weight"]
    for q, p, w in zip(st.Q0, st.P0, st.curve_weights):
        out.append(" ".join(_fmt(v) for v in (*q, *p, w)))
    for i in range(st.r):
        out.append(f"[Qi {i}]")
        out += grid_text(st.Qi[i]).splitlines()[1:]
        out.append(f"[Pi {i}]")
        out += grid_text(st.Pi[i]).splitlines()[1:]
    return "\n".join(out) + "\n"


def write_state(path, st: HamiltonianState) -> None:
    atomic_write(path, state_text(st))


def read_state(path) -> HamiltonianState:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split() != ["hamiltonian-state", "1"]:
        raise FormatError(f"{path}: not a hamiltonian-state file")
    head, i = {}, 1
    while i < len(lines) and not lines[i].startswith("["):
        rec = lines[i].split()
        head[rec[0]] = rec[1:]
        i += 1
    try:
        n, r, K = int(head["n"][0]), int(head["r"][0]), int(head["K"][0])
        kv = KernelSpec(float(head["kernel_v"][0]), 2, float(head["kernel_v"][1]))
        ks = KernelSpec(float(head["kernel_s"][0]), 1, float(head["kernel_s"][1]))
        order = int(head.get("fd_order", ["4"])[0])
    except (KeyError, IndexError, ValueError):
        raise FormatError(f"{path}: incomplete state header") from None
    sections = {}
    while i < len(lines):
        name = lines[i].strip("[]")
        j = i + 1
        while j < len(lines) and not lines[j].startswith("["):
            j += 1
        sections[name] = lines[i + 1:j]
        i = j
    try:
        curve = np.array([[float(t) for t in ln.split()] for ln in sections.get("curve", [])]).reshape(-1, 5)
        if len(curve) != K:
            raise FormatError(f"{path}: expected {K} curve records")
        Qi = np.array([read_grid_lines(sections[f"Qi {k}"], n) for k in range(r)])
        Pi = np.array([read_grid_lines(sections[f"Pi {k}"], n) for k in range(r)])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: malformed state sections") from None
    return HamiltonianState(curve[:, 0:2], Qi, curve[:, 2:4], Pi, curve[:, 4], kv, ks, order)


def read_grid_lines(lines, n: int) -> np.ndarray:
    rows = [[float(t) for t in ln.split()] for ln in lines]
    if len(rows) != n or any(len(r) != n for r in rows):
        raise FormatError(f"expected {n} rows of {n} values")
    return np.array(rows)[::-1].copy()


# -- run configuration ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat key-value run settings; see :func:`load_config` for the file syntax."""
    kernel_v_sigma: float = 0.15
    kernel_v_scale: float = 1.0
    kernel_s_sigma: float = 0.25
    kernel_s_scale: float = 1.0
    scheme: str = "rk4"
    steps: int = 10
    T: float = 1.0
    sigma_attach: float = 0.05
    max_iters: int = 100
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    grad_tol: float = 1e-10
    channels: int = 1
    quadrature_m: int = 512
    curve_subdivisions: int = 1
    lemma_h: float = 1e-3
    lemma_tol: float = 1e-2
    output_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("euler", "rk4"):
            raise ConfigError(f"scheme must be euler or rk4, got {self.scheme!r}")
        for name in ("steps", "quadrature_m", "curve_subdivisions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("kernel_v_sigma", "kernel_v_scale", "kernel_s_sigma", "kernel_s_scale",
                     "T", "sigma_attach", "lemma_h", "lemma_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def kernel_v(self) -> KernelSpec:
        return KernelSpec(self.kernel_v_sigma, 2, self.kernel_v_scale)

    @property
    def kernel_s(self) -> KernelSpec:
        return KernelSpec(self.kernel_s_sigma, 1, self.kernel_s_scale)

    def match_config(self):
        from .matching import MatchConfig
        try:
            return MatchConfig(lam=self.kernel_v_scale, beta=self.kernel_s_scale,
                               sigma_attach=self.sigma_attach, steps=self.steps,
                               max_iters=self.max_iters, armijo_c=self.armijo_c,
                               armijo_shrink=self.armijo_shrink, grad_tol=self.grad_tol,
                               channels=self.channels, sigma_v=self.kernel_v_sigma,
                               sigma_s=self.kernel_s_sigma, T=self.T, scheme=self.scheme)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        rows = []
        for f in fields(self):
            key = _KEY_OF.get(f.name, f.name)
            val = getattr(self, f.name)
            rows.append(f"{key} = {_fmt(val) if isinstance(val, float) else val}")
        return "\n".join(rows) + "\n"


# file keys use dots for the grouped settings
_KEY_OF = {
    "kernel_v_sigma": "kernel_v.sigma", "kernel_v_scale": "kernel_v.scale",
    "kernel_s_sigma": "kernel_s.sigma", "kernel_s_scale": "kernel_s.scale",
    "sigma_attach": "match.sigma_attach", "max_iters": "match.max_iters",
    "armijo_c": "match.armijo_c", "armijo_shrink": "match.armijo_shrink",
    "grad_tol": "match.grad_tol", "channels": "match.channels",
    "quadrature_m": "quadrature.m", "curve_subdivisions": "quadrature.curve_subdivisions",
    "lemma_h": "lemma.h", "lemma_tol": "lemma.tol",
}
_FIELD_OF = {v: k for k, v in _KEY_OF.items()}
# fixed members of a KernelSpec that may appear in a file but cannot change
_FIXED = {"kernel_v.family": "gaussian", "kernel_s.family": "gaussian",
          "kernel_v.dimension": "2", "kernel_s.dimension": "1"}


def parse_config(text: str, where: str = "config") -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown or repeated keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values, seen = {}, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _FIXED:
            if val != _FIXED[key]:
                raise ConfigError(f"{where}:{lineno}: {key} must be {_FIXED[key]}")
            continue
        name = _FIELD_OF.get(key, key)
        if name not in types or (name in _KEY_OF and key == name):
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        kind = types[name]
        try:
            if kind in ("int", int):
                values[name] = int(val)
            elif kind in ("float", float):
                values[name] = float(val)
            else:
                values[name] = val
        except ValueError:
            raise ConfigError(f"{where}:{lineno}: bad value {val!r} for {key}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))
