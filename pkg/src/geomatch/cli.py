"""Command line interface: ``geomatch {shoot,match,verify-lemma,ham-integrate,report}``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure (including a
lemma check outside tolerance).  Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import GeomatchError, NumericalError
from .flows import FlowTrajectory

log = logging.getLogger("geomatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _config(args) -> io.RunConfig:
    return io.load_config(args.config) if args.config else io.RunConfig()


def _out_dir(args, cfg) -> Path:
    return Path(args.out_dir if args.out_dir is not None else cfg.output_dir)


def _save_outputs(out: Path, stem: str, img, pgm: io.PGMImage) -> None:
    # multi-piece images also get a sidecar with exact per-piece grids
    sidecar = out / f"{stem}.sidecar" if img.r > 1 else None
    io.save_image(img, out / f"{stem}.pgm", sidecar, pgm.maxval, pgm.magic)


# -- shoot ----------------------------------------------------------------------------

def cmd_shoot(args) -> int:
    from .geodesic import relative_drift, shoot, speed_profile

    cfg = _config(args)
    out = _out_dir(args, cfg)
    pgm = io.read_pgm(args.image)
    img = io.load_image(args.image, args.sidecar)
    mom, n = io.read_momenta(args.momenta)
    if n != img.n:
        raise GeomatchError(f"momenta refer to a {n}x{n} grid, image is {img.n}x{img.n}")
    traj = shoot(img, mom, cfg.steps, cfg.scheme, cfg.kernel_v, cfg.kernel_s, cfg.T)
    g = traj.context.slices()[0]
    flow = FlowTrajectory(traj.times, np.stack([q[g] for q in traj.raw["qs"]]),
                          np.stack([D[g] for D in traj.raw["Ds"]]))
    io.atomic_write(out / "trajectory.csv", flow.to_csv())
    io.atomic_write(out / "speeds.csv", _csv_text(["t", "v_norm_sq", "s_norm_sq"], speed_profile(traj)))
    _save_outputs(out, "final", traj.final_image, pgm)
    dv, ds = relative_drift(traj)
    print(f"shoot: steps {cfg.steps} drift_v {dv:.3e} drift_s {ds:.3e} -> {out}")
    return 0


# -- match -----------------------------------------------------------------------------

def _grid_line_ids(n: int, stride: int) -> np.ndarray:
    iy, ix = np.divmod(np.arange(n * n), n)
    return np.flatnonzero((ix % stride == 0) | (iy % stride == 0) | (ix == n - 1) | (iy == n - 1))


def cmd_match(args) -> int:
    from .matching import match

    cfg = _config(args)
    out = _out_dir(args, cfg)
    pgm = io.read_pgm(args.source)
    I0 = io.load_image(args.source, args.source_sidecar)
    It = io.load_image(args.target, args.target_sidecar)
    if I0.n != It.n:
        raise GeomatchError("source and target grids differ in size")
    mcfg = cfg.match_config()

    def progress(it, mom, E, att):
        print(f"iter {it} energy {E:.6e} attachment {att:.6e}", file=sys.stderr)

    res = match(I0, It, mcfg, callback=progress if not args.quiet else None)
    traj = res.trajectory
    g = traj.context.slices()[0]
    ids = _grid_line_ids(I0.n, max(1, args.grid_stride))
    flow = FlowTrajectory(traj.times, np.stack([q[g][ids] for q in traj.raw["qs"]]),
                          np.stack([D[g][ids] for D in traj.raw["Ds"]]))
    text = flow.to_csv().splitlines()
    # report grid indices rather than positions within the subset
    rows = [text[0]]
    for line in text[1:]:
        t, pid, rest = line.split(",", 2)
        rows.append(f"{t},{ids[int(pid)]},{rest}")
    io.atomic_write(out / "grid_overlay.csv", "\n".join(rows) + "\n")
    hist = zip(range(len(res.energy_history)), res.energy_history, res.kinetic_history,
               res.attachment_history)
    io.atomic_write(out / "energy_history.csv",
                    _csv_text(["iteration", "energy", "kinetic", "attachment"], hist))
    io.write_momenta(out / "momenta.txt", res.momenta, I0.n)
    io.atomic_write(out / "config.txt", cfg.to_text())
    _save_outputs(out, "final", res.final_image, pgm)
    a0, a1 = res.attachment_history[0], res.attachment_history[-1]
    red = 1.0 - a1 / a0 if a0 > 0 else 0.0
    print(f"match: {res.iterations} iterations, attachment {a0:.6e} -> {a1:.6e} "
          f"(reduction {100 * red:.2f}%) -> {out}")
    return 0


# -- verify-lemma -------------------------------------------------------------------------

def _linear(tokens, where):
    if len(tokens) != 4 or tokens[0] != "linear":
        raise GeomatchError(f"{where}: expected 'linear c0 cx cy'")
    c0, cx, cy = (float(t) for t in tokens[1:])
    return lambda p: c0 + cx * p[:, 0] + cy * p[:, 1], np.array([cx, cy])


def parse_scene_file(text: str, where: str = "scene"):
    """Lemma scenes: blocks ``scene NAME`` ... ``end`` with ``U k``/``V k`` vertex
    lists, ``field constant cx cy`` or ``field affine a11 a12 a21 a22 b1 b2``,
    and optional ``f``/``g`` lines of the form ``linear c0 cx cy``."""
    from .geometry import LipschitzDomain
    from .shape_derivative import DomainFunctionalProblem, affine_field, constant_field

    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    probs, i = [], 0
    while i < len(lines):
        head = lines[i].split(maxsplit=1)
        if head[0] != "scene":
            raise GeomatchError(f"{where}: expected 'scene NAME', got {lines[i]!r}")
        name = head[1] if len(head) > 1 else f"scene{len(probs)}"
        rec, i = {}, i + 1
        while i < len(lines) and lines[i] != "end":
            tok = lines[i].split()
            try:
                if tok[0] in ("U", "V"):
                    k = int(tok[1])
                    pts = [[float(t) for t in ln.split()] for ln in lines[i + 1:i + 1 + k]]
                    rec[tok[0]] = LipschitzDomain(np.array(pts))
                    i += 1 + k
                    continue
                if tok[0] == "field":
                    vals = [float(t) for t in tok[2:]]
                    if tok[1] == "constant" and len(vals) == 2:
                        rec["X"] = constant_field(vals)
                    elif tok[1] == "affine" and len(vals) == 6:
                        rec["X"] = affine_field(np.reshape(vals[:4], (2, 2)), vals[4:])
                    else:
                        raise GeomatchError(f"{where}: bad field record {lines[i]!r}")
                elif tok[0] in ("f", "g"):
                    rec[tok[0]] = _linear(tok[1:], where)
                else:
                    raise GeomatchError(f"{where}: unknown record {lines[i]!r}")
            except (ValueError, IndexError) as exc:
                raise GeomatchError(f"{where}: bad record {lines[i]!r}: {exc}") from None
            i += 1
        if i >= len(lines):
            raise GeomatchError(f"{where}: scene {name!r} lacks 'end'")
        i += 1
        if not {"U", "V", "X"} <= rec.keys():
            raise GeomatchError(f"{where}: scene {name!r} needs U, V and field")
        kw = {}
        if "f" in rec:
            kw["f"], grad = rec["f"]
            kw["grad_f"] = lambda p, gr=grad: np.broadcast_to(gr, (len(p), 2)).copy()
        if "g" in rec:
            kw["g"] = rec["g"][0]
        probs.append(DomainFunctionalProblem(rec["U"], rec["V"], rec["X"], name=name, **kw))
    if not probs:
        raise GeomatchError(f"{where}: no scenes")
    return probs


def cmd_verify_lemma(args) -> int:
    from .scenes import _polygon_scene, run_lemma_suite

    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = args.m or cfg.quadrature_m
    h = args.h or cfg.lemma_h
    tol = args.tol or cfg.lemma_tol
    if args.scene:
        rows = []
        for prob in parse_scene_file(Path(args.scene).read_text(), args.scene):
            sc = _polygon_scene(prob, m)
            if sc.degenerate:
                rows.append((sc.name, np.nan, np.nan, np.nan, "DEGENERATE"))
                continue
            a, f = sc.analytic(), sc.fd(h)
            err = abs(a - f) / max(abs(a), 1e-6)
            rows.append((sc.name, a, f, err, "PASS" if err <= tol else "FAIL"))
    else:
        rows = run_lemma_suite(m, h, tol)
    table = [(name, h, f, a, err, status) for name, a, f, err, status in rows]
    io.atomic_write(out / "lemma.csv",
                    _csv_text(["scene", "h", "fd", "analytic", "rel_err", "status"], table))
    for name, _, f, a, err, status in table:
        print(f"{status:10s} {name}: analytic {a:.6e} fd {f:.6e} rel_err {err:.2e}")
    return 0 if all(r[-1] != "FAIL" for r in table) else 2


# -- ham-integrate -------------------------------------------------------------------------

def cmd_ham_integrate(args) -> int:
    from .hamiltonian import integrate_hamiltonian
    from .scenes import bounded_hamiltonian_state

    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.state:
        st = io.read_state(args.state)
    else:
        seed = cfg.seed if args.seed is None else args.seed
        st = bounded_hamiltonian_state(seed)
        io.write_state(out / "initial_state.txt", st)
    traj = integrate_hamiltonian(st, cfg.T, cfg.steps, cfg.scheme)
    H0 = traj.energies[0]
    rows = [(k, t, H, abs(H - H0) / abs(H0) if H0 else abs(H))
            for k, (t, H) in enumerate(zip(traj.times, traj.energies))]
    io.atomic_write(out / "energies.csv", _csv_text(["step", "t", "H", "rel_drift"], rows))
    io.write_state(out / "final_state.txt", traj.states[-1])
    print(f"ham-integrate: steps {cfg.steps} H0 {H0:.6e} relative drift {traj.relative_drift:.3e} -> {out}")
    return 0


# -- report -----------------------------------------------------------------------------------

def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def report_text(run_dir) -> str:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise GeomatchError(f"{run_dir} is not a directory")
    lines = [f"run directory: {run_dir}"]
    found = False
    p = run_dir / "speeds.csv"
    if p.exists():
        found = True
        _, rows = _read_csv(p)
        sp = np.array(rows, dtype=float)
        for name, col in (("||v_t||^2", 1), ("||s_t||^2", 2)):
            ref = sp[0, col]
            drift = np.max(np.abs(sp[:, col] - ref)) / ref if ref > 0 else 0.0
            lines.append(f"constant speed {name}: initial {ref:.6e} max relative drift {drift:.3e}")
    p = run_dir / "energies.csv"
    if p.exists():
        found = True
        _, rows = _read_csv(p)
        e = np.array(rows, dtype=float)
        lines.append(f"hamiltonian: {len(e) - 1} steps, H0 {e[0, 2]:.6e}, "
                     f"max relative drift {np.max(e[:, 3]):.3e}")
    p = run_dir / "lemma.csv"
    if p.exists():
        found = True
        _, rows = _read_csv(p)
        counts = {s: sum(r[-1] == s for r in rows) for s in ("PASS", "FAIL", "DEGENERATE")}
        lines.append("derivation lemma FD agreement: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
        for r in rows:
            lines.append(f"  {r[-1]:10s} {r[0]} rel_err {float(r[4]):.2e}")
    p = run_dir / "energy_history.csv"
    if p.exists():
        found = True
        _, rows = _read_csv(p)
        e = np.array(rows, dtype=float)
        a0, a1 = e[0, 3], e[-1, 3]
        red = 1.0 - a1 / a0 if a0 > 0 else 0.0
        lines.append(f"matching: {len(e) - 1} iterations, energy {e[0, 1]:.6e} -> {e[-1, 1]:.6e}, "
                     f"attachment reduction {100 * red:.2f}%")
        for row in e:
            lines.append(f"  iter {int(row[0])} energy {row[1]:.6e} kinetic {row[2]:.6e} "
                         f"attachment {row[3]:.6e}")
    if not found:
        raise GeomatchError(f"{run_dir} holds no geomatch outputs")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    text = report_text(args.run_dir)
    sys.stdout.write(text)
    if args.out:
        io.atomic_write(args.out, text)
    return 0


# -- wiring ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geomatch", description="Geodesic matching of piecewise-Lipschitz images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--out-dir", help="output directory (default: output_dir from the config)")

    sp = sub.add_parser("shoot", help="shoot from an image and initial momenta")
    sp.add_argument("--image", required=True)
    sp.add_argument("--sidecar")
    sp.add_argument("--momenta", required=True)
    common(sp)
    sp.set_defaults(func=cmd_shoot)

    sp = sub.add_parser("match", help="match a source image to a target")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--source-sidecar")
    sp.add_argument("--target-sidecar")
    sp.add_argument("--grid-stride", type=int, default=4, help="spacing of overlay grid lines")
    sp.add_argument("--quiet", action="store_true", help="no per-iteration lines")
    common(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("verify-lemma", help="check the domain-functional derivative against FD")
    sp.add_argument("--scene", help="scene file (default: the bundled suite)")
    sp.add_argument("--m", type=int)
    sp.add_argument("--h", type=float)
    sp.add_argument("--tol", type=float)
    common(sp)
    sp.set_defaults(func=cmd_verify_lemma)

    sp = sub.add_parser("ham-integrate", help="integrate the Hamiltonian system")
    sp.add_argument("--state", help="state file (default: a random bounded state)")
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_ham_integrate)

    sp = sub.add_parser("report", help="summarise a completed run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="also write the summary to this file")
    sp.set_defaults(func=cmd_report)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        io.thread_cap()
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return 1
    except NumericalError as exc:
        print(f"geomatch: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (GeomatchError, OSError, ValueError) as exc:
        print(f"geomatch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
