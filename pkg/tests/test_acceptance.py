"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary)."""
import time

import numpy as np
import pytest

from geomatch.flows import FieldPath, check_flow_bounds
from geomatch.geodesic import (MomentumTriple, ShootingContext, path_distance, path_size, picard_step,
                               relative_drift, shoot, zero_path)
from geomatch.geometry import grid_points, project
from geomatch.hamiltonian import (component_errors, hamiltonian_gradient, hamiltonian_value,
                                  integrate_hamiltonian, random_state, reconstruct)
from geomatch.kernels import (KernelSpec, ParticleField, eval_k, field_eval, field_jacobian, grad1_k,
                              kernel_matrix, rkhs_norm_sq)
from geomatch.matching import EnergyModel, MatchConfig, match
from geomatch.scenes import (bounded_hamiltonian_state, disk_image, disk_partition, halves_partition,
                             pure_contrast, run_lemma_suite, translated_disk, translated_gaussian)

KV, KS = KernelSpec(0.15), KernelSpec(0.25, 1)


def unit_momenta(ctx, seed):
    """Gaussian triple scaled to unit ``L^2(mu)`` norm."""
    rng = np.random.default_rng(seed)
    n2 = ctx.n ** 2
    mom = MomentumTriple(rng.normal(size=(n2, 2)), rng.normal(size=(ctx.K, 2)), rng.normal(size=n2))
    W = np.concatenate([np.full(2 * n2, ctx.grid_weight), np.repeat(ctx.curve_weights, 2),
                        np.full(n2, ctx.grid_weight)])
    return mom.scaled(1.0 / np.sqrt(np.sum(W * mom.flat() ** 2)))


def test_c1_derivation_lemma(criterion):
    t0 = time.perf_counter()
    rows = run_lemma_suite(512, 1e-3, 1e-2)
    dt = time.perf_counter() - t0
    checked = [r for r in rows if r[4] != "DEGENERATE"]
    worst = max(r[3] for r in checked)
    ok = len(rows) >= 6 and len(checked) >= 6 and all(r[4] == "PASS" for r in checked) and dt <= 60
    assert criterion(1, ok, f"{len(checked)} scenes (+{len(rows) - len(checked)} degenerate), "
                            f"max rel err {worst:.2e}, {dt:.1f}s")


def test_c2_constant_speed(criterion):
    n = 16
    p = grid_points(n)
    inside = (0.7 + 0.2 * np.exp(-np.sum((p - 0.5) ** 2, axis=1) / 0.02)).reshape(n, n)
    outside = (0.1 + 0.2 * p[:, 0] * p[:, 1]).reshape(n, n)
    img = project([inside, outside], disk_partition((0.5, 0.5), 0.25, 32))
    ctx = ShootingContext(img, KV, KS)
    t0 = time.perf_counter()
    worst, ratio = 0.0, np.inf
    for seed in range(10):
        mom = unit_momenta(ctx, seed)
        # amplified contrast part so the s-drift sits above round-off
        mom = MomentumTriple(mom.p_a, mom.p_b, 10.0 * mom.p_c)
        d40 = relative_drift(shoot(img, mom, 40, context=ctx))
        d80 = relative_drift(shoot(img, mom, 80, context=ctx))
        worst = max(worst, *d40)
        ratio = min(ratio, *(a / b for a, b in zip(d40, d80)))
    dt = time.perf_counter() - t0
    ok = ctx.K == 32 and worst <= 1e-3 and ratio >= 8 and dt <= 120
    assert criterion(2, ok, f"max drift {worst:.2e} (N=40), min shrink {ratio:.1f}x (N=80), {dt:.1f}s")


@pytest.fixture(scope="module")
def hamiltonian_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in range(10):
        st = bounded_hamiltonian_state(seed)
        runs.append((st, integrate_hamiltonian(st, 1.0, 40), integrate_hamiltonian(st, 1.0, 80)))
    return runs, time.perf_counter() - t0


def test_c3_hamiltonian_conservation(criterion, hamiltonian_runs):
    runs, dt = hamiltonian_runs
    drifts = [(a.relative_drift, b.relative_drift) for _, a, b in runs]
    worst = max(d for d, _ in drifts)
    # fourth order: halving the step shrinks the drift by 2^4, allow 2^3.5
    shrink = min(a / b for a, b in drifts)
    ok = worst <= 1e-3 and shrink >= 2 ** 3.5 and dt <= 120 and all(s.r == 2 for s, _, _ in runs)
    assert criterion(3, ok, f"max drift {worst:.2e} (N=40), min shrink {shrink:.1f}x (N=80), {dt:.1f}s")


def test_c4_reconstruct_agreement(criterion, hamiltonian_runs):
    runs, _ = hamiltonian_runs
    worst, refined_ok, pairs = 0.0, True, []
    for seed, (st, tr40, _) in enumerate(runs):
        ks = [10, 20, 30, 40]
        rc = reconstruct(st, 1.0, 40, sample_steps=ks)
        err = [max(component_errors(a, tr40.states[k]).values()) for a, k in zip(rc.states, ks)]
        worst = max(worst, max(err))
        # joint space-time refinement: n 32 -> 40, N 40 -> 50, compared at t = 1/2 and 1
        st2 = bounded_hamiltonian_state(seed, n=40)
        tr50 = integrate_hamiltonian(st2, 1.0, 50)
        rc2 = reconstruct(st2, 1.0, 50, sample_steps=[25, 50])
        fine = max(max(component_errors(a, tr50.states[k]).values()) for a, k in zip(rc2.states, (25, 50)))
        coarse = max(err[1], err[3])
        pairs.append((coarse, fine))
        refined_ok &= fine < coarse
    ok = worst <= 1e-2 and refined_ok
    shrink = min(c / f for c, f in pairs)
    assert criterion(4, ok, f"max rel err {worst:.2e} (N=40), refined/coarse <= {1 / shrink:.2f} on all 10 states")


def test_c5_picard_contraction(criterion):
    img = disk_image(16, (0.5, 0.5), 0.25)
    ctx = ShootingContext(img, KV, KS)
    T, steps = 0.1, 10
    worst_ratio, worst_fixed = 0.0, 0.0
    for seed in range(3):
        mom = unit_momenta(ctx, seed)
        P = zero_path(ctx, T, steps)
        dist = []
        for _ in range(5):
            Q = picard_step(P, mom, img, T, steps, context=ctx)
            dist.append(path_distance(Q, P))
            P = Q
        assert min(dist) > 0
        worst_ratio = max(worst_ratio, *(b / a for a, b in zip(dist, dist[1:])))
        tr = shoot(img, mom, steps, T=T, context=ctx)
        fp = (tr.v_path, tr.s_path)
        worst_fixed = max(worst_fixed, path_distance(picard_step(fp, mom, img, T, steps, context=ctx), fp)
                          / path_size(fp))
    ok = worst_ratio <= 0.9 and worst_fixed <= 1e-6
    assert criterion(5, ok, f"max successive ratio {worst_ratio:.3f}, fixed-point move {worst_fixed:.1e}")


def test_c6_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name, (I0, It), tol in (("smooth", translated_gaussian(32), 1e-2), ("jump", translated_disk(32), 5e-2)):
        model = EnergyModel(I0, It, MatchConfig(sigma_attach=0.1, steps=10))
        rng = np.random.default_rng(0)
        x = 0.5 * rng.normal(size=MomentumTriple.zeros(model.ctx.n, model.ctx.K).flat().size)
        mom = MomentumTriple.zeros(model.ctx.n, model.ctx.K).unflat(x)
        g = model.value_and_grad(mom)[1].flat()
        errs = []
        for _ in range(5):
            d = rng.normal(size=g.size)
            h = 1e-4 * np.linalg.norm(x) / np.linalg.norm(d)
            fd = (model.numpy_energy(mom.unflat(x + h * d))[0] - model.numpy_energy(mom.unflat(x - h * d))[0]) / (2 * h)
            errs.append(abs(g @ d - fd) / abs(fd))
        worst[name] = (max(errs), tol)
    dt = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in worst.values()) and dt <= 300
    assert criterion(6, ok, f"smooth {worst['smooth'][0]:.1e}, jump {worst['jump'][0]:.1e}, {dt:.1f}s")


def test_c7_end_to_end_matching(criterion):
    t0 = time.perf_counter()
    cfg = MatchConfig(sigma_attach=0.05, steps=10, max_iters=10)
    red = {}
    for name, scene in (("gaussian", translated_gaussian), ("disk", translated_disk)):
        res = match(*scene(32), cfg)
        A = res.attachment_history
        red[name] = 1.0 - A[-1] / A[0]
    res = match(*pure_contrast(32), cfg)
    rep = res.momentum_report()
    spatial = np.hypot(rep["p_a_l2"], rep["p_b_l2"]) / rep["p_c_l2"]
    dt = time.perf_counter() - t0
    ok = red["gaussian"] >= 0.9 and red["disk"] >= 0.8 and spatial <= 0.1 and dt <= 600
    assert criterion(7, ok, f"gaussian -{red['gaussian']:.1%}, disk -{red['disk']:.1%}, "
                            f"spatial/contrast {spatial:.3f}, {cfg.max_iters} iterations each, {dt:.0f}s")


def test_c8_flow_bounds(criterion):
    spec = KernelSpec(0.2)
    steps = 10
    times = np.linspace(0.0, 1.0, 2 * steps + 1)

    def rpath(rng, amp):
        nodes = rng.uniform(0.1, 0.9, size=(8, 2))
        a0, a1 = amp * rng.normal(size=(8, 2)), amp * rng.normal(size=(8, 2))
        return FieldPath(times, [ParticleField(nodes, (1 - t) * a0 + t * a1, spec) for t in times])

    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        u = rpath(rng, 0.3)
        if seed % 2:
            v = rpath(rng, 0.3)
        else:
            # small perturbations probe the tight end of the field bound
            v = FieldPath(times, [f + ParticleField(f.nodes, 0.05 * rng.normal(size=f.covectors.shape), spec)
                                  for f in u.fields])
        violations += not check_flow_bounds(u, v, 1.0, probe=12, steps=steps).passed
    assert criterion(8, violations == 0, f"{violations} violations on 20 pairs")


def test_c9_kernel_micro_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        s = KernelSpec(rng.uniform(0.2, 1.0))
        x, y = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
        d = rng.normal(size=2)
        h = 1e-5
        fd = (eval_k(s, x + h * d, y) - eval_k(s, x - h * d, y)) / (2 * h)
        an = grad1_k(s, x, y) @ d
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-6))
        f = ParticleField(rng.uniform(0, 1, (6, 2)), rng.normal(size=(6, 2)), s)
        fdj = (field_eval(f, x + h * d) - field_eval(f, x - h * d)) / (2 * h)
        anj = field_jacobian(f, x) @ d
        worst = max(worst, np.linalg.norm(anj - fdj) / max(np.linalg.norm(fdj), 1e-6))
    n = 8
    img = project([np.zeros((n, n)), np.ones((n, n))], halves_partition())
    for seed in range(5):
        st = random_state(np.random.default_rng(seed), img, amp_curve=0.5, amp_grid=5.0, variation=0.1,
                          curve_subdivisions=4)
        x = st.pack()
        d = np.random.default_rng(seed + 100).normal(size=x.shape)
        h = 1e-6
        fd = (hamiltonian_value(st.unpack(x + h * d)) - hamiltonian_value(st.unpack(x - h * d))) / (2 * h)
        an = np.concatenate([c.ravel() for c in hamiltonian_gradient(st)]) @ d
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-6))
    psd = True
    for _ in range(100):
        s = KernelSpec(rng.uniform(0.05, 1.0))
        pts = rng.uniform(0, 1, (rng.integers(2, 20), 2))
        K = kernel_matrix(s, pts, pts)
        f = ParticleField(pts, rng.normal(size=pts.shape), s)
        psd &= np.min(np.linalg.eigvalsh(K)) >= -1e-10 * np.max(K) and rkhs_norm_sq(f) >= 0
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and psd and dt <= 10
    assert criterion(9, ok, f"max rel err {worst:.1e}, 100 Gram draws PSD={psd}, {dt:.1f}s")
