import numpy as np
import pytest

from geomatch.geodesic import (MomentumTriple, ShootingContext, path_distance, path_size, picard_step,
                               relative_drift, shoot, speed_profile, transport_momentum,
                               velocities_from_momenta, zero_path)
from geomatch.geometry import grid_points, project
from geomatch.kernels import KernelSpec, ParticleField, field_eval, kernel_matrix, rkhs_norm_sq
from geomatch.scenes import disk_image, disk_partition

KV, KS = KernelSpec(0.15), KernelSpec(0.25, 1)


def smooth_disk(n=12):
    p = grid_points(n)
    inside = (0.7 + 0.2 * np.exp(-np.sum((p - 0.5) ** 2, axis=1) / 0.02)).reshape(n, n)
    outside = (0.1 + 0.2 * p[:, 0] * p[:, 1]).reshape(n, n)
    return project([inside, outside], disk_partition((0.5, 0.5), 0.25, 16))


@pytest.fixture(scope="module")
def scene():
    img = smooth_disk()
    return img, ShootingContext(img, KV, KS)


def random_momenta(ctx, seed, contrast=1.0, scale=1.0):
    rng = np.random.default_rng(seed)
    n2 = ctx.n ** 2
    mom = MomentumTriple(rng.normal(size=(n2, 2)), rng.normal(size=(ctx.K, 2)), contrast * rng.normal(size=n2))
    W = np.concatenate([np.full(2 * n2, ctx.grid_weight), np.repeat(ctx.curve_weights, 2),
                        np.full(n2, ctx.grid_weight)])
    return mom.scaled(scale / np.sqrt(np.sum(W * mom.flat() ** 2)))


def test_momentum_triple_flat_roundtrip_and_validation(scene):
    _, ctx = scene
    m = random_momenta(ctx, 0)
    back = m.unflat(m.flat())
    np.testing.assert_array_equal(back.flat(), m.flat())
    assert MomentumTriple.zeros(ctx.n, ctx.K).is_zero()
    with pytest.raises(ValueError):
        MomentumTriple([[np.nan, 0]], np.zeros((0, 2)), [0.0])


def test_zero_momenta_leave_everything_fixed(scene):
    img, ctx = scene
    tr = shoot(img, MomentumTriple.zeros(ctx.n, ctx.K), 4, context=ctx)
    for a, b in zip(tr.final_image.intensities, img.intensities):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(tr.raw["qs"][-1], tr.raw["qs"][0])
    assert np.all(speed_profile(tr)[:, 1:] == 0)
    v, s = velocities_from_momenta(tr, MomentumTriple.zeros(ctx.n, ctx.K), 2)
    assert rkhs_norm_sq(v) == 0 and rkhs_norm_sq(s) == 0
    for t, pa, pb, pc in transport_momentum(MomentumTriple.zeros(ctx.n, ctx.K), tr):
        assert not (np.any(pa) or np.any(pb) or np.any(pc))


def test_single_grid_node_velocity(scene):
    img, ctx = scene
    mom = MomentumTriple.zeros(ctx.n, ctx.K)
    j = 40
    alpha = np.array([0.3, -0.7])
    mom.p_a[j] = alpha
    tr = shoot(img, mom, 20, context=ctx)
    v, _ = velocities_from_momenta(tr, mom, 0)
    x = np.array([0.31, 0.62])
    expected = ctx.grid_weight * kernel_matrix(KV, x, ctx.grid[j])[0, 0] * alpha
    np.testing.assert_allclose(field_eval(v, x), expected, rtol=1e-12)
    # one particle: the kinetic energy is exactly w^2 |alpha|^2 / lambda
    sp = speed_profile(tr)
    np.testing.assert_allclose(sp[:, 1], ctx.grid_weight ** 2 * alpha @ alpha, rtol=1e-9)


def test_initial_speed_is_gram_double_sum(scene):
    img, ctx = scene
    mom = random_momenta(ctx, 3)
    tr = shoot(img, mom, 4, context=ctx)
    v, _ = velocities_from_momenta(tr, mom, 0)
    nodes = np.vstack([ctx.grid, ctx.curve_nodes])
    a = ctx.active_weights()[:, None] * np.vstack([mom.p_a, mom.p_b])
    K = kernel_matrix(KV, nodes, nodes)
    assert rkhs_norm_sq(v) == pytest.approx(np.sum(a * (K @ a)), rel=1e-12)
    assert speed_profile(tr)[0, 1] == pytest.approx(rkhs_norm_sq(v), rel=1e-12)


def test_contrast_only_keeps_geometry(scene):
    img, ctx = scene
    mom = MomentumTriple.zeros(ctx.n, ctx.K)
    mom.p_c[:] = np.random.default_rng(1).normal(size=ctx.n ** 2)
    tr = shoot(img, mom, 6, context=ctx)
    np.testing.assert_array_equal(tr.raw["qs"][-1], tr.raw["qs"][0])
    np.testing.assert_array_equal(tr.final_image.jump.a, img.jump.a)
    assert not np.allclose(tr.final_image.intensities[0], img.intensities[0])


def test_shoot_self_convergence(scene):
    img, ctx = scene
    mom = random_momenta(ctx, 4, scale=0.5)
    a = shoot(img, mom, 40, context=ctx).raw["qs"][-1]
    b = shoot(img, mom, 80, context=ctx).raw["qs"][-1]
    assert np.max(np.abs(a - b)) <= 1e-5


def test_transported_momenta_rebuild_the_velocity(scene):
    img, ctx = scene
    mom = random_momenta(ctx, 5)
    tr = shoot(img, mom, 10, context=ctx)
    series = transport_momentum(mom, tr)
    t0, pa0, pb0, pc0 = series[0]
    np.testing.assert_array_equal(pa0, mom.p_a)
    np.testing.assert_array_equal(pb0, mom.p_b)
    probe = grid_points(7)
    for k in (0, 5, 10):
        t, pa, pb, pc = series[k]
        st = tr.states[k]
        v_ref, s_ref = velocities_from_momenta(tr, mom, k)
        nodes = np.vstack([st.grid_flow.positions, st.curve_flow.positions])
        v = ParticleField(nodes, ctx.active_weights()[:, None] * np.vstack([pa, pb]), KV)
        ref = field_eval(v_ref, probe)
        assert np.max(np.abs(field_eval(v, probe) - ref)) <= 1e-6 * np.max(np.abs(ref))
        s = ParticleField(st.contrast_flow.values, ctx.grid_weight * pc, KS)
        z = np.linspace(0, 1, 9)[:, None]
        sr = field_eval(s_ref, z)
        assert np.max(np.abs(field_eval(s, z) - sr)) <= 1e-6 * np.max(np.abs(sr))


def test_speed_is_conserved(scene):
    img, ctx = scene
    mom = random_momenta(ctx, 6, contrast=10.0)
    dv, ds = relative_drift(shoot(img, mom, 40, context=ctx))
    assert dv <= 1e-3 and ds <= 1e-3


def test_picard_zero_momenta_maps_to_zero(scene):
    img, ctx = scene
    cand = shoot(img, random_momenta(ctx, 7), 4, T=0.1, context=ctx)
    new = picard_step((cand.v_path, cand.s_path), MomentumTriple.zeros(ctx.n, ctx.K), img, 0.1, 4, context=ctx)
    assert path_size(new) == 0.0


def test_picard_fixed_point_of_shoot(scene):
    img, ctx = scene
    mom = random_momenta(ctx, 8)
    tr = shoot(img, mom, 8, T=0.1, context=ctx)
    new = picard_step((tr.v_path, tr.s_path), mom, img, 0.1, 8, context=ctx)
    for pa, pb in ((new[0], tr.v_path), (new[1], tr.s_path)):
        q = max(np.abs(f.covectors).max() for f in pb.fields)
        for f, g in zip(pa.fields, pb.fields):
            assert np.max(np.abs(f.nodes - g.nodes)) <= 1e-10
            assert np.max(np.abs(f.covectors - g.covectors)) <= 1e-10 * q
    assert path_distance(new, (tr.v_path, tr.s_path)) <= 1e-6 * path_size(new)


def test_picard_rejects_bad_candidates(scene):
    img, ctx = scene
    with pytest.raises(ValueError):
        picard_step(zero_path(ctx, 0.1, 4), random_momenta(ctx, 0), img, 0.1, 5, context=ctx)
    with pytest.raises(ValueError):
        picard_step(zero_path(ctx, 2.0, 4), random_momenta(ctx, 0), img, 2.0, 4, context=ctx)


def test_shoot_validates_shapes(scene):
    img, ctx = scene
    with pytest.raises(ValueError):
        shoot(img, MomentumTriple.zeros(ctx.n + 1, ctx.K), 4, context=ctx)
    with pytest.raises(ValueError):
        shoot(img, MomentumTriple.zeros(ctx.n, ctx.K), 0, context=ctx)
