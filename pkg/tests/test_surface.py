import numpy as np
import pytest

from conic_ricci import (ModelError, ModelSpec, build_cone_fixture,
                         build_model, chart_sync, geodesic_distance,
                         laplacian_apply, scalar_curvature, total_curvature)
from conic_ricci.surface import TAG_HOLE, distance_field


# ---------------------------------------------------------------------------
# construction and validation
# ---------------------------------------------------------------------------

def test_rejects_nonnegative_euler_characteristic():
    with pytest.raises(ModelError, match="chi"):
        build_model(ModelSpec(punctures=0, angles=()))


def test_rejects_bad_angles():
    with pytest.raises(ModelError):
        build_model(ModelSpec(angles=(-1.0,)))
    with pytest.raises(ModelError):
        build_model(ModelSpec(punctures=2, angles=(0.5,), resolution=64))


def test_rejects_close_punctures():
    with pytest.raises(ModelError, match="2\\*r_out"):
        build_model(ModelSpec(punctures=2, angles=(0.5, 0.5), resolution=64,
                              puncture_xy=[(0.4, 0.5), (0.6, 0.5)]))


def test_rejects_small_truncation():
    with pytest.raises(ModelError, match="rho_max"):
        build_model(ModelSpec(resolution=64, rho_max=3.0))


def test_rejects_coarse_grids():
    with pytest.raises(ModelError):
        build_model(ModelSpec(resolution=12))
    with pytest.raises(ModelError):
        build_model(ModelSpec(resolution=24))
    # the cone fixture keeps the global floor of 16
    build_cone_fixture(alpha=1.0, resolution=16, length=3.0)


def test_gauss_bonnet_single_end(model48):
    target = 4 * np.pi * (-1 - 0.5)
    assert model48.gauss_bonnet_target() == pytest.approx(target)
    assert model48.ops.gb_defect / abs(target) < 5e-3


def test_gauss_bonnet_euclidean_end():
    m = build_model(ModelSpec(angles=(1.0,), resolution=48, rho_max=12.0))
    tc = total_curvature(m, np.ones(m.n_nodes))
    assert tc == pytest.approx(-8 * np.pi, rel=5e-3)


def test_gauss_bonnet_two_ends_refinement():
    # discrete sum against the closed form under refinement; the fitted
    # order must be at least second (the telescoped flux superconverges)
    target = 4 * np.pi * (-2 - 0.5)
    defects = []
    Ns = (32, 48, 64)
    for N in Ns:
        m = build_model(ModelSpec(punctures=2, angles=(0.25, 0.25),
                                  resolution=N, rho_max=14.0))
        defects.append(abs(total_curvature(m, np.ones(m.n_nodes)) - target))
    slope = np.polyfit(np.log(1.0 / np.array(Ns)), np.log(defects), 1)[0]
    assert defects[-1] / abs(target) < 5e-3
    assert slope >= 1.7


def test_model_is_immutable(model48):
    with pytest.raises(ValueError):
        model48.background_curvature[0] = 1.0
    with pytest.raises(ValueError):
        model48.area_weights[0] = 1.0


def test_area_weights_positive_on_active(model48):
    assert np.all(model48.area_weights[model48.active_mask] > 0)


def test_background_exactly_conic(model48):
    # R0 vanishes identically on the exactly conic part of the end
    on_end = model48.ops.end_id == 0
    conic = on_end & (model48.ops.rho_hat
                      >= -np.log(model48.spec.r_in) + 0.2)
    assert np.max(np.abs(model48.background_curvature[conic])) < 1e-12


# ---------------------------------------------------------------------------
# laplacian
# ---------------------------------------------------------------------------

def test_laplacian_kills_constants(model48):
    lap = laplacian_apply(model48, np.full(model48.n_nodes, 3.3))
    assert np.max(np.abs(lap)) < 1e-9


def test_laplacian_core_coordinate_harmonic(model48):
    # x is flat-harmonic away from the periodic seam
    x = np.zeros(model48.n_nodes)
    core = model48.charts[0]
    N = core.resolution[0]
    x[core.slice] = core.node_coordinates[:, 0]
    for c in model48.charts[1:]:
        # same global function expressed on the end charts
        j = model48.charts.index(c) - 1
        p = model48.ends[j].puncture
        rho = c.node_coordinates[:, 0]
        th = c.node_coordinates[:, 1]
        x[c.slice] = (p[0] + np.exp(-rho) * np.cos(th)) % 1.0
    lap = laplacian_apply(model48, x)
    ix = np.arange(model48.n_nodes)
    interior_core = model48.interior_mask.copy()
    interior_core[N * N:] = False
    away = interior_core & ((ix // N) % N >= 1) & ((ix // N) % N <= N - 2)
    assert np.max(np.abs(lap[away])) < 1e-8


def test_laplacian_rho_harmonic_on_cone(fixture64):
    rho = fixture64.ops.rho_hat
    lap = laplacian_apply(fixture64, rho)
    assert np.max(np.abs(lap[fixture64.interior_mask])) < 1e-12


def test_laplacian_rejects_nonfinite(model48):
    bad = np.ones(model48.n_nodes)
    bad[10] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        laplacian_apply(model48, bad)


def test_laplacian_flags_unsynchronized(model48):
    f = np.sin(7.0 * model48.ops.rho_hat)
    f = chart_sync(model48, f)
    f2 = f.copy()
    f2[model48.ops.idx_overlap] += 0.8 * (np.max(f) - np.min(f))
    with pytest.raises(ValueError, match="synchronized"):
        laplacian_apply(model48, f2)
    laplacian_apply(model48, f)  # synced data passes


def _core_bump(model, center, radius):
    core = model.charts[0]
    xy = core.node_coordinates
    d = np.hypot(xy[:, 0] - center[0], xy[:, 1] - center[1])
    out = np.zeros(model.n_nodes)
    out[core.slice] = np.clip(1 - d / radius, 0, 1) ** 3
    return out


def test_laplacian_symmetry_and_divergence(model48):
    # weighted symmetry and zero total for compactly supported core fields
    f = _core_bump(model48, (0.15, 0.15), 0.1)
    g = _core_bump(model48, (0.25, 0.2), 0.1)
    w = model48.area_weights
    lf = laplacian_apply(model48, f)
    lg = laplacian_apply(model48, g)
    lhs = float(np.dot(lf * w, g))
    rhs = float(np.dot(f * w, lg))
    scale = max(abs(lhs), abs(rhs), 1.0)
    assert abs(lhs - rhs) / scale < 1e-12
    assert abs(float(np.dot(lf, w))) < 1e-8


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

def test_scalar_curvature_identity(model48, ones):
    R = scalar_curvature(model48, ones)
    assert np.array_equal(R[model48.interior_mask],
                          model48.background_curvature[model48.interior_mask])


def test_scalar_curvature_constant_scaling(model48, ones):
    R = scalar_curvature(model48, 2.0 * ones)
    expected = model48.background_curvature / 2.0
    mi = model48.interior_mask
    assert np.allclose(R[mi], expected[mi], rtol=0, atol=1e-10)


def test_scalar_curvature_rejects_nonpositive(model48, ones):
    bad = ones.copy()
    bad[5] = -1.0
    with pytest.raises(ValueError, match="positive"):
        scalar_curvature(model48, bad)


def test_conformal_identity_two_paths(model48):
    # u R + Delta_0 log u - R0 = 0 holds by construction: the curvature from
    # scalar_curvature agrees with composed log/laplacian calls exactly
    rng = np.random.default_rng(3)
    u = chart_sync(model48, 1.5 + 0.2 * np.sin(
        5 * model48.ops.rho_hat + rng.uniform(0, 2 * np.pi)))
    u = np.exp(chart_sync(model48, np.log(u)))
    R = scalar_curvature(model48, u)
    lap = laplacian_apply(model48, np.log(u), check_sync=False)
    mi = model48.interior_mask
    resid = u[mi] * R[mi] + lap[mi] - model48.background_curvature[mi]
    assert np.max(np.abs(resid)) < 1e-12


def test_total_curvature_conformal_invariance(model48, ones):
    a = total_curvature(model48, ones)
    b = total_curvature(model48, 4.2 * ones)
    assert a == pytest.approx(b, abs=1e-9)


# ---------------------------------------------------------------------------
# chart synchronization
# ---------------------------------------------------------------------------

def test_chart_sync_constants(model48):
    f = np.full(model48.n_nodes, 2.5)
    out = chart_sync(model48, f)
    assert np.allclose(out, f, atol=1e-13)


def _global_smooth(model):
    out = np.empty(model.n_nodes)
    core = model.charts[0]
    xy = core.node_coordinates
    out[core.slice] = np.sin(2 * np.pi * xy[:, 0]) * np.sin(2 * np.pi * xy[:, 1])
    for j, c in enumerate(model.charts[1:]):
        p = model.ends[j].puncture
        rho = c.node_coordinates[:, 0]
        th = c.node_coordinates[:, 1]
        x = p[0] + np.exp(-rho) * np.cos(th)
        y = p[1] + np.exp(-rho) * np.sin(th)
        out[c.slice] = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return out


def test_chart_sync_second_order():
    errs = []
    Ns = (32, 64, 128)
    for N in Ns:
        m = build_model(ModelSpec(resolution=N, rho_max=14.0))
        f = _global_smooth(m)
        synced = chart_sync(m, f)
        ov = m.ops.idx_overlap
        errs.append(float(np.max(np.abs(synced[ov] - f[ov]))))
    slope = np.polyfit(np.log(1.0 / np.array(Ns)), np.log(errs), 1)[0]
    assert 1.6 < slope < 2.6


def test_chart_sync_rejects_partial_fields(model48):
    with pytest.raises(ValueError, match="per chart"):
        chart_sync(model48, [np.zeros(model48.charts[0].size)])


def test_chart_sync_list_round_trip(model48):
    f = _global_smooth(model48)
    parts = [f[c.slice].copy() for c in model48.charts]
    out = chart_sync(model48, parts)
    glob = np.concatenate(out)
    assert np.allclose(glob, chart_sync(model48, f), atol=1e-13)


# ---------------------------------------------------------------------------
# geodesic distance
# ---------------------------------------------------------------------------

def test_distance_identity(model48, ones):
    i = model48.ops.anchor_index
    assert geodesic_distance(model48, ones, i, i) == 0.0


def test_distance_radial_on_cone(fixture64):
    u = np.ones(fixture64.n_nodes)
    nrho, ntheta = fixture64.charts[0].resolution
    i1 = 5 * ntheta + 3
    i2 = 40 * ntheta + 3
    rho1 = fixture64.ops.rho_hat[i1]
    rho2 = fixture64.ops.rho_hat[i2]
    alpha = fixture64.ends[0].angle_alpha
    exact = abs(np.exp(alpha * rho2) - np.exp(alpha * rho1)) / alpha
    got = geodesic_distance(fixture64, u, i1, i2)
    assert got == pytest.approx(exact, rel=2e-3)


def test_distance_flat_pairs_against_deck_translates():
    # oracle: exact torus distance by minimizing over deck translates;
    # the 8-neighbor graph overestimates by at most sec(pi/8) ~ 1.0824
    m = build_model(ModelSpec(resolution=128))
    u = np.ones(m.n_nodes)
    rng = np.random.default_rng(11)
    N = m.charts[0].resolution[0]
    xy = m.charts[0].node_coordinates
    checked = 0
    while checked < 6:
        i1, i2 = rng.integers(0, N * N, 2)
        if m.boundary_tags[i1] == TAG_HOLE or m.boundary_tags[i2] == TAG_HOLE:
            continue
        d = xy[i2] - xy[i1]
        d -= np.round(d)
        exact = float(np.hypot(*d))
        if exact < 0.2:
            continue
        # keep pairs whose straight segment stays clear of the cone bump
        p = np.array(m.ends[0].puncture)
        ts = np.linspace(0, 1, 64)
        seg = xy[i1] + ts[:, None] * d
        dp = seg - p
        dp -= np.round(dp)
        if np.min(np.hypot(dp[:, 0], dp[:, 1])) < m.spec.r_out + 0.03:
            continue
        got = geodesic_distance(m, u, int(i1), int(i2))
        assert exact - 1e-9 <= got <= 1.083 * exact
        checked += 1


def test_distance_monotone_in_u(model48, ones):
    rng = np.random.default_rng(5)
    shrink = ones * (0.4 + 0.5 * rng.uniform(size=model48.n_nodes))
    src = model48.ops.anchor_index
    d1 = distance_field(model48, ones, [src])[0]
    d2 = distance_field(model48, shrink, [src])[0]
    act = model48.active_mask
    assert np.all(d2[act] <= d1[act] + 1e-12)


def test_distance_rejects_hole_nodes(model48, ones):
    holes = np.flatnonzero(model48.hole_mask)
    with pytest.raises(ValueError, match="hole"):
        geodesic_distance(model48, ones, int(holes[0]),
                          model48.ops.anchor_index)
