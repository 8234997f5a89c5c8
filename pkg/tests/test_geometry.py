import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqcheck.expr import parse_expr
from pqcheck.geometry import (
    ChartDomain,
    GeodesicState,
    GeometryError,
    MetricField,
    TensorField11,
    christoffel_at,
    cov_deriv_11_at,
    grad_scalar_at,
    integrate_geodesic,
    kinetic_energy,
    metric_cov_deriv_at,
)
from pqcheck.pq_struct import A_jet_at, compute_A_at

from conftest import central_diff

XY = ["x", "y"]
SPHERE_G = MetricField([["4/(1+x^2+y^2)^2", "0"], ["0", "4/(1+x^2+y^2)^2"]], XY)
FLAT = MetricField([["1", "0"], ["0", "1"]], XY)
_DINI_G = MetricField([["x+3-y", "0"], ["0", "x+3-y"]], XY)


def christoffel_oracle(g, p, h=1e-6):
    """Christoffel symbols from finite differences of the metric values."""
    dG = central_diff(g.value, p, h)
    Ginv = np.linalg.inv(g.value(p))
    m = len(p)
    out = np.zeros((m, m, m))
    for k in range(m):
        for i in range(m):
            for j in range(m):
                out[k, i, j] = 0.5 * sum(
                    Ginv[k, l] * (dG[i, j, l] + dG[j, i, l] - dG[l, i, j]) for l in range(m)
                )
    return out


def test_domain_validation():
    with pytest.raises(GeometryError):
        ChartDomain((0,), (1,))
    with pytest.raises(GeometryError):
        ChartDomain((0, 1), (1, 1))
    box = ChartDomain((0, -1), (1, 1))
    pts = box.sample(50, seed=1)
    assert box.contains(pts).all()
    np.testing.assert_array_equal(pts, box.sample(50, seed=1))


def test_metric_must_mirror():
    with pytest.raises(GeometryError):
        MetricField([["1", "x"], ["y", "1"]], XY)


def test_flat_christoffels_vanish():
    assert np.all(christoffel_at(FLAT, [0.3, 0.7]) == 0)


def test_warped_christoffels():
    g = MetricField([["1", "0"], ["0", "x^2"]], XY)
    gam = christoffel_at(g, [2.0, 0.5])
    expected = np.zeros((2, 2, 2))
    expected[0, 1, 1] = -2.0
    expected[1, 0, 1] = expected[1, 1, 0] = 0.5
    np.testing.assert_allclose(gam, expected, atol=1e-14)
    np.testing.assert_allclose(gam, christoffel_oracle(g, np.array([2.0, 0.5])), atol=1e-8)


def test_sphere_christoffels_vanish_at_origin():
    assert np.max(np.abs(christoffel_at(SPHERE_G, [0.0, 0.0]))) < 1e-15
    np.testing.assert_allclose(christoffel_oracle(SPHERE_G, np.zeros(2)), 0, atol=1e-9)


def test_christoffels_against_oracle(dini, sphere, cp1):
    for entry in (dini, sphere, cp1):
        for p in entry.scene.sample(10, seed=3):
            for g in (entry.scene.g, entry.scene.gbar):
                got = christoffel_at(g, p)
                ref = christoffel_oracle(g, p)
                assert np.max(np.abs(got - ref)) <= 1e-6 * (1 + np.abs(ref).max())
                np.testing.assert_array_equal(got, np.swapaxes(got, -1, -2))


def test_metric_compatibility(dini, sphere, cp1, affine):
    for entry in (dini, sphere, cp1, affine):
        s = entry.scene
        for g in (s.g, s.gbar):
            pts = s.sample(100, seed=5)
            Gn = np.linalg.norm(g.value(pts), axis=(-1, -2))
            assert np.max(np.abs(metric_cov_deriv_at(g, pts)).max(axis=(1, 2, 3)) / Gn) <= 1e-9


def test_identity_and_constant_tensors_are_parallel(dini):
    g = dini.scene.g
    p = [0.4, 1.3]
    assert np.max(np.abs(cov_deriv_11_at(TensorField11([["1", "0"], ["0", "1"]], XY), g, p))) < 1e-14
    assert np.max(np.abs(cov_deriv_11_at(TensorField11([["2.5", "0"], ["0", "2.5"]], XY), g, p))) < 1e-14


def test_cov_deriv_of_A_against_differences(dini):
    s = dini.scene
    p = np.array([0.35, 1.6])
    got = cov_deriv_11_at(lambda x: A_jet_at(s, x), s.g, p)
    dA = central_diff(lambda x: compute_A_at(s, x), p)  # [i, j, k]
    gam = christoffel_oracle(s.g, p)
    A = compute_A_at(s, p)
    ref = dA + np.einsum("jil,lk->ijk", gam, A) - np.einsum("lik,jl->ijk", gam, A)
    np.testing.assert_allclose(got, ref, atol=1e-8)


def test_gradients():
    np.testing.assert_allclose(grad_scalar_at(FLAT, parse_expr("x", XY), [0.2, 0.3]), [1, 0])
    g = MetricField([["4", "0"], ["0", "1"]], XY)
    np.testing.assert_allclose(grad_scalar_at(g, parse_expr("x", XY), [0.2, 0.3]), [0.25, 0])


def test_gradient_of_trace_A(dini):
    s = dini.scene
    p = np.array([0.6, 1.2])

    def tr_jet(x):
        A, dA = A_jet_at(s, x)
        return np.trace(A), np.einsum("kii->k", dA)

    got = grad_scalar_at(s.g, tr_jet, p)
    fd = central_diff(lambda x: np.trace(compute_A_at(s, x)), p)
    ref = np.linalg.solve(s.g.value(p), fd)
    np.testing.assert_allclose(got, ref, rtol=1e-7)


def test_straight_lines_in_flat_space():
    tr = integrate_geodesic(FLAT, GeodesicState(np.array([0.1, 0.2]), np.array([0.3, -0.1])), 1.0, 1e-2)
    np.testing.assert_allclose(tr.positions, tr.times[:, None] * [0.3, -0.1] + [0.1, 0.2], atol=1e-14)
    np.testing.assert_allclose(tr.velocities, [[0.3, -0.1]] * len(tr))
    assert tr.reason == "time-elapsed"


def _energy_drift(g, x0, v0):
    tr = integrate_geodesic(g, GeodesicState(np.array(x0), np.array(v0)), 1.0, 1e-3)
    E = kinetic_energy(g, tr.positions, tr.velocities)
    return np.abs(E - E[0]).max() / E[0]


def test_sphere_energy_drift():
    v = np.array([1.0, 0.0]) / 2.0  # unit length: g = 4 Id at the origin
    assert _energy_drift(SPHERE_G, [0.0, 0.0], v) <= 1e-8


def test_dini_energy_drift(dini):
    rng = np.random.default_rng(11)
    for _ in range(3):
        x0 = dini.scene.chart.center() + 0.1 * rng.standard_normal(2)
        assert _energy_drift(dini.scene.g, x0, 0.2 * rng.standard_normal(2)) <= 1e-8


def test_leaving_the_domain(dini):
    s = dini.scene
    tr = integrate_geodesic(s.g, GeodesicState(np.array([0.9, 1.5]), np.array([1.0, 0.0])), 1.0, 1e-3, s.chart)
    assert tr.reason == "left-domain"
    assert s.chart.contains(tr.positions).all()
    assert np.all(np.diff(tr.times) > 0)


def test_bad_step():
    with pytest.raises(GeometryError):
        integrate_geodesic(FLAT, GeodesicState(np.zeros(2), np.ones(2)), 1.0, 0.0)


@settings(max_examples=8, deadline=None)
@given(
    st.floats(0.2, 0.8), st.floats(1.2, 1.8),
    st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
)
def test_reversibility(x, y, vx, vy):
    g = _DINI_G
    fwd = integrate_geodesic(g, GeodesicState(np.array([x, y]), np.array([vx, vy])), 0.5, 1e-3)
    end = fwd.state(-1)
    back = integrate_geodesic(g, GeodesicState(end.x, -end.v), 0.5, 1e-3)
    assert np.linalg.norm(back.positions[-1] - [x, y]) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_position_jumps_bounded(x, y):
    v = np.array([0.7, -0.2])
    tr = integrate_geodesic(SPHERE_G, GeodesicState(np.array([x, y]), v), 0.3, 1e-3)
    vmax = np.linalg.norm(tr.velocities, axis=1).max()
    assert np.linalg.norm(np.diff(tr.positions, axis=0), axis=1).max() <= 2 * tr.h * vmax
