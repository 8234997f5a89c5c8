"""Acceptance criteria, one test each. Every test records a PASS/FAIL line;
the lines are printed in the terminal summary (and by running this file
directly)."""

import json
import time

import numpy as np
import pytest

from pqcheck.catalog import (
    ADMITTED,
    BUILDERS,
    make_cp1_hprojective_pair,
    make_dini_pair,
    make_sphere_projective_pair,
    scene_dict,
)
from pqcheck.cli import run
from pqcheck.expr import eval_jet, evaluate
from pqcheck.geometry import GeodesicState, integrate_geodesic
from pqcheck.integrals import (
    F_c_regularized_at,
    IntegralSpec,
    PhasePoint,
    T_tensor_at,
    T_tensor_direct_at,
    commutation_report,
    conservation_report,
    exponent_probe,
    poisson_bracket_at,
)
from pqcheck.pq_struct import a_tensor, point_data, reconstruct_gbar, residual_report
from pqcheck.spectra import classify_pair, lemma_dim_check, lemma_eigenvectors_check, spectra_at

from test_expr import expression_corpus

RESULTS: list[str] = []


def record(label, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def dini():
    return make_dini_pair()


@pytest.fixture(scope="module")
def cp1():
    return make_cp1_hprojective_pair(2.0)


def test_c01_definitional_equivalence():
    worst, slowest = 0.0, 0.0
    for name in ADMITTED:
        t0 = time.perf_counter()
        scene = BUILDERS[name]().scene
        for eq in ("main", "pqproj"):
            worst = max(worst, residual_report(scene, eq, samples=1000, seed=42).max_relative)
        slowest = max(slowest, time.perf_counter() - t0)
    ok = worst <= 1e-7 and slowest <= 5.0
    record(
        "C1 definitional equivalence",
        ok,
        f"max relative residual {worst:.2e} (<= 1e-7) over {len(ADMITTED)} scenes x 2 forms, "
        f"slowest scene {slowest:.2f} s (<= 5 s)",
    )


DINI_STARTS = [([0.5, 1.5], [0.3, 0.2]), ([0.2, 1.2], [0.4, 0.3]), ([0.8, 1.8], [-0.3, -0.4])]


def test_c02_conservation(dini):
    s = dini.scene
    mu = np.array([sp.eigenvalues for sp in spectra_at(s, s.sample())])
    ts = [mu.min() - 3, mu.min() - 2, mu.min() - 1, mu.max() + 1, mu.max() + 6]
    worst = 0.0
    for x0, v0 in DINI_STARTS:
        tr = integrate_geodesic(s.g, GeodesicState(np.array(x0), np.array(v0)), 1.0, 1e-3, s.chart)
        assert tr.reason == "time-elapsed"
        rep = conservation_report(s, tr, [IntegralSpec(t) for t in ts])
        worst = max(worst, max(r.relative_drift for r in rep.results))
    aff = BUILDERS["affine"]().scene
    tr = integrate_geodesic(aff.g, GeodesicState(np.array([0.2, 0.3]), np.array([0.3, 0.4])), 1.0, 1e-3, aff.chart)
    rep = conservation_report(aff, tr, [IntegralSpec(t) for t in (-1.0, 0.0, 3.0)])
    aff_worst = max(r.relative_drift for r in rep.results)
    ok = worst <= 1e-6 and aff_worst <= 1e-8
    record(
        "C2 conservation",
        ok,
        f"Dini max drift {worst:.2e} (<= 1e-6) for t in {[round(float(t), 3) for t in ts]}, "
        f"affine drift {aff_worst:.2e} (<= 1e-8)",
    )


def test_c03_commutation(dini):
    s = dini.scene
    pairs = [(-2.0, -1.0), (0.0, 5.0), (10.0, -1.0), (5.0, 10.0), (0.0, 20.0)]
    rep = commutation_report(s, pairs, samples=100, seed=42)
    same = [poisson_bracket_at(s, t, t, PhasePoint(x, [0.3, -0.4])) for t, x in zip((0.0, 5.0), s.sample(2))]
    worst = max(rep.max_relative)
    ok = worst <= 1e-5 and all(b == 0.0 for b in same)
    record("C3 commutation", ok, f"max |{{F_t,F_s}}|/scale {worst:.2e} (<= 1e-5) on 5 pairs x 100 points; t = s gives {same}")


def test_c04_smooth_extension(dini):
    s = dini.scene
    c = 3.5
    off = 0.0
    for p in s.sample(1000):
        if abs(p[0] + 3 - c) < 1e-3:
            continue
        T, ref = T_tensor_at(s, c, 1, p), T_tensor_direct_at(s, c, 1, p)
        off = max(off, np.abs(T - ref).max() / np.abs(ref).max())
    tr = integrate_geodesic(s.g, GeodesicState(np.array([0.3, 1.5]), np.array([0.6, 0.1])), 1.0, 1e-3, s.chart)
    crossed = (tr.positions[0, 0] + 3 - c) * (tr.positions[-1, 0] + 3 - c) < 0
    r = conservation_report(s, tr, [IntegralSpec(c, regularized=True, k=1)]).results[0]
    ok = off <= 1e-9 and crossed and r.relative_drift <= 1e-5 and r.max_abs_ratio <= 10
    record(
        "C4 smooth extension of T",
        ok,
        f"T vs singular form {off:.2e} (<= 1e-9) off H; across H (crossed={crossed}) drift "
        f"{r.relative_drift:.2e} (<= 1e-5), max |F|/|F0| {r.max_abs_ratio:.3f} (<= 10)",
    )


def test_c05_exponent_experiment(dini, cp1):
    pos = exponent_probe(dini.scene, GeodesicState(np.array([0.3, 1.5]), np.array([0.6, 0.1])), 3.5, k=2)
    neg = exponent_probe(cp1.scene, GeodesicState(np.array([0.1, 0.0]), np.array([1.0, 0.0])), 0.6, k=1)
    m_pos, m_neg = np.abs(pos.values), np.abs(neg.values)
    to_zero = bool(np.all(np.diff(m_pos) < 0)) and m_pos[-1] < 1e-3 * abs(pos.far_value)
    blow = m_neg[-1] / abs(neg.far_value)
    ok = to_zero and blow > 1e6
    record(
        "C5 exponent experiment",
        ok,
        f"e > 0: |F_c| decreases monotonically to {m_pos[-1]:.2e} (far {abs(pos.far_value):.2e}); "
        f"e < 0: |F_c| reaches {blow:.2e} x far value (> 1e6)",
    )


def test_c06_gradients_are_eigenvectors(dini):
    rep = lemma_eigenvectors_check(dini.scene, dini.scene.sample(1000))
    ok = rep.passed and rep.checked == 1000
    record(
        "C6 eigenvalue gradients",
        ok,
        f"orthogonality {rep.metrics['max_orthogonality_rel']:.2e} (<= 1e-7), eigenspace "
        f"{rep.metrics['max_eigenspace_rel']:.2e} (<= 1e-6) at {rep.checked} samples",
    )


def test_c07_multiplicities(dini, cp1):
    d = lemma_dim_check(dini.scene, dini.scene.sample())
    c = lemma_dim_check(cp1.scene, cp1.scene.sample())
    dm, cm = d.metrics["nonconstant_multiplicities"], c.metrics["nonconstant_multiplicities"]
    sv = c.metrics["min_restricted_omega_singular_value_rel"]
    ok = d.passed and c.passed and dm == [[1], [1]] and cm == [[2]] and sv > 1e-8
    record("C7 multiplicities", ok, f"Dini {dm}, CP1 {cm}, CP1 restricted g(P.,.) min singular value {sv:.3f} (> 1e-8)")


def test_c08_eps_zero_is_projective():
    scenes = [make_dini_pair(), make_sphere_projective_pair(), make_sphere_projective_pair(np.diag([1.0, 1.0, 2.0]))]
    verdicts, worst_pl, worst_res = [], 0.0, 0.0
    for e in scenes:
        cl = classify_pair(e.scene)
        verdicts.append(cl.verdict)
        d = point_data(e.scene, e.scene.sample())
        pl = np.linalg.norm(np.einsum("nij,nj->ni", d.P, d.Lambda), axis=-1)
        worst_pl = max(worst_pl, float((pl / (1 + np.linalg.norm(d.Lambda, axis=-1))).max()))
        worst_res = max(worst_res, cl.evidence["projective_residual"]["max_relative"])
    ok = all(v == "projective_eps0" for v in verdicts) and worst_pl <= 1e-8 and worst_res <= 1e-7
    record(
        "C8 eps = 0 implies projective",
        ok,
        f"verdicts {verdicts}, |P Lambda| {worst_pl:.1e} (<= 1e-8), projective residual {worst_res:.2e} (<= 1e-7)",
    )


def test_c09_round_trip():
    worst = 0.0
    names = []
    for make in (make_dini_pair, make_sphere_projective_pair, make_cp1_hprojective_pair):
        e = make()
        names.append(e.name)
        pts = e.scene.sample(1000)
        A = e.a_field(pts)
        back = a_tensor(e.scene.g.value(pts), reconstruct_gbar(e.scene.g, e.a_field, e.scene.epsilon)(pts), e.scene.epsilon)
        worst = max(worst, float((np.abs(back - A).max(axis=(1, 2)) / np.abs(A).max(axis=(1, 2))).max()))
    record("C9 reconstruction round trip", worst <= 1e-10, f"max relative error {worst:.2e} (<= 1e-10) on {names}")


def test_c10_negative_controls(tmp_path, capsys):
    codes, residuals = {}, {}
    for name in ("dini-perturbed", "cp1-even-eps", "eps-one"):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(scene_dict(name)))
        out = tmp_path / f"{name}-report.json"
        cmd = "validate" if name == "eps-one" else "residuals"
        codes[name] = run([cmd, str(path), "--out", str(out)])
        if out.exists():
            residuals[name] = json.loads(out.read_text())["checks"][0]["max_relative"]
    capsys.readouterr()
    ok = (
        codes == {"dini-perturbed": 1, "cp1-even-eps": 1, "eps-one": 2}
        and all(residuals[n] > 1e-3 for n in ("dini-perturbed", "cp1-even-eps"))
    )
    detail = ", ".join(f"{n}: exit {codes[n]}" + (f", residual {residuals[n]:.2e}" if n in residuals else "") for n in codes)
    record("C10 negative controls", ok, detail + " (expect 1, 1 with residual > 1e-3, and 2)")


def test_c11_autodiff_vs_differences():
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst, count = 0.0, 0
    for e, box in expression_corpus():
        lo, hi = np.array(box.lo), np.array(box.hi)
        pts = lo + (hi - lo) * rng.random((100, len(lo)))
        g = eval_jet(e, pts).gradient
        fd = np.stack(
            [(evaluate(e, pts + h * d) - evaluate(e, pts - h * d)) / (2 * h) for d in np.eye(len(lo))],
            axis=-1,
        )
        worst = max(worst, float((np.abs(g - fd) / (1 + np.abs(g))).max()))
        count += 1
    record("C11 autodiff vs differences", worst <= 1e-7, f"max |grad - FD| / (1 + |grad|) {worst:.2e} (<= 1e-7) over {count} expressions x 100 points")


if __name__ == "__main__":
    import sys

    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
