import numpy as np
import pytest

from pqcheck.catalog import (
    ADMITTED,
    BUILDERS,
    NEGATIVE,
    CatalogGateError,
    _admit,
    make_affine_pair,
    make_cp1_hprojective_pair,
    make_dini_pair,
    make_perturbed_dini,
    make_sphere_projective_pair,
    scene_dict,
)
from pqcheck.pq_struct import (
    PQScene,
    SceneError,
    compute_A_at,
    lambda_at,
    point_data,
    reconstruct_gbar,
    residual_report,
    validate_scene,
)
from pqcheck.spectra import classify_pair, lemma_dim_check


@pytest.mark.parametrize("m, c, a", [(2, 1.0, 1.0), (2, 4.0, 2 ** (-2 / 3)), (3, 2.0, 2 ** (-1 / 4))])
def test_affine_closed_form(m, c, a):
    s = make_affine_pair(m, c).scene
    p = s.chart.center()
    np.testing.assert_allclose(compute_A_at(s, p), a * np.eye(m), rtol=1e-14)
    assert np.all(lambda_at(s, p) == 0)
    for eq in ("main", "projective", "pqproj"):
        assert residual_report(s, eq, samples=50).max_relative == 0


def test_affine_bad_input():
    with pytest.raises(ValueError):
        make_affine_pair(2, 0.0)
    with pytest.raises(ValueError):
        make_affine_pair(1, 1.0)


def test_dini_entry(dini):
    assert dini.gate["max_relative"] <= 1e-7
    d = point_data(dini.scene, dini.scene.sample(100))
    assert np.all(np.einsum("nij,nj->ni", d.P, d.Lambda) == 0)
    rep = lemma_dim_check(dini.scene, dini.scene.sample())
    assert rep.metrics["nonconstant_multiplicities"] == [[1], [1]]


def test_dini_preconditions():
    with pytest.raises(ValueError, match="ordering"):
        make_dini_pair("x", "y", box=((0, 1), (1, 2)))
    with pytest.raises(ValueError, match="x only"):
        make_dini_pair("x+y+3", "y")
    with pytest.raises(ValueError, match="y only"):
        make_dini_pair("x+3", "x*y")


def test_dini_other_functions():
    e = make_dini_pair("exp(x)+3", "y^2")
    assert classify_pair(e.scene, samples=200).verdict == "projective_eps0"


def test_sphere_entry(sphere):
    assert sphere.gate["max_relative"] <= 1e-7
    assert classify_pair(sphere.scene).verdict == "projective_eps0"


def test_sphere_partner_is_the_reconstruction(sphere):
    s = sphere.scene
    pts = s.sample(100)
    ref = reconstruct_gbar(s.g, sphere.a_field, 0)(pts)
    got = s.gbar.value(pts)
    assert np.abs(got - ref).max() <= 1e-12 * np.abs(ref).max()


def test_sphere_degenerate_and_partial():
    e = make_sphere_projective_pair(np.eye(3))
    assert "degenerate" in e.flags and e.expected_verdict == "affine"
    assert classify_pair(e.scene, samples=200).verdict == "affine"
    e = make_sphere_projective_pair(np.diag([1.0, 1.0, 2.0]))
    assert lemma_dim_check(e.scene, e.scene.sample()).passed


def test_sphere_bad_input():
    with pytest.raises(ValueError):
        make_sphere_projective_pair(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(ValueError):
        make_sphere_projective_pair(np.arange(9.0).reshape(3, 3))


def test_cp1_entry(cp1):
    assert cp1.gate == {"equation": "pqproj", "max_relative": cp1.gate["max_relative"], "tolerance": 1e-7}
    assert cp1.gate["max_relative"] <= 1e-7
    rep = lemma_dim_check(cp1.scene, cp1.scene.sample())
    assert rep.metrics["nonconstant_multiplicities"] == [[2]]


def test_cp1_degenerate_and_bad_input():
    e = make_cp1_hprojective_pair(1.0)
    assert "degenerate" in e.flags
    assert classify_pair(e.scene, samples=200).verdict == "affine"
    with pytest.raises(ValueError):
        make_cp1_hprojective_pair(0.5)


def test_gate_rejects_broken_scene():
    with pytest.raises(CatalogGateError, match="main residual"):
        _admit(make_perturbed_dini(), "main")


def test_catalog_regimes_and_verdicts():
    verdicts = set()
    for name in ADMITTED:
        e = BUILDERS[name]()
        validate_scene(e.scene)
        cl = classify_pair(e.scene)
        assert cl.verdict == e.expected_verdict, name
        verdicts.add(cl.verdict)
    assert {"affine", "projective_eps0", "pq_eps_class(-1)"} <= verdicts


def test_negative_catalog():
    assert len(NEGATIVE) >= 2
    for name in NEGATIVE:
        e = BUILDERS[name]()
        validate_scene(e.scene)  # the algebraic conditions hold
        rep = residual_report(e.scene, "main")
        assert not rep.passed and rep.max_relative > 1e-3
        assert classify_pair(e.scene).verdict == "inconsistent"


def test_scene_files_round_trip():
    for name in BUILDERS:
        d = scene_dict(name)
        assert PQScene.from_dict(d).to_dict() == d


def test_eps_one_scene_cannot_load():
    with pytest.raises(SceneError, match="excluded"):
        PQScene.from_dict(scene_dict("eps-one"))
    with pytest.raises(KeyError):
        scene_dict("nope")
