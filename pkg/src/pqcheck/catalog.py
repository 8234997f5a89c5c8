"""Catalog of constructed scenes, each admitted only after its defining
residual passes, plus deliberately broken negative controls."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .expr import evaluate, free_variables, parse_expr
from .geometry import ChartDomain
from .pq_struct import PQScene, residual_report, validate_scene

COORDS = ("x", "y")
J = [["0", "-1"], ["1", "0"]]
ZERO2 = [["0", "0"], ["0", "0"]]


class CatalogGateError(ValueError):
    """A constructed scene failed the residual gate that admits it."""

    def __init__(self, name: str, report):
        self.report = report
        super().__init__(
            f"{name}: {report.equation} residual {report.max_relative:.3e} exceeds "
            f"{report.tolerance:g} (worst at {report.worst.point.tolist()})"
        )


@dataclass
class CatalogEntry:
    name: str
    scene: PQScene
    expected_verdict: str
    provenance: str
    flags: tuple[str, ...] = ()
    # the A-field used to build the entry, for reconstruction round trips
    a_field: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    gate: dict = field(default_factory=dict)


def _num(v: float) -> str:
    v = float(v)
    text = str(int(v)) if v.is_integer() else repr(v)
    return f"({text})" if v < 0 else text


def _diag(entries):
    m = len(entries)
    return [[entries[i] if i == j else "0" for j in range(m)] for i in range(m)]


def _scene(name, notes, eps, lo, hi, g, gbar, P, Q, coords=COORDS) -> PQScene:
    return PQScene.from_dict(
        {
            "name": name,
            "notes": notes,
            "dimension": len(coords),
            "epsilon": eps,
            "coords": list(coords),
            "domain": {"min": list(lo), "max": list(hi)},
            "g": g,
            "gbar": gbar,
            "P": P,
            "Q": Q,
        }
    )


def _admit(entry: CatalogEntry, equation: str, samples: int = 1000, seed: int = 42) -> CatalogEntry:
    validate_scene(entry.scene, samples, seed)
    report = residual_report(entry.scene, equation, samples=samples, seed=seed)
    entry.gate = {"equation": equation, "max_relative": report.max_relative, "tolerance": report.tolerance}
    if not report.passed:
        raise CatalogGateError(entry.name, report)
    return entry


# --------------------------------------------------------------------------
# Admitted entries


def make_affine_pair(m: int = 2, c: float = 1.0) -> CatalogEntry:
    """Flat metric and a constant multiple of it on the unit box."""
    if m < 2:
        raise ValueError("dimension must be at least 2")
    if not c > 0:
        raise ValueError("scale c must be positive")
    coords = COORDS if m == 2 else tuple(f"x{i + 1}" for i in range(m))
    zero = [["0"] * m for _ in range(m)]
    scene = _scene(
        f"affine-m{m}",
        f"g flat, gbar = {c:g} g",
        0,
        [0.0] * m,
        [1.0] * m,
        _diag(["1"] * m),
        _diag([_num(c)] * m),
        zero,
        zero,
        coords,
    )
    a = c ** (-1.0 / (m + 1))
    entry = CatalogEntry(
        scene.name,
        scene,
        "affine",
        "constant rescaling of a flat metric",
        a_field=lambda p: np.broadcast_to(a * np.eye(m), np.shape(p)[:-1] + (m, m)).copy(),
    )
    return _admit(entry, "main")


def make_dini_pair(X: str = "x+3", Y: str = "y", box=((0.0, 1.0), (1.0, 2.0))) -> CatalogEntry:
    """``g = (X - Y)(dx^2 + dy^2)``, ``gbar = (1/Y - 1/X)(dx^2/X + dy^2/Y)``."""
    ex, ey = parse_expr(X, COORDS), parse_expr(Y, COORDS)
    if not free_variables(ex) <= {"x"}:
        raise ValueError(f"X must depend on x only, got {X!r}")
    if not free_variables(ey) <= {"y"}:
        raise ValueError(f"Y must depend on y only, got {Y!r}")
    lo, hi = (box[0][0], box[1][0]), (box[0][1], box[1][1])
    pts = ChartDomain(lo, hi).sample(1000, 42)
    xv, yv = evaluate(ex, pts), evaluate(ey, pts)
    bad = ~((xv > yv) & (yv > 0))
    if np.any(bad):
        raise ValueError(f"ordering X > Y > 0 fails at {pts[bad][0].tolist()}")
    Xs, Ys = f"({ex})", f"({ey})"
    conf = f"(1/{Ys}-1/{Xs})"
    scene = _scene(
        "dini",
        f"X = {ex}, Y = {ey}",
        0,
        lo,
        hi,
        _diag([f"{Xs}-{Ys}"] * 2),
        _diag([f"{conf}/{Xs}", f"{conf}/{Ys}"]),
        ZERO2,
        ZERO2,
    )

    def a_field(p):
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1] + (2, 2))
        out[..., 0, 0] = evaluate(ex, p)
        out[..., 1, 1] = evaluate(ey, p)
        return out

    entry = CatalogEntry(
        "dini",
        scene,
        "projective_eps0",
        "classical Liouville-type pair; A = diag(X, Y)",
        a_field=a_field,
    )
    return _admit(entry, "projective")


# stereographic chart of the unit sphere: (x, y) -> (2x, 2y, x^2+y^2-1)/D, D = 1+x^2+y^2.
# D^2 times the Jacobian, column by column
_JAC = (
    ("2*(1-x^2+y^2)", "(-4*x*y)", "4*x"),
    ("(-4*x*y)", "2*(1+x^2-y^2)", "4*y"),
)
_D = "(1+x^2+y^2)"


def _sphere_jacobian(p):
    x, y = p[..., 0], p[..., 1]
    Jp = np.stack(
        [
            np.stack([2 * (1 - x**2 + y**2), -4 * x * y, 4 * x], axis=-1),
            np.stack([-4 * x * y, 2 * (1 + x**2 - y**2), 4 * y], axis=-1),
        ],
        axis=-1,
    )
    return Jp, 1 + x**2 + y**2


def make_sphere_projective_pair(C=None, box=((0.1, 0.3), (-0.3, 0.3))) -> CatalogEntry:
    """Round sphere with A the restriction of the constant form ``C``.

    The partner is ``gbar = (det A)^-1 g A^-1`` written out in closed form and
    gated by the residual of the projective equation.
    """
    C = np.diag([1.0, 2.0, 3.0]) if C is None else np.asarray(C, dtype=float)
    if C.shape != (3, 3) or not np.allclose(C, C.T):
        raise ValueError("C must be a symmetric 3x3 matrix")
    if np.linalg.eigvalsh(C)[0] <= 0:
        raise ValueError("C must be positive definite")
    degenerate = np.allclose(C, C[0, 0] * np.eye(3))

    def kp(a, b):
        terms = [
            f"{_num(C[i, j])}*{_JAC[a][i]}*{_JAC[b][j]}"
            for i in range(3)
            for j in range(3)
            if C[i, j] != 0
        ]
        return "(" + "+".join(terms) + ")"

    k11, k12, k22 = kp(0, 0), kp(0, 1), kp(1, 1)
    det = f"({k11}*{k22}-{k12}^2)"
    pref = f"256*{_D}^4/{det}^2"
    gbar = [[f"{pref}*{k22}", f"(-{pref}*{k12})"], [f"(-{pref}*{k12})", f"{pref}*{k11}"]]
    g = _diag([f"4/{_D}^2"] * 2)
    lo, hi = (box[0][0], box[1][0]), (box[0][1], box[1][1])
    scene = _scene("sphere", f"C = {C.tolist()}", 0, lo, hi, g, gbar, ZERO2, ZERO2)

    def a_field(p):
        Jp, D = _sphere_jacobian(np.asarray(p, dtype=float))
        K = np.einsum("...ia,ij,...jb->...ab", Jp, C, Jp)
        return K / (4 * D**2)[..., None, None]

    entry = CatalogEntry(
        "sphere",
        scene,
        "affine" if degenerate else "projective_eps0",
        "restriction of a constant quadratic form to the round sphere",
        flags=("degenerate",) if degenerate else (),
        a_field=a_field,
    )
    return _admit(entry, "projective")


def _cp1_metric(lam: float) -> str:
    if lam == 1.0:
        return f"4/{_D}^2"
    l2 = _num(lam * lam)
    return f"4*{l2}/(1+{l2}*(x^2+y^2))^2"


def make_cp1_hprojective_pair(lam: float = 2.0, box=((-0.5, 0.5), (-0.5, 0.5))) -> CatalogEntry:
    """Fubini-Study metric on a chart of CP^1 and its pullback by ``z -> lam z``."""
    if not lam >= 1:
        raise ValueError("lambda must be at least 1")
    lo, hi = (box[0][0], box[1][0]), (box[0][1], box[1][1])
    scene = _scene(
        "cp1",
        f"pullback by z -> {lam:g} z",
        -1,
        lo,
        hi,
        _diag([_cp1_metric(1.0)] * 2),
        _diag([_cp1_metric(lam)] * 2),
        J,
        J,
    )

    def a_field(p):
        r2 = np.sum(np.asarray(p, dtype=float) ** 2, axis=-1)
        a = (1 + lam**2 * r2) / (lam * (1 + r2))
        return a[..., None, None] * np.eye(2)

    degenerate = lam == 1.0
    entry = CatalogEntry(
        "cp1",
        scene,
        "affine" if degenerate else "pq_eps_class(-1)",
        "holomorphic rescaling of the Fubini-Study metric",
        flags=("degenerate",) if degenerate else (),
        a_field=a_field,
    )
    return _admit(entry, "pqproj")


# --------------------------------------------------------------------------
# Negative controls (not gated; they must fail)


def make_perturbed_dini(amplitude: float = 0.01) -> CatalogEntry:
    """Dini pair with a small position-dependent off-diagonal term added to
    gbar, which tilts the eigenframe of A and breaks the equation."""
    base = make_dini_pair().scene.to_dict()
    gxx, gyy = base["gbar"][0][0], base["gbar"][1][1]
    off = f"{_num(amplitude)}*x*sqrt(({gxx})*({gyy}))"
    base["name"] = "dini-perturbed"
    base["notes"] = f"gbar_xy = {amplitude:g} x sqrt(gbar_xx gbar_yy)"
    base["gbar"][0][1] = base["gbar"][1][0] = off
    return CatalogEntry(
        "dini-perturbed",
        PQScene.from_dict(base),
        "inconsistent",
        "negative control",
        flags=("negative-control",),
    )


def make_even_eps_claim() -> CatalogEntry:
    """CP^1 metrics declared with ``P = J, Q = 2J, eps = -2``.

    The algebraic conditions hold, the main equation does not.
    """
    base = make_cp1_hprojective_pair().scene.to_dict()
    base.update(
        name="cp1-even-eps",
        notes="even epsilon claim",
        epsilon=-2,
        Q=[["0", "-2"], ["2", "0"]],
    )
    return CatalogEntry(
        "cp1-even-eps",
        PQScene.from_dict(base),
        "inconsistent",
        "negative control",
        flags=("negative-control",),
    )


def epsilon_one_scene() -> dict:
    """Scene file content with the excluded value eps = 1 (cannot be loaded)."""
    return {
        "name": "eps-one",
        "notes": "excluded epsilon; must be rejected on load",
        "dimension": 2,
        "epsilon": 1,
        "coords": list(COORDS),
        "domain": {"min": [-0.5, -0.5], "max": [0.5, 0.5]},
        "g": _diag([_cp1_metric(1.0)] * 2),
        "gbar": _diag([_cp1_metric(2.0)] * 2),
        "P": J,
        "Q": [["0", "1"], ["-1", "0"]],
    }


BUILDERS: dict[str, Callable[..., CatalogEntry]] = {
    "affine": make_affine_pair,
    "dini": make_dini_pair,
    "sphere": make_sphere_projective_pair,
    "cp1": make_cp1_hprojective_pair,
    "dini-perturbed": make_perturbed_dini,
    "cp1-even-eps": make_even_eps_claim,
}
ADMITTED = ("affine", "dini", "sphere", "cp1")
NEGATIVE = ("dini-perturbed", "cp1-even-eps")


def scene_dict(name: str, **params) -> dict:
    """Scene-file content for a catalog name, including ``eps-one``."""
    if name == "eps-one":
        return epsilon_one_scene()
    if name not in BUILDERS:
        raise KeyError(f"unknown catalog entry {name!r}; known: {sorted(BUILDERS) + ['eps-one']}")
    return BUILDERS[name](**params).scene.to_dict()


def admitted_entries() -> list[CatalogEntry]:
    return [BUILDERS[n]() for n in ADMITTED]
