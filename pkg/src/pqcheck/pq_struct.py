"""PQ^eps structures: scene validation, the A-tensor, Lambda, Phi and residuals
of the defining equations.

All ``*_at`` functions accept a single point ``(m,)`` or a batch ``(N, m)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import ExprError
from .geometry import (
    ChartDomain,
    GeometryError,
    MetricField,
    SingularMetricError,
    TensorField11,
    christoffel_from_jet,
    cov_deriv_terms,
)

EPS = np.finfo(float).eps
CONDITION_TOL = 1e-9
RESIDUAL_TOL = 1e-7
EQUATIONS = ("conditions", "pqproj", "main", "projective", "hprojective")


class SceneError(ValueError):
    """Malformed scene data (wrong shapes, unparsable expressions, excluded eps)."""


class SceneValidationError(ValueError):
    """A sampled invariant of the scene failed."""

    def __init__(self, violations: list["ConditionCheck"]):
        self.violations = violations
        names = ", ".join(v.name for v in violations)
        super().__init__(f"scene invariants violated: {names}")


@dataclass
class PQScene:
    chart: ChartDomain
    coords: tuple[str, ...]
    epsilon: float
    g: MetricField
    gbar: MetricField
    P: TensorField11
    Q: TensorField11
    name: str = ""
    notes: str = ""

    @property
    def dim(self) -> int:
        return self.chart.dim

    @classmethod
    def from_dict(cls, data: dict) -> "PQScene":
        try:
            coords = tuple(data["coords"])
            m = int(data["dimension"])
            if len(coords) != m:
                raise SceneError(f"dimension {m} but {len(coords)} coordinates")
            chart = ChartDomain(data["domain"]["min"], data["domain"]["max"])
            if chart.dim != m:
                raise SceneError("domain dimension does not match")
            eps = float(data["epsilon"])
            check_epsilon(eps, m)
            return cls(
                chart=chart,
                coords=coords,
                epsilon=eps,
                g=MetricField(data["g"], coords),
                gbar=MetricField(data["gbar"], coords),
                P=TensorField11(data["P"], coords),
                Q=TensorField11(data["Q"], coords),
                name=data.get("name", ""),
                notes=data.get("notes", ""),
            )
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed scene: {exc!r}") from exc
        except (ExprError, GeometryError, ValueError) as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(str(exc)) from exc

    def to_dict(self) -> dict:
        eps = self.epsilon
        return {
            "name": self.name,
            "notes": self.notes,
            "dimension": self.dim,
            "epsilon": int(eps) if float(eps).is_integer() else eps,
            "coords": list(self.coords),
            "domain": {"min": list(self.chart.lo), "max": list(self.chart.hi)},
            "g": self.g.strings(),
            "gbar": self.gbar.strings(),
            "P": self.P.strings(),
            "Q": self.Q.strings(),
        }

    def digest(self) -> str:
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()

    def sample(self, n: int = 1000, seed: int = 42) -> np.ndarray:
        return self.chart.sample(n, seed)


def check_epsilon(eps: float, m: int):
    if abs(eps - 1.0) < 1e-12:
        raise SceneError("epsilon = 1 is excluded (eps != 1, m+1)")
    if abs(eps - (m + 1)) < 1e-12:
        raise SceneError(f"epsilon = m+1 = {m + 1} is excluded (eps != 1, m+1)")


# --------------------------------------------------------------------------
# Pointwise data


def _norm(M, axes=(-2, -1)):
    return np.sqrt(np.sum(np.square(M), axis=axes))


def _relative(defect, scale):
    defect = np.asarray(defect, dtype=float)
    return defect / np.maximum(np.asarray(scale, dtype=float), EPS)


def a_tensor(G, Gbar, eps):
    """``(det Gbar / det G)^(1/(m+1-eps)) Gbar^-1 G`` on plain arrays."""
    m = G.shape[-1]
    _, ld = np.linalg.slogdet(G)
    _, ldb = np.linalg.slogdet(Gbar)
    s = np.exp((ldb - ld) / (m + 1 - eps))
    return s[..., None, None] * np.linalg.solve(Gbar, G)


@dataclass
class PointData:
    """Everything the residual and spectral checks need at a batch of points."""

    points: np.ndarray
    epsilon: float
    G: np.ndarray
    dG: np.ndarray
    Gbar: np.ndarray
    dGbar: np.ndarray
    A: np.ndarray
    dA: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    gamma: np.ndarray
    gamma_bar: np.ndarray
    Lambda: np.ndarray
    trace_grad: np.ndarray = field(repr=False)

    @property
    def Ginv(self):
        return np.linalg.inv(self.G)


def point_data(scene: PQScene, points) -> PointData:
    x = np.asarray(points, dtype=float)
    G, dG = scene.g.jet(x)
    Gb, dGb = scene.gbar.jet(x)
    m = scene.dim
    eps = scene.epsilon
    try:
        Gb_inv = np.linalg.inv(Gb)
        G_inv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError("singular metric") from exc
    # forward-mode rules: d(M^-1) = -M^-1 dM M^-1, d log det M = tr(M^-1 dM)
    _, ld = np.linalg.slogdet(G)
    _, ldb = np.linalg.slogdet(Gb)
    s = np.exp((ldb - ld) / (m + 1 - eps))
    B = Gb_inv @ G
    dlog_s = (
        np.einsum("...ij,...kji->...k", Gb_inv, dGb) - np.einsum("...ij,...kji->...k", G_inv, dG)
    ) / (m + 1 - eps)
    dB = -np.einsum("...ij,...kjl,...lr->...kir", Gb_inv, dGb, B) + np.einsum(
        "...ij,...kjl->...kil", Gb_inv, dG
    )
    A = s[..., None, None] * B
    dA = s[..., None, None, None] * (dlog_s[..., :, None, None] * B[..., None, :, :] + dB)
    trace_grad = np.einsum("...kii->...k", dA)
    Lam = np.einsum("...ij,...j->...i", G_inv, trace_grad) / (2.0 * (1.0 - eps))
    return PointData(
        points=x,
        epsilon=eps,
        G=G,
        dG=dG,
        Gbar=Gb,
        dGbar=dGb,
        A=A,
        dA=dA,
        P=scene.P.value(x),
        Q=scene.Q.value(x),
        gamma=christoffel_from_jet(G, dG),
        gamma_bar=christoffel_from_jet(Gb, dGb),
        Lambda=Lam,
        trace_grad=trace_grad,
    )


def compute_A_at(scene: PQScene, point) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    return a_tensor(scene.g.value(x), scene.gbar.value(x), scene.epsilon)


def A_jet_at(scene: PQScene, point) -> tuple[np.ndarray, np.ndarray]:
    """``(A, dA)`` with ``dA[..., k, i, j] = d_k A^i_j`` by forward-mode rules."""
    d = point_data(scene, point)
    return d.A, d.dA


def lambda_at(scene: PQScene, point) -> np.ndarray:
    """``grad(trace A) / (2(1 - eps))``."""
    return point_data(scene, point).Lambda


def phi_from_lambda(G, A, Lam) -> np.ndarray:
    try:
        return -np.einsum("...ij,...j->...i", G, np.linalg.solve(A, Lam[..., None])[..., 0])
    except np.linalg.LinAlgError as exc:
        raise SceneError("A is singular; the scene is invalid") from exc


def phi_from_lambda_at(scene: PQScene, point) -> np.ndarray:
    """Covector ``Phi = -g A^-1 Lambda``."""
    d = point_data(scene, point)
    return phi_from_lambda(d.G, d.A, d.Lambda)


# --------------------------------------------------------------------------
# Residuals


@dataclass(frozen=True)
class ResidualSample:
    point: np.ndarray
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return float(_relative(self.residual, self.scale))


@dataclass
class ResidualReport:
    equation: str
    samples: list[ResidualSample]
    max_relative: float
    mean_relative: float
    tolerance: float
    passed: bool

    @property
    def worst(self) -> ResidualSample:
        return max(self.samples, key=lambda s: s.relative)

    def to_dict(self) -> dict:
        w = self.worst
        return {
            "equation": self.equation,
            "samples": len(self.samples),
            "max_relative": self.max_relative,
            "mean_relative": self.mean_relative,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_point": [float(v) for v in w.point],
        }


def _gnorm(G, v):
    """g-norm of vectors ``v[..., a, b, :]`` with ``G[..., :, :]``."""
    return np.sqrt(np.abs(np.einsum("...abi,...ij,...abj->...ab", v, G, v)))


def _defect_and_scale(G, lhs_terms, rhs_terms):
    """Max g-norm of ``sum(lhs) - sum(rhs)`` over basis pairs, and of single terms."""
    defect = sum(lhs_terms) - sum(rhs_terms)
    residual = _gnorm(G, defect).max(axis=(-1, -2))
    scale = np.max([_gnorm(G, t).max(axis=(-1, -2)) for t in (*lhs_terms, *rhs_terms)], axis=0)
    return residual, scale


def _main_terms(d: PointData, with_pq: bool):
    # LHS vector (nabla_{e_i} A) e_j indexed [i, j, l]
    partial, cin, cout = (np.swapaxes(t, -1, -2) for t in cov_deriv_terms(d.A, d.dA, d.gamma))
    m = d.G.shape[-1]
    Lam = d.Lambda
    GLam = np.einsum("...jl,...l->...j", d.G, Lam)
    t1 = d.G[..., :, :, None] * Lam[..., None, None, :]  # g(e_j, e_i) Lambda
    t2 = GLam[..., None, :, None] * np.eye(m)[:, None, :]  # g(e_j, Lambda) e_i
    rhs = [t1, t2]
    if with_pq:
        GQ = d.G @ d.Q
        PLam = np.einsum("...lk,...k->...l", d.P, Lam)
        GPLam = np.einsum("...jl,...l->...j", d.G, PLam)
        t3 = np.swapaxes(GQ, -1, -2)[..., :, :, None] * PLam[..., None, None, :]
        t4 = GPLam[..., None, :, None] * np.swapaxes(d.Q, -1, -2)[..., :, None, :]
        rhs += [t3, t4]
    return [partial, cin, -cout], rhs


def _connection_terms(d: PointData):
    m = d.G.shape[-1]
    Phi = phi_from_lambda(d.G, d.A, d.Lambda)
    PhiP = np.einsum("...l,...li->...i", Phi, d.P)
    eye = np.eye(m)
    # difference tensor (Gamma_bar - Gamma)^k_ij indexed [i, j, k]
    lhs = [np.moveaxis(d.gamma_bar, -3, -1), -np.moveaxis(d.gamma, -3, -1)]
    r1 = Phi[..., :, None, None] * eye[None, :, :]  # Phi(e_i) e_j
    r2 = Phi[..., None, :, None] * eye[:, None, :]  # Phi(e_j) e_i
    QT = np.swapaxes(d.Q, -1, -2)  # QT[..., j, k] = Q^k_j
    r3 = -PhiP[..., :, None, None] * QT[..., None, :, :]  # -Phi(P e_i) Q e_j
    r4 = -PhiP[..., None, :, None] * QT[..., :, None, :]  # -Phi(P e_j) Q e_i
    return lhs, [r1, r2, r3, r4]


def residuals(scene: PQScene, equation: str, points) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ``(residual, scale)`` arrays for ``equation``."""
    d = point_data(scene, points)
    if equation == "main":
        lhs, rhs = _main_terms(d, with_pq=True)
    elif equation == "projective":
        lhs, rhs = _main_terms(d, with_pq=False)
    elif equation in ("pqproj", "hprojective"):
        if equation == "hprojective":
            _require_hermitian(scene, d)
        lhs, rhs = _connection_terms(d)
    elif equation == "conditions":
        checks = condition_checks(scene, points)
        worst = np.max([c.per_point for c in checks], axis=0)
        return worst, np.ones_like(worst)
    else:
        raise ValueError(f"unknown equation {equation!r}; expected one of {EQUATIONS}")
    return _defect_and_scale(d.G, lhs, rhs)


def _require_hermitian(scene: PQScene, d: PointData):
    if abs(scene.epsilon + 1) > 1e-12 or not np.allclose(d.P, d.Q, rtol=0, atol=1e-12):
        raise SceneError("h-projective residual needs P = Q = J and eps = -1")


def _sample(points, residual, scale) -> ResidualSample:
    return ResidualSample(np.asarray(points, dtype=float), float(residual), float(scale))


def pde_residual_at(scene: PQScene, point) -> ResidualSample:
    """Defect of ``(nabla_X A)Y = g(Y,X)L + g(Y,L)X + g(Y,QX)PL + g(Y,PL)QX``."""
    r, s = residuals(scene, "main", point)
    return _sample(point, r, s)


def projective_residual_at(scene: PQScene, point) -> ResidualSample:
    """Defect of the Q-free specialization ``(nabla_X A)Y = g(Y,X)L + g(Y,L)X``."""
    r, s = residuals(scene, "projective", point)
    return _sample(point, r, s)


def connection_diff_residual_at(scene: PQScene, point) -> ResidualSample:
    """Defect of ``nabla_bar_X Y - nabla_X Y = Phi(X)Y + Phi(Y)X - Phi(PX)QY - Phi(PY)QX``."""
    r, s = residuals(scene, "pqproj", point)
    return _sample(point, r, s)


def residual_report(
    scene: PQScene,
    equation: str,
    samples: int = 1000,
    seed: int = 42,
    tolerance: float = RESIDUAL_TOL,
    points=None,
) -> ResidualReport:
    pts = scene.sample(samples, seed) if points is None else np.asarray(points, dtype=float)
    r, s = residuals(scene, equation, pts)
    rel = _relative(r, s)
    return ResidualReport(
        equation=equation,
        samples=[_sample(p, ri, si) for p, ri, si in zip(pts, r, s)],
        max_relative=float(rel.max()),
        mean_relative=float(rel.mean()),
        tolerance=tolerance,
        passed=bool(rel.max() <= tolerance),
    )


def formulation_agreement(scene: PQScene, tolerance: float = RESIDUAL_TOL, samples=1000, seed=42):
    """Check the PDE form and the connection form against each other.

    A pair passing one at ``tolerance`` is expected to pass the other at
    ``10 * tolerance``; disagreement is reported, not resolved.
    """
    main = residual_report(scene, "main", samples, seed, tolerance)
    conn = residual_report(scene, "pqproj", samples, seed, tolerance)
    agree = (not main.passed or conn.max_relative <= 10 * tolerance) and (
        not conn.passed or main.max_relative <= 10 * tolerance
    )
    return {"main": main, "pqproj": conn, "agree": agree}


# --------------------------------------------------------------------------
# Scene conditions


@dataclass
class ConditionCheck:
    name: str
    per_point: np.ndarray = field(repr=False)
    tolerance: float
    worst_point: np.ndarray

    @property
    def max_violation(self) -> float:
        return float(self.per_point.max())

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_point": [float(v) for v in self.worst_point],
        }


def _skew_violation(G, T):
    GT = G @ T
    return _relative(_norm(GT + np.swapaxes(GT, -1, -2)), _norm(G) * _norm(T))


def condition_checks(scene: PQScene, points, tol: float = CONDITION_TOL) -> list[ConditionCheck]:
    """Sampled checks of skewness, ``PQ = eps Id``, commutation and definiteness."""
    x = np.asarray(points, dtype=float)
    G = scene.g.value(x)
    Gb = scene.gbar.value(x)
    P = scene.P.value(x)
    Q = scene.Q.value(x)
    m = scene.dim
    eps = scene.epsilon
    out = {}
    out["g_positive_definite"] = np.maximum(1e-12 - np.linalg.eigvalsh(G)[..., 0], 0.0)
    out["gbar_positive_definite"] = np.maximum(1e-12 - np.linalg.eigvalsh(Gb)[..., 0], 0.0)
    pd_ok = out["g_positive_definite"].max() == 0 and out["gbar_positive_definite"].max() == 0
    out["P_skew_g"] = _skew_violation(G, P)
    out["Q_skew_g"] = _skew_violation(G, Q)
    out["P_skew_gbar"] = _skew_violation(Gb, P)
    out["Q_skew_gbar"] = _skew_violation(Gb, Q)
    out["PQ_eq_eps_id"] = _relative(_norm(P @ Q - eps * np.eye(m)), _norm(P) * _norm(Q) + abs(eps))
    if pd_ok:
        A = a_tensor(G, Gb, eps)
        out["A_commutes_P"] = _relative(_norm(A @ P - P @ A), _norm(A) * _norm(P))
        out["A_commutes_Q"] = _relative(_norm(A @ Q - Q @ A), _norm(A) * _norm(Q))
    return [
        ConditionCheck(name, v, 0.0 if name.endswith("definite") else tol, x[int(np.argmax(v))])
        for name, v in out.items()
    ]


def validate_scene(scene: PQScene | dict, samples: int = 1000, seed: int = 42, tol: float = CONDITION_TOL) -> PQScene:
    """Return the scene if every sampled condition holds, else raise
    :class:`SceneValidationError` listing each violated condition."""
    if isinstance(scene, dict):
        scene = PQScene.from_dict(scene)
    check_epsilon(scene.epsilon, scene.dim)
    checks = condition_checks(scene, scene.sample(samples, seed), tol)
    failed = [c for c in checks if not c.passed]
    if failed:
        raise SceneValidationError(failed)
    return scene


# --------------------------------------------------------------------------
# Reconstruction


def reconstruct_gbar(g, A: Callable, eps: float) -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise ``gbar = (det A)^(-1/(1-eps)) g A^-1``.

    ``g`` is a :class:`MetricField` or a callable returning the metric matrix;
    ``A`` returns the (1,1)-tensor matrix at a point.
    """
    if abs(eps - 1) < 1e-12:
        raise SceneError("epsilon = 1 is excluded")
    g_eval = g.value if isinstance(g, MetricField) else g

    def gbar(point):
        G = np.asarray(g_eval(point), dtype=float)
        Av = np.asarray(A(point), dtype=float)
        GA = G @ Av
        if not np.allclose(GA, np.swapaxes(GA, -1, -2), rtol=1e-10, atol=1e-12 * _norm(GA).max()):
            raise SceneError("A is not g-self-adjoint")
        L = np.linalg.cholesky(G)
        S = np.linalg.solve(L, np.swapaxes(np.linalg.solve(L, GA), -1, -2))
        if np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))[..., 0].min() <= 0:
            raise SceneError("A has a non-positive eigenvalue; a positive solution is required")
        det = np.linalg.det(Av)
        out = det[..., None, None] ** (-1.0 / (1.0 - eps)) * (G @ np.linalg.inv(Av))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    return gbar
