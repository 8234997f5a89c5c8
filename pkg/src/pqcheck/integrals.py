"""The quadratic integrals F_t of the geodesic flow, the smooth tensor T that
regularizes F_c across the level set {rho = c}, conservation along geodesics
and Poisson commutation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .geometry import GeodesicState, Trajectory, integrate_geodesic, rk4_step
from .pq_struct import PQScene, a_tensor, compute_A_at
from .spectra import cluster_eigenvalues, generalized_eigh

SPECTRUM_GUARD = 1e-6
EXACT_GUARD = 1e-8
COND_LIMIT = 1e12
DRIFT_TOL = 1e-6
REGULARIZED_DRIFT_TOL = 1e-5


class NearSpectrumError(ValueError):
    """t (or c) is too close to an eigenvalue of A for the requested form."""


@dataclass(frozen=True)
class IntegralSpec:
    t: float
    regularized: bool = False
    k: int | None = None

    def __post_init__(self):
        if self.regularized and (self.k is None or self.k < 1):
            raise ValueError("regularized integrals need a multiplicity k >= 1")

    @property
    def label(self) -> str:
        return f"F_c[c={self.t:g},k={self.k}]" if self.regularized else f"F_t[t={self.t:g}]"


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    p: np.ndarray


# --------------------------------------------------------------------------
# F_t


def _exponent(scene: PQScene) -> float:
    return 1.0 / (1.0 - scene.epsilon)


def _F_from_arrays(G, A, t, X, alpha):
    m = A.shape[-1]
    M = A - t * np.eye(m)
    det = np.linalg.det(M)
    Y = np.linalg.solve(M, X[..., None])[..., 0]
    return np.abs(det) ** alpha * np.einsum("...i,...ij,...j->...", Y, G, X)


def _guard_t(G, A, t, guard):
    mu, _ = generalized_eigh(G, A)
    dist = np.abs(mu - t).min(axis=-1)
    if np.any(dist <= guard):
        raise NearSpectrumError(
            f"t = {t:g} is within {guard:g} of the spectrum of A; use F_c_regularized_at"
        )
    M = A - t * np.eye(A.shape[-1])
    if np.any(np.linalg.cond(M) > COND_LIMIT):
        raise NearSpectrumError(f"A - {t:g} Id is ill-conditioned; use F_c_regularized_at")


def F_t_at(scene: PQScene, t: float, X, point) -> np.ndarray:
    """``|det(A - t)|^(1/(1-eps)) g((A - t)^-1 X, X)``."""
    x = np.asarray(point, dtype=float)
    G = scene.g.value(x)
    A = compute_A_at(scene, x)
    _guard_t(G, A, t, EXACT_GUARD)
    return _F_from_arrays(G, A, t, np.asarray(X, dtype=float), _exponent(scene))


# --------------------------------------------------------------------------
# Regularized tensor


def _c_block(mu, c, k, guard, diagnostic):
    """Members of the eigenvalue cluster nearest ``c`` and the others."""
    clusters, _ = cluster_eigenvalues(mu)
    nearest = min(clusters, key=lambda cl: abs(cl.value - c))
    for cl in clusters:
        if cl is not nearest and abs(cl.value - c) <= guard:
            raise NearSpectrumError(
                f"eigenvalue {cl.value:g} other than the c-cluster lies within {guard:g} of c = {c:g}"
            )
    if not diagnostic and nearest.multiplicity > k:
        raise ValueError(f"c-cluster multiplicity {nearest.multiplicity} exceeds k = {k}")
    members = np.zeros(len(mu), dtype=bool)
    members[list(nearest.members)] = True
    return nearest.value, members


def _T_frame(mu, c, k, guard=SPECTRUM_GUARD, diagnostic=False):
    """Diagonal of T in the g-orthonormal eigenframe and rho (c-cluster value)."""
    rho, members = _c_block(mu, c, k, guard, diagnostic)
    others = mu[~members]
    prefactor = np.prod(np.abs(others - c) ** (1.0 / k))
    diag = np.ones_like(mu)
    diag[~members] = (rho - c) / (others - c)
    return prefactor * diag, rho


def T_tensor_at(scene: PQScene, c: float, k: int, point, diagnostic: bool = False) -> np.ndarray:
    """Covariant components of the smooth tensor that equals
    ``sgn(rho - c) |det(A - c)|^(1/k) g((A - c)^-1 ., .)`` off ``{rho = c}``.

    Built in the eigenframe: ``prod_i |rho_i - c|^(k_i/k)`` times
    ``diag(1, ..., (rho - c)/(rho_i - c), ...)``, finite on ``rho = c``.
    """
    x = np.asarray(point, dtype=float)
    G = scene.g.value(x)
    mu, V = generalized_eigh(G, compute_A_at(scene, x))
    diag, _ = _T_frame(mu, c, k, diagnostic=diagnostic)
    W = G @ V
    return (W * diag) @ W.T


def T_tensor_direct_at(scene: PQScene, c: float, k: int, point) -> np.ndarray:
    """The singular closed form, valid only off ``{rho = c}``."""
    x = np.asarray(point, dtype=float)
    G = scene.g.value(x)
    A = compute_A_at(scene, x)
    mu, _ = generalized_eigh(G, A)
    rho, _ = _c_block(mu, c, k, SPECTRUM_GUARD, True)
    M = A - c * np.eye(len(mu))
    return np.sign(rho - c) * np.abs(np.linalg.det(M)) ** (1.0 / k) * (G @ np.linalg.inv(M))


def _sgn(v):
    # the level set itself is assigned to the upper side
    return np.where(np.asarray(v) >= 0, 1.0, -1.0)


def F_c_regularized_at(
    scene: PQScene, c: float, k: int, X, point, diagnostic: bool = False
) -> float:
    """``f_c T(X, X)`` with ``f_c = sgn(rho - c) |det(A - c)|^(1/(1-eps) - 1/k)``.

    Outside diagnostic mode ``k`` must equal ``1 - eps`` so that ``f_c`` is a
    pure sign. Diagnostic mode accepts any ``k`` and exposes the behaviour of
    ``f_c`` near the level set.
    """
    expo = _exponent(scene) - 1.0 / k
    if not diagnostic and abs(expo) > 1e-12:
        raise ValueError(f"k = {k} does not satisfy 1/(1-eps) = 1/k; pass diagnostic=True")
    x = np.asarray(point, dtype=float)
    G = scene.g.value(x)
    A = compute_A_at(scene, x)
    mu, V = generalized_eigh(G, A)
    diag, rho = _T_frame(mu, c, k, diagnostic=diagnostic)
    X = np.asarray(X, dtype=float)
    u = V.T @ G @ X
    TXX = float(np.sum(diag * u * u))
    f = float(_sgn(rho - c))
    if expo != 0.0:
        f *= abs(np.linalg.det(A - c * np.eye(len(mu)))) ** expo
    return f * TXX


def T_continuity(scene: PQScene, c: float, k: int, trajectory: Trajectory, fd_rel: float = 1e-4):
    """Largest jump of T between consecutive samples against ``10 h L``.

    ``L`` is a local Lipschitz estimate along the path: the largest
    central-difference derivative of T in the direction of motion.
    Returns ``(max_jump, bound, passed)``.
    """
    xs, vs = trajectory.positions, trajectory.velocities
    Ts = np.array([T_tensor_at(scene, c, k, x) for x in xs])
    jumps = np.abs(np.diff(Ts, axis=0)).max(axis=(-1, -2))
    lip = 0.0
    for x, v in zip(xs, vs):
        step = fd_rel * scene.chart.scale / max(np.linalg.norm(v), 1e-300)
        dT = T_tensor_at(scene, c, k, x + step * v) - T_tensor_at(scene, c, k, x - step * v)
        lip = max(lip, np.abs(dT).max() / (2 * step))
    bound = 10.0 * trajectory.h * lip
    max_jump = float(jumps.max()) if len(jumps) else 0.0
    return max_jump, float(bound), bool(max_jump <= bound)


# --------------------------------------------------------------------------
# Conservation


@dataclass
class DriftResult:
    spec: IntegralSpec
    initial: float
    max_abs_drift: float
    relative_drift: float  # per unit time, normalized by the initial term scale
    max_abs_ratio: float  # max |F| along the path over |F(0)|
    tolerance: float
    passed: bool
    values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "integral": self.spec.label,
            "initial": float(self.initial),
            "max_abs_drift": float(self.max_abs_drift),
            "relative_drift_per_time": float(self.relative_drift),
            "max_abs_ratio": float(self.max_abs_ratio),
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
        }


@dataclass
class DriftReport:
    results: list[DriftResult]
    duration: float
    h: float
    termination: str

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "h": self.h,
            "termination": self.termination,
            "passed": self.passed,
            "integrals": [r.to_dict() for r in self.results],
        }


def integral_along(scene: PQScene, spec: IntegralSpec, positions, velocities):
    """Values of an integral along sampled states, and the term scale at the first.

    A regularized spec is continued across ``{rho = c}``: the sign
    ``sgn(rho - c)`` is frozen at the first sample, so the value equals F_c on
    the starting side and its continuous extension beyond it.
    """
    x = np.asarray(positions, dtype=float)
    v = np.asarray(velocities, dtype=float)
    G = scene.g.value(x)
    A = compute_A_at(scene, x)
    mu, V = generalized_eigh(G, A)
    u = np.einsum("nia,nij,nj->na", V, G, v)
    if not spec.regularized:
        _guard_t(G, A, spec.t, SPECTRUM_GUARD)
        side = np.sign(mu - spec.t)
        if np.any(side != side[0]):
            raise NearSpectrumError(
                f"t = {spec.t:g} meets the spectrum of A along the trajectory; use a regularized spec"
            )
        alpha = _exponent(scene)
        weights = np.abs(np.prod(mu - spec.t, axis=-1, keepdims=True)) ** alpha / (mu - spec.t)
        vals = np.sum(weights * u * u, axis=-1)
        scale0 = float(np.sum(np.abs(weights[0]) * u[0] ** 2))
        return vals, scale0
    expo = _exponent(scene) - 1.0 / spec.k
    if abs(expo) > 1e-12:
        raise ValueError("conservation of a regularized integral requires k = 1 - eps")
    vals = np.empty(len(x))
    sign0 = None
    scale0 = 0.0
    for n in range(len(x)):
        diag, rho = _T_frame(mu[n], spec.t, spec.k)
        if sign0 is None:
            sign0 = float(_sgn(rho - spec.t))
            scale0 = float(np.sum(np.abs(diag) * u[n] ** 2))
        vals[n] = sign0 * np.sum(diag * u[n] ** 2)
    return vals, scale0


def conservation_report(
    scene: PQScene,
    trajectory: Trajectory,
    specs: list[IntegralSpec],
    tol: float = DRIFT_TOL,
    regularized_tol: float = REGULARIZED_DRIFT_TOL,
) -> DriftReport:
    duration = max(abs(trajectory.times[-1]), trajectory.h)
    results = []
    for spec in specs:
        vals, scale0 = integral_along(scene, spec, trajectory.positions, trajectory.velocities)
        drift = float(np.abs(vals - vals[0]).max())
        rel = drift / max(scale0, np.finfo(float).tiny) / duration
        budget = regularized_tol if spec.regularized else tol
        ratio = float(np.abs(vals).max() / max(abs(vals[0]), np.finfo(float).tiny))
        results.append(DriftResult(spec, float(vals[0]), drift, float(rel), ratio, budget, bool(rel <= budget), vals))
    return DriftReport(results, float(trajectory.times[-1]), trajectory.h, trajectory.reason)


def energy_drift(scene: PQScene, trajectory: Trajectory) -> float:
    """Relative drift of g(v, v) per unit time."""
    G = scene.g.value(trajectory.positions)
    E = np.einsum("ni,nij,nj->n", trajectory.velocities, G, trajectory.velocities)
    duration = max(abs(trajectory.times[-1]), trajectory.h)
    return float(np.abs(E - E[0]).max() / E[0] / duration)


# --------------------------------------------------------------------------
# Poisson brackets


def _Ftilde_matrix(G, A, t, alpha):
    """Symmetric M with ``F~_t(x, p) = p^T M p``."""
    m = A.shape[-1]
    K = G @ (A - t * np.eye(m))
    K = 0.5 * (K + np.swapaxes(K, -1, -2))
    det = np.linalg.det(A - t * np.eye(m))
    M = np.linalg.inv(K)
    return (np.abs(det) ** alpha)[..., None, None] * 0.5 * (M + np.swapaxes(M, -1, -2))


def _Ftilde_grads(scene: PQScene, t: float, x, p, step):
    m = len(x)
    alpha = _exponent(scene)
    shifts = np.concatenate([np.eye(m), -np.eye(m)]) * step
    pts = np.vstack([x[None, :], x[None, :] + shifts])
    G = scene.g.value(pts)
    A = a_tensor(G, scene.gbar.value(pts), scene.epsilon)
    M = _Ftilde_matrix(G, A, t, alpha)
    F = np.einsum("i,nij,j->n", p, M, p)
    dx = (F[1 : m + 1] - F[m + 1 :]) / (2 * step)
    dp = 2.0 * M[0] @ p
    return dx, dp


def poisson_bracket_terms(scene: PQScene, t: float, s: float, phase: PhasePoint, step: float | None = None):
    """``({F~_t, F~_s}, |dF~_t| |dF~_s|)`` at a phase point.

    ``F~_t(x, p) = F_t(g^-1 p)``; p-derivatives are exact for the quadratic
    form, x-derivatives are central differences.
    """
    x = np.asarray(phase.x, dtype=float)
    p = np.asarray(phase.p, dtype=float)
    if step is None:
        step = 1e-6 * scene.chart.scale
    G = scene.g.value(x)
    A = compute_A_at(scene, x)
    for val in (t, s):
        _guard_t(G, A, val, SPECTRUM_GUARD)
    if t == s:
        return 0.0, 0.0
    dxt, dpt = _Ftilde_grads(scene, t, x, p, step)
    dxs, dps = _Ftilde_grads(scene, s, x, p, step)
    bracket = float(dxt @ dps - dpt @ dxs)
    scale = float(np.linalg.norm(np.concatenate([dxt, dpt])) * np.linalg.norm(np.concatenate([dxs, dps])))
    return bracket, scale


def poisson_bracket_at(scene: PQScene, t: float, s: float, phase: PhasePoint) -> float:
    return poisson_bracket_terms(scene, t, s, phase)[0]


@dataclass
class CommutationReport:
    pairs: list[tuple[float, float]]
    max_relative: list[float]
    tolerance: float
    samples: int

    @property
    def passed(self) -> bool:
        return all(r <= self.tolerance for r in self.max_relative)

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "max_relative": [float(r) for r in self.max_relative],
            "tolerance": self.tolerance,
            "phase_samples": self.samples,
            "passed": self.passed,
        }


def commutation_report(
    scene: PQScene, pairs, samples: int = 100, seed: int = 42, tol: float = 1e-5
) -> CommutationReport:
    rng = np.random.default_rng(seed)
    xs = scene.sample(samples, seed)
    ps = rng.standard_normal((samples, scene.dim))
    worst = []
    for t, s in pairs:
        rel = 0.0
        for x, p in zip(xs, ps):
            b, sc = poisson_bracket_terms(scene, t, s, PhasePoint(x, p))
            if b != 0.0:
                rel = max(rel, abs(b) / sc)
        worst.append(rel)
    return CommutationReport([tuple(p) for p in pairs], worst, tol, samples)


# --------------------------------------------------------------------------
# Approaching the level set {rho = c}


@dataclass
class ApproachProbe:
    """Values of a diagnostic F_c at geodesic points closing in on ``{rho = c}``."""

    crossing_time: float
    times: np.ndarray
    distances: np.ndarray  # |rho - c| at each probe point
    values: np.ndarray
    far_value: float


def _branch_value(scene, x, branch):
    G = scene.g.value(x)
    mu, _ = generalized_eigh(G, compute_A_at(scene, x))
    return mu[..., branch]


def _state_at(scene, traj: Trajectory, time: float):
    i = min(int(np.floor(time / traj.h)), len(traj) - 1)
    tau = time - traj.times[i]
    if tau == 0.0:
        return traj.positions[i], traj.velocities[i]
    return rk4_step(scene.g, traj.positions[i], traj.velocities[i], tau)


def find_crossing(scene: PQScene, init: GeodesicState, c: float, duration: float, h: float):
    """Integrate until the eigenvalue branch nearest ``c`` crosses ``c``.

    Returns the trajectory, the branch index and the crossing time.
    """
    traj = integrate_geodesic(scene.g, init, duration, h, scene.chart)
    mu0, _ = generalized_eigh(scene.g.value(init.x), compute_A_at(scene, init.x))
    branch = int(np.abs(mu0 - c).argmin())
    rho = _branch_value(scene, traj.positions, branch) - c
    flips = np.flatnonzero(np.sign(rho[1:]) != np.sign(rho[:-1]))
    if not len(flips):
        raise ValueError(f"geodesic does not reach the level set rho = {c:g}")
    i = int(flips[0])
    x0, v0 = traj.positions[i], traj.velocities[i]

    def gap(tau):
        if tau == 0.0:
            return rho[i]
        return float(_branch_value(scene, rk4_step(scene.g, x0, v0, tau)[0], branch)) - c

    tau = brentq(gap, 0.0, traj.h, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return traj, branch, traj.times[i] + tau


def exponent_probe(
    scene: PQScene,
    init: GeodesicState,
    c: float,
    k: int,
    duration: float = 1.0,
    h: float = 1e-3,
    n_probe: int = 10,
    min_offset: float = 1e-9,
) -> ApproachProbe:
    """Evaluate the diagnostic ``F_c`` (arbitrary k) at ``n_probe`` geodesic
    points whose time offsets to the crossing shrink geometrically."""
    traj, _, t_star = find_crossing(scene, init, c, duration, h)
    offsets = np.geomspace(0.5 * t_star, min_offset * max(t_star, 1.0), n_probe)
    times = t_star - offsets
    vals, dists = [], []
    for tm in times:
        x, v = _state_at(scene, traj, tm)
        vals.append(F_c_regularized_at(scene, c, k, v, x, diagnostic=True))
        G = scene.g.value(x)
        mu, _ = generalized_eigh(G, compute_A_at(scene, x))
        dists.append(np.abs(mu - c).min())
    far = F_c_regularized_at(scene, c, k, init.v, init.x, diagnostic=True)
    return ApproachProbe(t_star, times, np.array(dists), np.array(vals), far)
