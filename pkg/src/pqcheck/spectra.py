"""Eigenstructure of A and the structural checks built on it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pq_struct import (
    RESIDUAL_TOL,
    PointData,
    PQScene,
    compute_A_at,
    condition_checks,
    point_data,
    residual_report,
)

CLUSTER_REL = 1e-7
CONST_REL = 1e-6
SIMPLE_GAP = 1e-5


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class Cluster:
    value: float
    multiplicity: int
    members: tuple[int, ...]


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # g-orthonormal columns
    clusters: list[Cluster]
    delta: float

    @property
    def radius(self) -> float:
        return float(np.abs(self.eigenvalues).max())

    def min_gap(self) -> float:
        return float(np.diff(self.eigenvalues).min()) if len(self.eigenvalues) > 1 else np.inf


def generalized_eigh(G: np.ndarray, A: np.ndarray):
    """Solve ``(G A) v = mu G v`` with ``G = L L^T``.

    Returns ascending eigenvalues and g-orthonormal eigenvectors (columns),
    batched over leading axes.
    """
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise SpectrumError("metric Cholesky factorization failed (not positive definite)") from exc
    GA = G @ A
    GA = 0.5 * (GA + np.swapaxes(GA, -1, -2))
    Linv = np.linalg.inv(L)
    S = Linv @ GA @ np.swapaxes(Linv, -1, -2)
    mu, W = np.linalg.eigh(0.5 * (S + np.swapaxes(S, -1, -2)))
    V = np.swapaxes(Linv, -1, -2) @ W
    return mu, V


def cluster_eigenvalues(mu: np.ndarray, delta: float | None = None, rel: float = CLUSTER_REL) -> tuple[list[Cluster], float]:
    """Group sorted eigenvalues whose consecutive gaps are at most ``delta``.

    ``delta`` defaults to ``rel * (1 + spectral radius)``.
    """
    if delta is None:
        delta = rel * (1.0 + float(np.abs(mu).max()))
    groups = [[0]]
    for i in range(1, len(mu)):
        if mu[i] - mu[i - 1] <= delta:
            groups[-1].append(i)
        else:
            groups.append([i])
    return [Cluster(float(np.mean(mu[g])), len(g), tuple(g)) for g in groups], delta


def _spectrum(mu, V, delta=None, rel=CLUSTER_REL) -> Spectrum:
    clusters, d = cluster_eigenvalues(mu, delta, rel)
    return Spectrum(mu, V, clusters, d)


def eigen_at(scene: PQScene, point, delta: float | None = None, rel: float = CLUSTER_REL) -> Spectrum:
    """Spectrum of A at a single point."""
    x = np.asarray(point, dtype=float)
    mu, V = generalized_eigh(scene.g.value(x), compute_A_at(scene, x))
    return _spectrum(mu, V, delta, rel)


def spectra_at(scene: PQScene, points, rel: float = CLUSTER_REL) -> list[Spectrum]:
    x = np.asarray(points, dtype=float)
    mu, V = generalized_eigh(scene.g.value(x), compute_A_at(scene, x))
    return [_spectrum(mu[n], V[n], None, rel) for n in range(len(x))]


# --------------------------------------------------------------------------
# Eigenvalue gradients


def _dGA(d: PointData):
    """Partials of the symmetric matrix ``G A``: ``[..., k, i, j]``."""
    return np.einsum("...kil,...lj->...kij", d.dG, d.A) + np.einsum("...il,...klj->...kij", d.G, d.dA)


def eigenvalue_gradients(d: PointData, mu: np.ndarray, V: np.ndarray) -> np.ndarray:
    """g-gradients of every eigenvalue branch, ``[..., branch, :]``.

    First-order perturbation: ``d_w mu = v^T (d_w(GA) - mu d_w G) v / v^T G v``.
    Only meaningful where the branch is simple.
    """
    dK = _dGA(d)
    num = np.einsum("...ib,...kij,...jb->...bk", V, dK, V) - mu[..., :, None] * np.einsum(
        "...ib,...kij,...jb->...bk", V, d.dG, V
    )
    den = np.einsum("...ib,...ij,...jb->...b", V, d.G, V)
    dmu = num / den[..., None]
    return np.linalg.solve(d.G[..., None, :, :], dmu[..., None])[..., 0]


def eigenvalue_gradient_at(scene: PQScene, point, branch: int, min_gap: float = SIMPLE_GAP) -> np.ndarray:
    x = np.asarray(point, dtype=float)
    d = point_data(scene, x)
    mu, V = generalized_eigh(d.G, d.A)
    gaps = np.abs(mu - mu[branch])
    gaps[branch] = np.inf
    if gaps.min() <= min_gap:
        raise SpectrumError(
            f"eigenvalue branch {branch} is not simple at {x} (gap {gaps.min():.3g} <= {min_gap:g})"
        )
    return eigenvalue_gradients(d, mu, V)[branch]


def eigenvector_partials(d: PointData, mu: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``d_k v_b`` for g-normalized eigenvectors of a simple spectrum, ``[..., k, :, b]``."""
    dK = _dGA(d)
    m = mu.shape[-1]
    # coupling[..., k, a, b] = v_a^T (dK_k - mu_b dG_k) v_b
    couple = np.einsum("...ia,...kij,...jb->...kab", V, dK, V) - mu[..., None, None, :] * np.einsum(
        "...ia,...kij,...jb->...kab", V, d.dG, V
    )
    diff = mu[..., None, :] - mu[..., :, None]  # [a, b] = mu_b - mu_a
    eye = np.eye(m, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(eye, 0.0, couple / diff[..., None, :, :])
    norm_fix = -0.5 * np.einsum("...ib,...kij,...jb->...kb", V, d.dG, V)
    coef = coef + np.einsum("...kb,ab->...kab", norm_fix, np.eye(m))
    return np.einsum("...ia,...kab->...kib", V, coef)


# --------------------------------------------------------------------------
# Lemma checks


@dataclass
class CheckReport:
    name: str
    passed: bool
    checked: int
    skipped: int
    metrics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "checked": self.checked,
            "skipped": self.skipped,
            "metrics": self.metrics,
            "thresholds": self.thresholds,
            "notes": self.notes,
        }


def _gnorm(G, v):
    return np.sqrt(np.abs(np.einsum("...i,...ij,...j->...", v, G, v)))


def _simple_mask(mu, min_gap):
    return np.diff(mu, axis=-1).min(axis=-1) > min_gap


def _is_affine(d: PointData, tol: float = 1e-8) -> bool:
    lam = _gnorm(d.G, d.Lambda)
    return bool(np.all(lam <= tol * np.maximum(1.0, np.linalg.norm(d.A, axis=(-2, -1)))))


def lemma_eigenvectors_check(
    scene: PQScene,
    points,
    tol_orth: float = 1e-7,
    tol_eigen: float = 1e-6,
    min_gap: float = SIMPLE_GAP,
    with_eigenvector_derivative: bool = False,
) -> CheckReport:
    """grad mu_i is g-orthogonal to the other eigenvectors and lies in the
    mu_i-eigenspace, at every sample point with simple spectrum."""
    d = point_data(scene, points)
    mu, V = generalized_eigh(d.G, d.A)
    simple = _simple_mask(mu, min_gap)
    thresholds = {"orthogonality": tol_orth, "eigenspace": tol_eigen, "simple_gap": min_gap}
    if not simple.any():
        if _is_affine(d):
            return CheckReport("lemma_eigenvectors", True, 0, len(mu), thresholds=thresholds,
                               notes=["affine pair: all eigenvalue gradients vanish"])
        raise SpectrumError("no sample point with simple spectrum")
    sel = np.flatnonzero(simple)
    ds = _subset(d, sel)
    mu, V = mu[sel], V[sel]
    grads = eigenvalue_gradients(ds, mu, V)  # [n, i, :]
    gnorm = _gnorm(ds.G[:, None], grads)  # [n, i]
    radius = np.abs(mu).max(axis=-1)
    floor = CONST_REL * (1.0 + radius)
    scale_a = np.maximum(gnorm.max(axis=-1), floor)
    # (a) g(grad mu_i, v_j) for j != i
    inner = np.abs(np.einsum("nia,nab,nbj->nij", grads, ds.G, V))
    m = mu.shape[-1]
    inner[:, np.arange(m), np.arange(m)] = 0.0
    rel_a = inner.max(axis=(-1, -2)) / scale_a
    # (b) (A - mu_i) grad mu_i
    Ag = np.einsum("nab,nib->nia", ds.A, grads) - mu[..., None] * grads
    spread = np.maximum(mu[:, -1] - mu[:, 0], floor)
    rel_b = (_gnorm(ds.G[:, None], Ag) / (np.maximum(gnorm, floor[:, None]) * spread[:, None])).max(axis=-1)
    passed = bool(rel_a.max() <= tol_orth and rel_b.max() <= tol_eigen)
    metrics = {
        "max_orthogonality_rel": float(rel_a.max()),
        "max_eigenspace_rel": float(rel_b.max()),
        "eigenspace_fail_fraction": float(np.mean(rel_b > tol_eigen)),
    }
    if with_eigenvector_derivative:
        defect = eigenvector_derivative_defect(ds, mu, V, grads)
        metrics["max_eigenvector_derivative_rel"] = float(defect.max())
    notes = []
    if (~simple).any():
        notes.append(f"{int((~simple).sum())} samples skipped: eigenvalue gap <= {min_gap:g}")
    return CheckReport("lemma_eigenvectors", passed, len(sel), int((~simple).sum()), metrics, thresholds, notes)


def _subset(d: PointData, idx) -> PointData:
    kw = {}
    for name in d.__dataclass_fields__:
        val = getattr(d, name)
        kw[name] = val[idx] if isinstance(val, np.ndarray) and val.ndim > 0 else val
    return PointData(**kw)


def eigenvector_derivative_defect(d: PointData, mu, V, grads) -> np.ndarray:
    """Relative defect of
    ``(A - mu) nabla_X Y = X(mu) Y - g(Y,X)L - g(Y,L)X - g(Y,QX)PL - g(Y,PL)QX``
    for each eigenvector field Y and coordinate direction X, per point.

    The identity is linear in Y, so rescaling the eigenvector field (the
    gauge) scales both sides equally.
    """
    dV = eigenvector_partials(d, mu, V)  # [n, k, :, b]
    # nabla_{e_k} Y_b = d_k Y_b + Gamma(e_k, Y_b)
    nab = dV + np.einsum("nlkj,njb->nklb", d.gamma, V)
    m = mu.shape[-1]
    lhs = np.einsum("nij,nkjb->nkib", d.A, nab) - mu[:, None, None, :] * nab
    dmu = np.einsum("nbj,njl->nbl", grads, d.G)  # covector d mu_b
    Lam = d.Lambda
    GV = np.einsum("nij,njb->nib", d.G, V)  # lowered Y_b
    PL = np.einsum("nij,nj->ni", d.P, Lam)
    QX = d.Q  # Q e_k = column k
    t0 = dmu.transpose(0, 2, 1)[:, :, None, :] * V[:, None, :, :]  # X(mu) Y
    t1 = GV[:, :, None, :] * Lam[:, None, :, None]  # g(Y, e_k) L
    gYL = np.einsum("nib,ni->nb", V, np.einsum("nij,nj->ni", d.G, Lam))
    t2 = gYL[:, None, None, :] * np.eye(m)[None, :, :, None]  # g(Y, L) e_k
    gYQX = np.einsum("nib,nij,njk->nkb", V, d.G, QX)
    t3 = gYQX[:, :, None, :] * PL[:, None, :, None]
    gYPL = np.einsum("nib,nij,nj->nb", V, d.G, PL)
    t4 = gYPL[:, None, None, :] * np.swapaxes(QX, -1, -2)[:, :, :, None]
    rhs = t0 - t1 - t2 - t3 - t4
    terms = [lhs, t0, t1, t2, t3, t4]

    def gn(v):  # v[n, k, i, b] -> [n, k, b]
        return np.sqrt(np.abs(np.einsum("nkib,nij,nkjb->nkb", v, d.G, v)))

    scale = np.max([gn(t).max(axis=(-1, -2)) for t in terms], axis=0)
    return gn(lhs - rhs).max(axis=(-1, -2)) / np.maximum(scale, np.finfo(float).eps)


@dataclass
class EigenvalueTrace:
    spectra: list[Spectrum]
    kept: np.ndarray  # indices of samples with the maximal cluster count
    values: np.ndarray  # [kept, branch] cluster values
    multiplicities: np.ndarray  # [kept, branch]
    variation: np.ndarray  # per branch
    constant: np.ndarray  # per branch
    delta_const: float
    ambiguous: list[int] = field(default_factory=list)

    @property
    def max_cluster_count(self) -> int:
        return self.values.shape[1]


def trace_eigenvalues(spectra: list[Spectrum], const_rel: float = CONST_REL, path: bool = False) -> EigenvalueTrace:
    """Label eigenvalue clusters into branches across samples.

    Samples with fewer clusters than the maximum seen (near-crossings) are
    skipped. On a connected ``path`` each step is also matched to the previous
    one by nearest value; disagreement with the sorted labelling is flagged.
    """
    counts = np.array([len(s.clusters) for s in spectra])
    r = int(counts.max())
    kept = np.flatnonzero(counts == r)
    values = np.array([[c.value for c in spectra[i].clusters] for i in kept])
    mults = np.array([[c.multiplicity for c in spectra[i].clusters] for i in kept])
    ambiguous = []
    if path:
        for a, b in zip(kept[:-1], kept[1:]):
            prev = np.array([c.value for c in spectra[a].clusters])
            cur = np.array([c.value for c in spectra[b].clusters])
            nearest = np.abs(cur[:, None] - prev[None, :]).argmin(axis=1)
            if not np.array_equal(nearest, np.arange(r)):
                ambiguous.append(int(b))
    radius = max(s.radius for s in spectra)
    delta_const = const_rel * (1.0 + radius)
    variation = values.max(axis=0) - values.min(axis=0)
    return EigenvalueTrace(spectra, kept, values, mults, variation, variation <= delta_const, delta_const, ambiguous)


def lemma_dim_check(scene: PQScene, points, const_rel: float = CONST_REL, rank_tol: float = 1e-8, path: bool = False) -> CheckReport:
    """Non-constant eigenvalues have multiplicity ``1 - eps``; for ``eps != 0``
    every eigenspace is even-dimensional and ``g(P., .)`` is non-degenerate on it."""
    x = np.asarray(points, dtype=float)
    spectra = spectra_at(scene, x)
    trace = trace_eigenvalues(spectra, const_rel, path)
    eps = scene.epsilon
    expected = 1.0 - eps
    nonconst = np.flatnonzero(~trace.constant)
    ok_mult = True
    bad = []
    for b in nonconst:
        mults = trace.multiplicities[:, b]
        if not np.all(mults == expected):
            ok_mult = False
            bad.append({"branch": int(b), "multiplicities": sorted(set(int(v) for v in mults))})
    metrics = {
        "max_cluster_count": trace.max_cluster_count,
        "branch_variation": [float(v) for v in trace.variation],
        "nonconstant_branches": [int(b) for b in nonconst],
        "nonconstant_multiplicities": [
            sorted(set(int(v) for v in trace.multiplicities[:, b])) for b in nonconst
        ],
        "expected_multiplicity": expected,
    }
    notes = [f"maximal distinct-eigenvalue count seen on the sample set: {trace.max_cluster_count}"]
    if bad:
        notes.append(f"multiplicity mismatch: {bad}")
    skipped = len(spectra) - len(trace.kept)
    if skipped:
        notes.append(f"{skipped} samples skipped: fewer distinct eigenvalues (near-crossing)")
    if trace.ambiguous:
        notes.append(f"{len(trace.ambiguous)} path samples with ambiguous branch matching")
    passed = ok_mult
    if eps != 0:
        P = scene.P.value(x[trace.kept])
        G = scene.g.value(x[trace.kept])
        even = True
        min_sv = np.inf
        for n, i in enumerate(trace.kept):
            s = spectra[i]
            V = s.eigenvectors
            omega = V.T @ G[n] @ P[n] @ V
            scale = max(np.linalg.norm(omega, 2), np.finfo(float).tiny)
            for c in s.clusters:
                if c.multiplicity % 2:
                    even = False
                block = omega[np.ix_(c.members, c.members)]
                min_sv = min(min_sv, np.linalg.svd(block, compute_uv=False).min() / scale)
        metrics["eigenspaces_even"] = even
        metrics["min_restricted_omega_singular_value_rel"] = float(min_sv)
        passed = passed and even and min_sv > rank_tol
    thresholds = {"delta_const": trace.delta_const, "const_rel": const_rel, "cluster_rel": CLUSTER_REL, "rank_tol": rank_tol}
    return CheckReport("lemma_dim", bool(passed), len(trace.kept), skipped, metrics, thresholds, notes)


# --------------------------------------------------------------------------
# Classification


@dataclass
class Classification:
    verdict: str
    evidence: dict

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "evidence": self.evidence}


def odd_negative_integer(eps: float, tol: float = 1e-9) -> bool:
    n = round(eps)
    return eps < 0 and abs(eps - n) <= tol and n % 2 != 0


def classify_pair(
    scene: PQScene,
    points=None,
    samples: int = 1000,
    seed: int = 42,
    tol: float = RESIDUAL_TOL,
    affine_tol: float = 1e-8,
    p_lambda_tol: float = 1e-8,
) -> Classification:
    """Affine / projective (eps = 0) / PQ^eps class, or inconsistent with
    the evidence that failed."""
    pts = scene.sample(samples, seed) if points is None else np.asarray(points, dtype=float)
    ev = {}
    conds = condition_checks(scene, pts)
    ev["conditions"] = {"passed": all(c.passed for c in conds), "failed": [c.name for c in conds if not c.passed]}
    main = residual_report(scene, "main", points=pts, tolerance=tol)
    ev["main_residual"] = {"passed": main.passed, "max_relative": main.max_relative, "tolerance": tol}
    d = point_data(scene, pts)
    lam = _gnorm(d.G, d.Lambda)
    lam_scale = np.maximum(1.0, np.linalg.norm(d.A, axis=(-2, -1)))
    affine = bool(np.all(lam <= affine_tol * lam_scale))
    ev["lambda_vanishes"] = {"passed": affine, "max_relative": float((lam / lam_scale).max()), "tolerance": affine_tol}
    if not (ev["conditions"]["passed"] and main.passed):
        return Classification("inconsistent", ev)
    if affine:
        return Classification("affine", ev)
    eps = scene.epsilon
    if eps == 0:
        PL = _gnorm(d.G, np.einsum("nij,nj->ni", d.P, d.Lambda))
        p_rel = float((PL / (1.0 + lam)).max())
        ev["P_lambda"] = {"passed": p_rel <= p_lambda_tol, "max_relative": p_rel, "tolerance": p_lambda_tol}
        proj = residual_report(scene, "projective", points=pts, tolerance=tol)
        ev["projective_residual"] = {"passed": proj.passed, "max_relative": proj.max_relative, "tolerance": tol}
        if ev["P_lambda"]["passed"] and proj.passed:
            return Classification("projective_eps0", ev)
        return Classification("inconsistent", ev)
    ev["eps_odd_negative"] = {"passed": odd_negative_integer(eps), "epsilon": eps, "tolerance": 1e-9}
    dim = lemma_dim_check(scene, pts)
    ev["lemma_dim"] = dim.to_dict()
    if ev["eps_odd_negative"]["passed"] and dim.passed:
        n = int(round(eps))
        return Classification(f"pq_eps_class({n})", ev)
    return Classification("inconsistent", ev)
