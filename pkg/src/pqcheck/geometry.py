"""Riemannian primitives on a single coordinate chart.

Array conventions (leading ``...`` is an optional batch of points):

* metric ``G[..., i, j]`` and its partials ``dG[..., k, i, j] = d_k G_ij``
* (1,1)-tensor ``T[..., j, k] = T^j_k`` and ``dT[..., i, j, k] = d_i T^j_k``
* Christoffel symbols ``Gamma[..., k, i, j] = Gamma^k_ij``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.stats import qmc

from .expr import ExprDomainError, ScalarExpr, eval_jet, evaluate, parse_expr


class GeometryError(ValueError):
    pass


class SingularMetricError(GeometryError):
    pass


@dataclass(frozen=True)
class ChartDomain:
    """Coordinate box ``[lo_i, hi_i]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise GeometryError("domain bounds have different lengths")
        if len(self.lo) < 2:
            raise GeometryError("chart dimension must be at least 2")
        if any(not lo < hi for lo, hi in zip(self.lo, self.hi)):
            raise GeometryError(f"empty domain interval: lo={self.lo}, hi={self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def scale(self) -> float:
        return float(max(h - l for l, h in zip(self.lo, self.hi)))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= np.array(self.lo)) & (x <= np.array(self.hi)), axis=-1)

    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def sample(self, n: int, seed: int = 42) -> np.ndarray:
        """Stratified (Latin hypercube) sample of ``n`` interior points."""
        unit = qmc.LatinHypercube(d=self.dim, seed=np.random.default_rng(seed)).random(n)
        return qmc.scale(unit, self.lo, self.hi)

    def grid(self, n: int) -> np.ndarray:
        """``n`` points per axis on a cell-centred grid, in scan order."""
        axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _parse_matrix(entries, coords) -> tuple[tuple[ScalarExpr, ...], ...]:
    m = len(coords)
    if len(entries) != m or any(len(row) != m for row in entries):
        raise GeometryError(f"expected a {m}x{m} array of expressions")
    return tuple(
        tuple(e if isinstance(e, ScalarExpr) else parse_expr(str(e), coords) for e in row)
        for row in entries
    )


class _ExprMatrix:
    components: tuple[tuple[ScalarExpr, ...], ...]
    # each distinct expression with the cells it fills
    _groups: list[tuple[ScalarExpr, list[tuple[int, int]]]]

    @property
    def dim(self) -> int:
        return len(self.components)

    def value(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        m = self.dim
        out = np.empty(x.shape[:-1] + (m, m))
        for e, cells in self._groups:
            val = evaluate(e, x)
            for i, j in cells:
                out[..., i, j] = val
        return out

    def jet(self, point) -> tuple[np.ndarray, np.ndarray]:
        """Values ``M[..., i, j]`` and partials ``dM[..., k, i, j]``."""
        x = np.asarray(point, dtype=float)
        m = self.dim
        val = np.empty(x.shape[:-1] + (m, m))
        der = np.empty(x.shape[:-1] + (m, m, m))
        for e, cells in self._groups:
            jet = eval_jet(e, x)
            for i, j in cells:
                val[..., i, j] = jet.value
                der[..., :, i, j] = jet.gradient
        return val, der

    def strings(self) -> list[list[str]]:
        return [[str(e) for e in row] for row in self.components]


class MetricField(_ExprMatrix):
    """Symmetric (0,2)-tensor of expressions; the lower triangle mirrors the upper."""

    def __init__(self, entries, coords: Sequence[str]):
        comps = _parse_matrix(entries, tuple(coords))
        m = len(comps)
        for i in range(m):
            for j in range(i + 1, m):
                if comps[i][j] != comps[j][i]:
                    raise GeometryError(f"metric component ({j},{i}) does not mirror ({i},{j})")
        self.components = tuple(tuple(comps[min(i, j)][max(i, j)] for j in range(m)) for i in range(m))
        self._groups = [
            (comps[i][j], [(i, j)] if i == j else [(i, j), (j, i)])
            for i in range(m)
            for j in range(i, m)
        ]


class TensorField11(_ExprMatrix):
    """(1,1)-tensor field with mixed components ``T^i_j``."""

    def __init__(self, entries, coords: Sequence[str]):
        self.components = _parse_matrix(entries, tuple(coords))
        m = len(self.components)
        self._groups = [(self.components[i][j], [(i, j)]) for i in range(m) for j in range(m)]


# --------------------------------------------------------------------------
# Connection


def christoffel_from_jet(G: np.ndarray, dG: np.ndarray) -> np.ndarray:
    """Levi-Civita symbols ``Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)``."""
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError("metric is singular") from exc
    lowered = (
        np.einsum("...ijl->...lij", dG) + np.einsum("...jil->...lij", dG) - dG
    )
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", Ginv, lowered)
    return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))


def christoffel_at(g: MetricField, point) -> np.ndarray:
    G, dG = g.jet(point)
    return christoffel_from_jet(G, dG)


def cov_deriv_terms(T: np.ndarray, dT: np.ndarray, gamma: np.ndarray):
    """The three contributions to ``(nabla_i T)^j_k``.

    Returns ``(partial, connection_in, connection_out)`` with the covariant
    derivative equal to ``partial + connection_in - connection_out``.
    """
    conn_in = np.einsum("...jil,...lk->...ijk", gamma, T)
    conn_out = np.einsum("...lik,...jl->...ijk", gamma, T)
    return dT, conn_in, conn_out


TensorJet = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def cov_deriv_11_at(T: Union[TensorField11, TensorJet], g: MetricField, point) -> np.ndarray:
    """``(nabla_i T)^j_k`` at ``point``.

    ``T`` is either an expression field or a callable returning ``(T, dT)``,
    so that derived tensors such as A are differentiated through their
    pointwise construction.
    """
    val, der = T.jet(point) if isinstance(T, TensorField11) else T(point)
    partial, cin, cout = cov_deriv_terms(val, der, christoffel_at(g, point))
    return partial + cin - cout


def metric_cov_deriv_at(g: MetricField, point) -> np.ndarray:
    """``(nabla_i g)_jk``; zero for the Levi-Civita connection."""
    G, dG = g.jet(point)
    gamma = christoffel_from_jet(G, dG)
    return (
        dG
        - np.einsum("...lij,...lk->...ijk", gamma, G)
        - np.einsum("...lik,...jl->...ijk", gamma, G)
    )


def grad_scalar_at(g: MetricField, f, point) -> np.ndarray:
    """Metric gradient ``g^ij d_j f``.

    ``f`` is a :class:`ScalarExpr` or a callable returning ``(value, gradient)``.
    """
    if isinstance(f, ScalarExpr):
        jet = eval_jet(f, point)
        df = jet.gradient
    else:
        _, df = f(point)
    G = g.value(point)
    try:
        return np.linalg.solve(G, df[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError("metric is singular") from exc


def norm_g(G: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.abs(np.einsum("...i,...ij,...j->...", v, G, v)))


# --------------------------------------------------------------------------
# Geodesics


@dataclass(frozen=True)
class GeodesicState:
    x: np.ndarray
    v: np.ndarray


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    h: float
    reason: str  # "time-elapsed" | "left-domain"

    def __len__(self) -> int:
        return len(self.times)

    def state(self, i: int) -> GeodesicState:
        return GeodesicState(self.positions[i], self.velocities[i])


def geodesic_rhs(g: MetricField, x: np.ndarray, v: np.ndarray):
    gamma = christoffel_at(g, x)
    return v, -np.einsum("...kij,...i,...j->...k", gamma, v, v)


def rk4_step(g: MetricField, x: np.ndarray, v: np.ndarray, h: float):
    k1x, k1v = geodesic_rhs(g, x, v)
    k2x, k2v = geodesic_rhs(g, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = geodesic_rhs(g, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = geodesic_rhs(g, x + h * k3x, v + h * k3v)
    x_new = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


def integrate_geodesic(
    g: MetricField,
    init: GeodesicState,
    duration: float,
    h: float,
    domain: ChartDomain | None = None,
) -> Trajectory:
    """Fixed-step RK4 for ``x'' = -Gamma(x)(x', x')``.

    Integration stops at the last in-box sample when the path leaves
    ``domain``; negative ``duration`` integrates backwards in time.
    """
    if not h > 0:
        raise GeometryError("step size must be positive")
    x = np.asarray(init.x, dtype=float).copy()
    v = np.asarray(init.v, dtype=float).copy()
    if domain is not None and not domain.contains(x):
        raise GeometryError(f"initial point {x} outside the domain")
    n = int(round(abs(duration) / h))
    step = h if duration >= 0 else -h
    times, xs, vs = [0.0], [x], [v]
    reason = "time-elapsed"
    for i in range(n):
        try:
            x_new, v_new = rk4_step(g, x, v, step)
        except (ExprDomainError, SingularMetricError):
            reason = "left-domain"
            break
        if domain is not None and not domain.contains(x_new):
            reason = "left-domain"
            break
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
            raise GeometryError(f"non-finite geodesic state at t={(i + 1) * step}")
        x, v = x_new, v_new
        times.append((i + 1) * step)
        xs.append(x)
        vs.append(v)
    return Trajectory(np.array(times), np.array(xs), np.array(vs), h, reason)


def kinetic_energy(g: MetricField, positions, velocities) -> np.ndarray:
    G = g.value(positions)
    return np.einsum("...i,...ij,...j->...", velocities, G, velocities)
