"""Penalized cubic regression splines used as cluster centers.

The basis is a natural cubic spline parametrized by its values at the knots
(the "cr" construction of Green & Silverman / Wood).  Between knots the curve
is cubic, it is C2 everywhere, linear beyond the boundary knots, and the
integrated squared second derivative is an exact quadratic form in the
coefficients.  Affine functions lie in the null space of that form, so they
are reproduced for any smoothing parameter.

All curvature computations happen on time rescaled to [0, 1] over the basis
boundary.  That keeps the smoothing parameter free of time units: shifting or
rescaling time does not change the fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

LOG10_LAMBDA_RANGE = (-6.0, 8.0)
GRID_POINTS = 15
GOLDEN_TOL = 1e-3
MIN_DISTINCT_TIMES = 4


class SplineError(Exception):
    """Base class for spline fitting failures."""


class InsufficientSupportError(SplineError):
    """Too few distinct time points to build a basis."""


class FitFailureError(SplineError):
    """The penalized normal equations could not be solved."""


@dataclass(frozen=True)
class SplineBasisSpec:
    """Knot layout of a natural cubic regression spline.

    ``knots`` holds every knot including the two boundary knots, so
    ``len(knots) == n_basis``.
    """

    knots: np.ndarray
    boundary: tuple[float, float]

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or len(knots) < 3:
            raise ValueError("a cubic regression spline needs at least 3 knots")
        if not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")
        lo, hi = float(self.boundary[0]), float(self.boundary[1])
        if not (lo == knots[0] and hi == knots[-1]):
            raise ValueError("boundary must coincide with the outer knots")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "boundary", (lo, hi))

    @property
    def n_basis(self) -> int:
        return len(self.knots)

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[1:-1]

    @property
    def span(self) -> float:
        return self.boundary[1] - self.boundary[0]

    def to_unit(self, times) -> np.ndarray:
        return (np.asarray(times, dtype=float) - self.boundary[0]) / self.span

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "boundary": list(self.boundary)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasisSpec":
        return cls(np.asarray(d["knots"], dtype=float), tuple(d["boundary"]))


@dataclass(frozen=True)
class SplineModel:
    spec: SplineBasisSpec
    coefficients: np.ndarray
    lam: float
    edf: float
    n_obs: int
    rss: float

    @property
    def gcv(self) -> float:
        return gcv_score(self.rss, self.edf, self.n_obs)

    @property
    def aic(self) -> float:
        """Gaussian AIC-style score, n log(rss/n) + 2 edf."""
        if self.rss <= 0:
            return -math.inf
        return self.n_obs * math.log(self.rss / self.n_obs) + 2.0 * self.edf

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "lambda": self.lam,
            "edf": self.edf,
            "n_obs": self.n_obs,
            "rss": self.rss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineModel":
        return cls(
            spec=SplineBasisSpec.from_dict(d["spec"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            lam=float(d["lambda"]),
            edf=float(d["edf"]),
            n_obs=int(d["n_obs"]),
            rss=float(d["rss"]),
        )


def gcv_score(rss: float, edf: float, n: int) -> float:
    denom = n - edf
    if denom <= 0:
        return math.inf
    return n * rss / denom**2


def make_basis_spec(times, maxdf: int) -> SplineBasisSpec:
    """Place ``min(maxdf, #distinct - 1)`` knots at quantiles of the distinct times."""
    distinct = np.unique(np.asarray(times, dtype=float))
    if len(distinct) < MIN_DISTINCT_TIMES:
        raise InsufficientSupportError(
            f"{len(distinct)} distinct time values; at least {MIN_DISTINCT_TIMES} are required"
        )
    n_basis = max(3, min(int(maxdf), len(distinct) - 1))
    knots = np.quantile(distinct, np.linspace(0.0, 1.0, n_basis))
    knots[0], knots[-1] = distinct[0], distinct[-1]
    return SplineBasisSpec(knots, (distinct[0], distinct[-1]))


def _second_derivative_map(u_knots: np.ndarray):
    """Return (F, D, B) with F mapping knot values to knot second derivatives.

    D is the (k-2) x k second-difference operator and B the (k-2) x (k-2)
    tridiagonal matrix of the natural-spline continuity conditions; the
    interior second derivatives are B^{-1} D beta and both ends are zero.
    """
    k = len(u_knots)
    h = np.diff(u_knots)
    D = np.zeros((k - 2, k))
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    F = np.zeros((k, k))
    F[1:-1] = scipy.linalg.solve(B, D, assume_a="pos")
    return F, D, B


def _unit_basis(uk: np.ndarray, F: np.ndarray, u: np.ndarray, deriv: int) -> np.ndarray:
    """Basis values or derivatives on the unit scale, for ``u`` inside [0, 1]."""
    k = len(uk)
    n = len(u)
    j = np.clip(np.searchsorted(uk, u, side="right") - 1, 0, k - 2)
    h = uk[j + 1] - uk[j]
    am = uk[j + 1] - u
    ap = u - uk[j]
    rows = np.arange(n)
    A = np.zeros((n, k))
    C = np.zeros((n, k))
    if deriv == 0:
        A[rows, j] = am / h
        A[rows, j + 1] = ap / h
        C[rows, j] = (am**3 / h - h * am) / 6.0
        C[rows, j + 1] = (ap**3 / h - h * ap) / 6.0
    elif deriv == 1:
        A[rows, j] = -1.0 / h
        A[rows, j + 1] = 1.0 / h
        C[rows, j] = -(3.0 * am**2 / h - h) / 6.0
        C[rows, j + 1] = (3.0 * ap**2 / h - h) / 6.0
    else:
        C[rows, j] = am / h
        C[rows, j + 1] = ap / h
    return A + C @ F


def _unit_knots(spec: SplineBasisSpec) -> np.ndarray:
    uk = spec.to_unit(spec.knots)
    uk[0], uk[-1] = 0.0, 1.0
    return uk


def design_matrix(spec: SplineBasisSpec, times, deriv: int = 0) -> np.ndarray:
    """Evaluate every basis function (or its ``deriv``-th derivative) at ``times``.

    Derivatives are taken with respect to the original time units.  Outside
    the boundary the basis continues linearly.
    """
    if deriv not in (0, 1, 2):
        raise ValueError("deriv must be 0, 1 or 2")
    u = spec.to_unit(np.atleast_1d(np.asarray(times, dtype=float)))
    uk = _unit_knots(spec)
    if len(u) == 0:
        return np.zeros((0, len(uk)))
    F, _, _ = _second_derivative_map(uk)
    uc = np.clip(u, 0.0, 1.0)
    X = _unit_basis(uk, F, uc, deriv)
    outside = u != uc
    if np.any(outside):
        if deriv == 0:
            slope = _unit_basis(uk, F, uc[outside], 1)
            X[outside] += (u[outside] - uc[outside])[:, None] * slope
        elif deriv == 2:
            X[outside] = 0.0
    if deriv:
        X /= spec.span**deriv
    return X


def penalty_matrix(spec: SplineBasisSpec) -> np.ndarray:
    """Integrated squared second derivative, on time rescaled to [0, 1].

    For coefficient vectors a, b the entry a^T S b equals the integral of
    f_a'' f_b'' over the unit interval.  In original time units the integral
    is ``a^T S b / span**3``.
    """
    _, D, B = _second_derivative_map(_unit_knots(spec))
    S = D.T @ scipy.linalg.solve(B, D, assume_a="pos")
    return 0.5 * (S + S.T)


@dataclass
class _PenalizedSystem:
    """Sufficient statistics of one penalized least-squares problem.

    With G = X^T X = R^T R and R^{-T} S R^{-1} = U diag(d) U^T, every
    smoothing parameter reduces to diagonal algebra:
    beta = R^{-1} U (I + lam d)^{-1} z with z = U^T R^{-T} X^T y.
    When G is singular the solve falls back to factoring G + lam S directly.
    """

    G: np.ndarray
    Xty: np.ndarray
    yty: float
    n: int
    S: np.ndarray
    R: np.ndarray | None = field(default=None, init=False)
    U: np.ndarray | None = field(default=None, init=False)
    d: np.ndarray | None = field(default=None, init=False)
    z: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        try:
            R = scipy.linalg.cholesky(self.G, lower=False)
        except np.linalg.LinAlgError:
            return
        if not np.all(np.isfinite(R)):
            return
        diag = np.abs(np.diag(R))
        if diag.min() <= 1e-7 * diag.max():
            return
        Rinv_S = scipy.linalg.solve_triangular(R, self.S, trans="T", lower=False)
        M = scipy.linalg.solve_triangular(R, Rinv_S.T, trans="T", lower=False)
        d, U = np.linalg.eigh(0.5 * (M + M.T))
        # the penalty has an exact two-dimensional (affine) null space
        d[:2] = 0.0
        d = np.maximum(d, 0.0)
        self.R, self.U, self.d = R, U, d
        self.z = U.T @ scipy.linalg.solve_triangular(R, self.Xty, trans="T", lower=False)

    @classmethod
    def build(cls, X: np.ndarray, y: np.ndarray, S: np.ndarray) -> "_PenalizedSystem":
        return cls(G=X.T @ X, Xty=X.T @ y, yty=float(y @ y), n=len(y), S=S)

    def solve(self, lam: float) -> tuple[np.ndarray, float, float]:
        """Return (coefficients, edf, rss) for smoothing parameter ``lam``."""
        if self.R is not None:
            shrink = 1.0 / (1.0 + lam * self.d)
            w = shrink * self.z
            beta = scipy.linalg.solve_triangular(self.R, self.U @ w, lower=False)
            edf = float(shrink.sum())
            rss0 = self.yty - float(self.z @ self.z)
            rss = max(rss0, 0.0) + float(np.sum(((1.0 - shrink) * self.z) ** 2))
            return beta, edf, rss
        return self._solve_direct(lam)

    def _solve_direct(self, lam: float):
        M = self.G + lam * self.S
        try:
            cf = scipy.linalg.cho_factor(M)
        except np.linalg.LinAlgError:
            ridge = 1e-10 * float(np.mean(np.diag(M)))
            try:
                cf = scipy.linalg.cho_factor(M + ridge * np.eye(len(M)))
            except np.linalg.LinAlgError as exc:
                raise FitFailureError("penalized normal equations are singular") from exc
        beta = scipy.linalg.cho_solve(cf, self.Xty)
        edf = float(np.trace(scipy.linalg.cho_solve(cf, self.G)))
        rss = self.yty - 2.0 * float(beta @ self.Xty) + float(beta @ self.G @ beta)
        return beta, edf, max(rss, 0.0)

    def gcv(self, log10_lam: float) -> float:
        _, edf, rss = self.solve(10.0**log10_lam)
        return gcv_score(rss, edf, self.n)


def _prepare(times, responses, spec):
    t = np.asarray(times, dtype=float)
    y = np.asarray(responses, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and responses must be 1-d vectors of equal length")
    if len(t) == 0:
        raise FitFailureError("no observations")
    X = design_matrix(spec, t)
    return X, y


def _finish(spec, X, y, beta, lam, edf) -> SplineModel:
    if not np.all(np.isfinite(beta)):
        raise FitFailureError("non-finite spline coefficients")
    resid = y - X @ beta
    return SplineModel(
        spec=spec,
        coefficients=beta,
        lam=float(lam),
        edf=float(edf),
        n_obs=len(y),
        rss=float(resid @ resid),
    )


def penalty_scale(X: np.ndarray, S: np.ndarray) -> float:
    """Factor that puts the penalty on the scale of the design, as mgcv does.

    ``||X||_inf^2 / ||S||_1``; it keeps the normal equations well conditioned
    across the whole smoothing-parameter range.
    """
    return float(np.linalg.norm(X, np.inf) ** 2 / np.linalg.norm(S, 1))


def scaled_penalty(spec: SplineBasisSpec, X: np.ndarray) -> np.ndarray:
    S = penalty_matrix(spec)
    return penalty_scale(X, S) * S


def fit_penalized(times, responses, spec: SplineBasisSpec, lam: float) -> SplineModel:
    """Minimize ||y - X beta||^2 + lam * beta^T S beta for a fixed ``lam``.

    ``S`` is the curvature penalty rescaled by :func:`penalty_scale`.
    """
    if lam < 0:
        raise ValueError("smoothing parameter must be nonnegative")
    X, y = _prepare(times, responses, spec)
    system = _PenalizedSystem.build(X, y, scaled_penalty(spec, X))
    beta, edf, _ = system.solve(lam)
    return _finish(spec, X, y, beta, lam, edf)


def _golden_section(f, a: float, b: float, tol: float = GOLDEN_TOL):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def select_lambda(times, responses, spec: SplineBasisSpec) -> tuple[float, SplineModel]:
    """Choose the smoothing parameter by generalized cross-validation.

    A 15-point scan of log10(lambda) over [-6, 8] brackets the minimum, which
    golden-section search then refines.
    """
    X, y = _prepare(times, responses, spec)
    if len(y) < MIN_DISTINCT_TIMES:
        raise FitFailureError(f"{len(y)} observations are too few for cross-validation")
    system = _PenalizedSystem.build(X, y, scaled_penalty(spec, X))

    grid = np.linspace(*LOG10_LAMBDA_RANGE, GRID_POINTS)
    scores = np.array([system.gcv(g) for g in grid])
    if not np.any(np.isfinite(scores)):
        raise FitFailureError("no smoothing parameter leaves residual degrees of freedom")
    i = int(np.argmin(scores))
    best_log, best_score = float(grid[i]), float(scores[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, GRID_POINTS - 1)]
    g_log, g_score = _golden_section(system.gcv, float(lo), float(hi))
    if g_score < best_score:
        best_log = g_log

    lam = 10.0**best_log
    beta, edf, _ = system.solve(lam)
    return lam, _finish(spec, X, y, beta, lam, edf)


def predict(model: SplineModel, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        return np.zeros(0)
    return design_matrix(model.spec, t.ravel()) @ model.coefficients
