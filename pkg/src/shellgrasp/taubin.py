"""Taubin quadric fitting and the median-curvature candidate test.

The fit minimizes ``c^T M c`` subject to ``c^T N c = 1`` where ``M`` sums
outer products of the monomial vector ``l(x)`` and ``N`` sums outer
products of its spatial derivatives. Fitting happens in a frame centered on
the point centroid and scaled by the mean distance to it; the returned
quadric is expressed in world coordinates.

The ``batch_*`` kernels process many point groups at once (see
:mod:`shellgrasp._segments`); the single-group functions are thin wrappers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _segments as seg
from .errors import (
    DegenerateFit,
    DegenerateGradient,
    InsufficientPoints,
    ProjectionFailure,
    ZeroGradientConstraint,
)
from .geometry import (
    Quadric,
    affine_coeffs,
    canonical_sign,
    eval_quadric,
    gradient_tolerance,
    principal_curvatures_batch,
    quadric_gradient,
)

__all__ = [
    "MomentMatrices",
    "TaubinFit",
    "CurvatureEstimate",
    "monomials",
    "moment_matrices",
    "fit_taubin",
    "fit_taubin_full",
    "rayleigh_residual",
    "estimate_curvature",
    "passes_curvature_gate",
    "batch_fit_taubin",
    "batch_curvature",
    "TaubinQuadricFitter",
]

MIN_FIT_POINTS = 10
EIGEN_GAP_RTOL = 1e-12
RIDGE_RTOL = 1e-12
NEWTON_STEPS = 10
NEWTON_TOL = 1e-10

# exponents of l(x) in canonical order
_L_EXP = [(2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (0, 1, 1), (1, 0, 1),
          (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_L_POS = {e: i for i, e in enumerate(_L_EXP)}


def _derivative(e, k):
    if e[k] == 0:
        return None
    d = list(e)
    d[k] -= 1
    return float(e[k]), tuple(d)


def _n_terms():
    # N[i, j] = sum_k d_k l_i * d_k l_j; every such product has degree <= 2,
    # so it is one entry of sum(l), i.e. the last column of M
    terms = []
    for k in range(3):
        coef = np.zeros(100)
        idx = np.zeros(100, dtype=np.int64)
        for i, a in enumerate(_L_EXP):
            for j, b in enumerate(_L_EXP):
                da, db = _derivative(a, k), _derivative(b, k)
                if da is not None and db is not None:
                    coef[10 * i + j] = da[0] * db[0]
                    idx[10 * i + j] = _L_POS[tuple(x + y for x, y in zip(da[1], db[1]))]
        terms.append((coef, idx))
    return terms


_N_TERMS = _n_terms()


def monomials(u: np.ndarray) -> np.ndarray:
    """Monomial design matrix ``l(u)`` of shape ``(n, 10)``."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    one = np.ones_like(x)
    return np.column_stack([x * x, y * y, z * z, x * y, y * z, x * z, x, y, z, one])


def _n_from_m(M):
    s = M[:, :, 9]
    N = np.zeros((len(M), 100))
    for coef, idx in _N_TERMS:
        N += coef * s[:, idx]
    return N.reshape(-1, 10, 10)


def _condition(P, offsets):
    gid = seg.group_ids(offsets)
    centroid = seg.seg_mean(P, offsets)
    D = P - centroid[gid]
    dist = np.sqrt(D[:, 0] ** 2 + D[:, 1] ** 2 + D[:, 2] ** 2)
    scale = seg.seg_mean(dist, offsets)
    scale = np.where(scale > 0, scale, 1.0)
    return centroid, scale, D / scale[gid][:, None]


@dataclass(frozen=True, eq=False)
class MomentMatrices:
    """Scatter matrices accumulated in the conditioned frame ``u = (x - centroid) / scale``."""

    M: np.ndarray
    N: np.ndarray
    count: int
    centroid: np.ndarray
    scale: float

    def to_frame(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.centroid) / self.scale

    def from_frame(self, U) -> np.ndarray:
        return np.asarray(U, dtype=float) * self.scale + self.centroid

    def conditioned_coeffs(self, q) -> np.ndarray:
        """Unit-norm coefficients of world quadric ``q`` rewritten in the conditioned frame."""
        c = q.coeffs if isinstance(q, Quadric) else np.asarray(q, dtype=float)
        s = self.scale
        c2 = affine_coeffs(c, np.eye(3) / s, -self.centroid / s)
        return c2 / np.linalg.norm(c2)

    def world_quadric(self, c_cond) -> Quadric:
        return Quadric(affine_coeffs(c_cond, np.eye(3) * self.scale, self.centroid))


def _as_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {P.shape}")
    return P


def batch_moments(P, offsets):
    """Conditioned moment matrices for every group.

    Returns:
        ``(M, N, centroid, scale)`` with shapes ``(B,10,10)``, ``(B,10,10)``,
        ``(B,3)``, ``(B,)``.
    """
    centroid, scale, U = _condition(P, offsets)
    L = monomials(U)
    M = np.empty((len(offsets) - 1, 10, 10))
    for i in range(len(M)):
        Li = L[offsets[i]:offsets[i + 1]]
        M[i] = Li.T @ Li
    return M, _n_from_m(M), centroid, scale


def moment_matrices(points) -> MomentMatrices:
    P = _as_points(points)
    if len(P) == 0:
        raise InsufficientPoints("no points")
    off = np.array([0, len(P)])
    M, N, c, s = batch_moments(P, off)
    return MomentMatrices(M[0], N[0], len(P), c[0], float(s[0]))


@dataclass(frozen=True)
class BatchFit:
    """Per-group Taubin solutions; ``ok`` flags groups with an isolated minimum."""

    coeffs: np.ndarray       # (B, 10) conditioned frame, c^T N c = 1
    eigenvalues: np.ndarray  # (B, 9) ascending
    centroid: np.ndarray
    scale: np.ndarray
    ok: np.ndarray
    M: np.ndarray
    N: np.ndarray


def _solve_batch(M, N):
    B = len(M)
    eye = np.eye(9)
    # c10 never enters N, so it is eliminated exactly via the Schur complement
    m = M[:, :9, 9]
    m99 = np.where(M[:, 9, 9] > 0, M[:, 9, 9], 1.0)
    A = M[:, :9, :9] - m[:, :, None] * m[:, None, :] / m99[:, None, None]
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    trN = np.trace(N, axis1=1, axis2=2)
    Bm = N[:, :9, :9] + (RIDGE_RTOL * trN / 10.0)[:, None, None] * eye
    ok = (np.isfinite(A).all(axis=(1, 2)) & np.isfinite(Bm).all(axis=(1, 2)) & (trN > 0))
    A[~ok] = eye
    Bm[~ok] = eye
    try:
        Lc = np.linalg.cholesky(Bm)
    except np.linalg.LinAlgError:
        Lc = np.tile(eye, (B, 1, 1))
        for i in range(B):
            try:
                Lc[i] = np.linalg.cholesky(Bm[i])
            except np.linalg.LinAlgError:
                ok[i] = False
                A[i] = eye
    Linv = np.linalg.inv(Lc)
    LinvT = np.swapaxes(Linv, 1, 2)
    C = Linv @ A @ LinvT
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    w, Y = np.linalg.eigh(C)
    v = (LinvT @ Y)[:, :, 0]
    ok &= (w[:, 1] - w[:, 0]) >= EIGEN_GAP_RTOL * np.abs(w[:, -1])
    c10 = -np.sum(m * v, axis=1) / m99
    return np.concatenate([v, c10[:, None]], axis=1), w, ok


def batch_fit_taubin(P, offsets) -> BatchFit:
    """Taubin fit of every group; groups with fewer than 10 points get ``ok=False``."""
    P = np.asarray(P, dtype=float)
    M, N, centroid, scale = batch_moments(P, offsets)
    coeffs, w, ok = _solve_batch(M, N)
    ok &= seg.counts(offsets) >= MIN_FIT_POINTS
    return BatchFit(coeffs, w, centroid, scale, ok, M, N)


@dataclass(frozen=True, eq=False)
class TaubinFit:
    quadric: Quadric
    coeffs: np.ndarray          # conditioned frame, c^T N c = 1
    eigenvalues: np.ndarray     # ascending, reduced 9x9 problem
    moments: MomentMatrices

    @property
    def residual(self) -> float:
        return float(self.eigenvalues[0])


def fit_taubin_full(points) -> TaubinFit:
    """Taubin fit returning the conditioned-frame solution alongside the quadric."""
    P = _as_points(points)
    if len(P) < MIN_FIT_POINTS:
        raise InsufficientPoints(f"need at least {MIN_FIT_POINTS} points, got {len(P)}")
    bf = batch_fit_taubin(P, np.array([0, len(P)]))
    if not bf.ok[0]:
        raise DegenerateFit("smallest generalized eigenvalue is not isolated")
    mm = MomentMatrices(bf.M[0], bf.N[0], len(P), bf.centroid[0], float(bf.scale[0]))
    return TaubinFit(mm.world_quadric(bf.coeffs[0]), bf.coeffs[0], bf.eigenvalues[0], mm)


def fit_taubin(points) -> Quadric:
    """Fit a quadric to ``points`` (at least 10) with Taubin's normalization.

    Raises:
        InsufficientPoints: fewer than 10 points.
        DegenerateFit: the minimizer is ambiguous (e.g. noiseless planar data).
    """
    return fit_taubin_full(points).quadric


def rayleigh_residual(q, mm: MomentMatrices) -> float:
    """``(c^T M c) / (c^T N c)`` for ``q`` in the frame of ``mm``.

    ``q`` may be a world-frame :class:`Quadric` or a raw conditioned-frame
    coefficient vector.
    """
    c = mm.conditioned_coeffs(q) if isinstance(q, Quadric) else np.asarray(q, dtype=float)
    den = float(c @ mm.N @ c)
    if den <= 1e-14 * np.trace(mm.N) * float(c @ c):
        raise ZeroGradientConstraint("c^T N c is not positive")
    return float(c @ mm.M @ c) / den


@dataclass(frozen=True, eq=False)
class CurvatureEstimate:
    median_kappa_max: float
    axis: np.ndarray
    anchor: np.ndarray
    sample_count: int


def project_to_surface(c, U, steps=NEWTON_STEPS, tol=NEWTON_TOL):
    """Newton-project points ``U`` onto the zero set ``f(c, u) = 0``.

    ``c`` is one coefficient vector or one per point. Returns
    ``(projected, converged_mask)``.
    """
    U = np.array(U, dtype=float, copy=True)
    c = np.broadcast_to(np.asarray(c, dtype=float), U.shape[:-1] + (10,))
    bad = np.zeros(len(U), dtype=bool)
    done = np.zeros(len(U), dtype=bool)
    for it in range(steps + 1):
        f = eval_quadric(c, U)
        done = np.abs(f) < tol
        active = ~done & ~bad
        if it == steps or not active.any():
            break
        ca, ua = c[active], U[active]
        g = quadric_gradient(ca, ua)
        g2 = g[:, 0] ** 2 + g[:, 1] ** 2 + g[:, 2] ** 2
        flat = np.sqrt(g2) <= gradient_tolerance(ca, ua)
        g2 = np.where(flat, 1.0, g2)
        U[active] = ua - (f[active] / g2)[:, None] * g
        bad[np.flatnonzero(active)[flat]] = True
    return U, done & ~bad


def batch_curvature(coeffs, centroid, scale, samples, sample_mask):
    """Median max-curvature statistics for many groups at once.

    Args:
        coeffs: ``(B, 10)`` conditioned-frame coefficients.
        centroid, scale: conditioning of each group.
        samples: ``(B, K, 3)`` world points to project (padded).
        sample_mask: ``(B, K)`` validity of ``samples``.

    Returns:
        ``(kappa, axis, anchor, n_ok, ok)``; ``ok`` is False where more than
        half the valid samples failed to project.
    """
    B, K, _ = samples.shape
    cn = coeffs / np.sqrt(np.sum(coeffs * coeffs, axis=1))[:, None]
    U0 = (samples - centroid[:, None, :]) / scale[:, None, None]
    flat_mask = sample_mask.reshape(-1)
    rows = np.repeat(np.arange(B), K)[flat_mask]
    U, conv = project_to_surface(cn[rows], U0.reshape(-1, 3)[flat_mask])
    kappa_rows = np.full(len(rows), np.nan)
    dmin_rows = np.full((len(rows), 3), np.nan)
    if conv.any():
        cr, ur = cn[rows[conv]], U[conv]
        g = quadric_gradient(cr, ur)
        gn = np.sqrt(np.sum(g * g, axis=1))
        good = gn > gradient_tolerance(cr, ur)
        sel = np.flatnonzero(conv)[good]
        conv[np.flatnonzero(conv)[~good]] = False
        if len(sel):
            kmax, _, _, dmin, _ = principal_curvatures_batch(cn[rows[sel]], U[sel])
            kappa_rows[sel] = np.abs(kmax)
            dmin_rows[sel] = dmin
    kap = np.full((B, K), np.nan)
    dmn = np.full((B, K, 3), np.nan)
    anc = np.full((B, K, 3), np.nan)
    slot = np.flatnonzero(flat_mask)
    kap.reshape(-1)[slot] = kappa_rows
    dmn.reshape(-1, 3)[slot] = dmin_rows
    anc.reshape(-1, 3)[slot] = U
    n_valid = sample_mask.sum(axis=1)
    n_ok = np.sum(np.isfinite(kap), axis=1)
    ok = (2 * n_ok >= n_valid) & (n_ok > 0)
    order = np.argsort(np.where(np.isfinite(kap), kap, np.inf), axis=1, kind="stable")
    j = order[np.arange(B), np.minimum(n_ok // 2, K - 1)]
    b = np.arange(B)
    kappa = kap[b, j] / scale
    axis = canonical_sign(np.where(ok[:, None], dmn[b, j], np.array([0.0, 0.0, 1.0])))
    anchor = anc[b, j] * scale[:, None] + centroid
    return kappa, axis, anchor, n_ok, ok


def _rng(random_state):
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def _single_curvature(c_cond, points, centroid, scale, n_curvature_samples, rng):
    k = min(n_curvature_samples, len(points))
    idx = rng.choice(len(points), size=k, replace=False)
    kappa, axis, anchor, n_ok, ok = batch_curvature(
        np.asarray(c_cond, dtype=float)[None, :], np.asarray(centroid)[None, :],
        np.array([scale]), points[idx][None, :, :], np.ones((1, k), dtype=bool))
    if not ok[0]:
        raise ProjectionFailure(f"{k - int(n_ok[0])} of {k} samples failed to project")
    return CurvatureEstimate(float(kappa[0]), axis[0], anchor[0], int(n_ok[0]))


def estimate_curvature(q, points, n_curvature_samples: int = 50, random_state=None) -> CurvatureEstimate:
    """Median maximum-curvature magnitude of ``q`` near ``points``.

    Samples neighborhood points without replacement, Newton-projects them
    onto the quadric and evaluates the shape operator there. The reported
    median is the upper median so that it is realized by an actual sample
    (``anchor``); ``axis`` is the minimum-curvature principal direction at
    the anchor, which for a cylinder is its central axis.

    Raises:
        ProjectionFailure: more than half the samples did not converge.
    """
    if n_curvature_samples < 3:
        raise ValueError("n_curvature_samples must be >= 3")
    P = _as_points(points)
    centroid, scale, _ = _condition(P, np.array([0, len(P)]))
    c = affine_coeffs(q.coeffs if isinstance(q, Quadric) else q, np.eye(3) / scale[0], -centroid[0] / scale[0])
    return _single_curvature(c, P, centroid[0], float(scale[0]), n_curvature_samples, _rng(random_state))


def passes_curvature_gate(est: CurvatureEstimate, hand) -> bool:
    """True iff the median curvature is at least ``1 / capture_radius``."""
    if hand.capture_radius <= 0:
        raise ValueError("capture_radius must be positive")
    return bool(est.median_kappa_max >= 1.0 / hand.capture_radius)


class TaubinQuadricFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_taubin`.

    Parameters
    ----------
    n_curvature_samples : int
        Samples used by :meth:`curvature`.
    random_state : int, Generator or None
        Seed for curvature sampling.

    Attributes
    ----------
    quadric_ : Quadric
    coef_ : ndarray of shape (10,)
        World-frame coefficients (unit norm).
    eigenvalues_ : ndarray of shape (9,)
    moments_ : MomentMatrices
    """

    def __init__(self, n_curvature_samples=50, random_state=None):
        self.n_curvature_samples = n_curvature_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=MIN_FIT_POINTS)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3 features, got {X.shape[1]}")
        fit = fit_taubin_full(X)
        self.fit_ = fit
        self.quadric_ = fit.quadric
        self.coef_ = np.array(fit.quadric.coeffs)
        self.eigenvalues_ = fit.eigenvalues
        self.moments_ = fit.moments
        self.n_features_in_ = 3
        self._X = X
        return self

    def decision_function(self, X):
        """Algebraic distance of each row of ``X`` to the fitted surface."""
        check_is_fitted(self, "quadric_")
        X = check_array(X, dtype=np.float64)
        return eval_quadric(self.quadric_, X)

    def score(self, X, y=None):
        """Negative RMS algebraic residual in the conditioned frame."""
        check_is_fitted(self, "quadric_")
        U = self.moments_.to_frame(check_array(X, dtype=np.float64))
        c = self.fit_.coeffs / np.linalg.norm(self.fit_.coeffs)
        return -float(np.sqrt(np.mean(eval_quadric(c, U) ** 2)))

    def curvature(self) -> CurvatureEstimate:
        """Median-curvature estimate over the training points."""
        check_is_fitted(self, "quadric_")
        mm = self.moments_
        return _single_curvature(self.fit_.coeffs, self._X, mm.centroid, mm.scale,
                                 self.n_curvature_samples, _rng(self.random_state))
