"""Circle fitting in the plane orthogonal to a shell axis and the empty-shell radius search.

The batched entry point :func:`find_shells` processes many neighborhoods at
once. Each neighborhood's result is computed from its own data only, so a
shell does not depend on which other neighborhoods share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._kernels import window_first_clear
from .cloud import build_index
from .errors import CollinearPoints, ImaginaryRadius, InsufficientPoints
from .geometry import plane_basis

__all__ = [
    "HandParams",
    "ShellSearchConfig",
    "CylindricalShell",
    "fit_circle_2d",
    "circle_residual",
    "find_shell",
    "find_shells",
    "audit_shell",
    "CircleFitter",
]

CIRCLE_COND_MAX = 1e12
ANNULUS_EPS = 1e-9
# shell-scan grid cell edge, relative to the capture radius
GRID_CELL_FRACTION = 0.5

# status codes of the batched circle fit
_OK, _FEW, _COLLINEAR, _IMAGINARY = 0, 1, 2, 3


@dataclass(frozen=True)
class HandParams:
    """Hand geometry: capture radius and finger thickness, both in meters."""

    capture_radius: float = 0.026
    finger_thickness: float = 0.008

    def __post_init__(self):
        if not (self.capture_radius > 0 and self.finger_thickness > 0):
            raise ValueError("capture_radius and finger_thickness must be positive")


@dataclass(frozen=True)
class ShellSearchConfig:
    """Radius search settings.

    ``max_gap_points=None`` selects the adaptive allowance
    ``max(min_gap_points, int(gap_fraction * neighborhood size))``.
    """

    radius_step: float = 0.001
    max_gap_points: int | None = None
    gap_fraction: float = 0.01
    min_gap_points: int = 2

    def __post_init__(self):
        if not self.radius_step > 0:
            raise ValueError("radius_step must be positive")
        if self.max_gap_points is not None and self.max_gap_points < 0:
            raise ValueError("max_gap_points must be >= 0")

    def allowance(self, n):
        """Permitted annulus population for neighborhoods of size ``n``."""
        n = np.asarray(n)
        if self.max_gap_points is not None:
            return np.full(n.shape, int(self.max_gap_points), dtype=np.int64)
        return np.maximum(self.min_gap_points, (self.gap_fraction * n).astype(np.int64))


@dataclass(frozen=True, eq=False)
class CylindricalShell:
    centroid: np.ndarray
    axis: np.ndarray
    inner_radius: float
    thickness: float
    extent: float
    support: int
    max_gap_points: int

    def __post_init__(self):
        if not self.inner_radius > 0:
            raise ValueError("inner_radius must be positive")
        if not self.thickness > 0 or self.extent < 0:
            raise ValueError("thickness must be positive and extent non-negative")

    @property
    def outer_radius(self) -> float:
        return self.inner_radius + self.thickness

    def __eq__(self, other):
        if not isinstance(other, CylindricalShell):
            return NotImplemented
        return (np.array_equal(self.centroid, other.centroid)
                and np.array_equal(self.axis, other.axis)
                and (self.inner_radius, self.thickness, self.extent, self.support,
                     self.max_gap_points)
                == (other.inner_radius, other.thickness, other.extent, other.support,
                    other.max_gap_points))

    __hash__ = None


@numba.njit(cache=True)
def _circle(x, y):
    """Algebraic circle fit of one point set: ``(hx, hy, radius, status)``.

    The fit runs on coordinates centered on the mean and scaled by the RMS
    distance to it; the condition test applies to that scaled system.
    """
    n = len(x)
    if n < 3:
        return np.nan, np.nan, np.nan, _FEW
    mx, my = x.mean(), y.mean()
    u, v = x - mx, y - my
    s = np.sqrt((u @ u + v @ v) / n)
    if not s > 0:
        return np.nan, np.nan, np.nan, _COLLINEAR
    u, v = u / s, v / s
    lam = u * u + v * v
    su, sv = u.sum(), v.sum()
    uv = u @ v
    S = np.array([[u @ u, uv, su], [uv, v @ v, sv], [su, sv, float(n)]])
    cond = np.linalg.cond(S)
    if not (np.isfinite(cond) and cond <= CIRCLE_COND_MAX):
        return np.nan, np.nan, np.nan, _COLLINEAR
    sol = np.linalg.solve(S, -np.array([lam @ u, lam @ v, lam.sum()]))
    hx, hy, c = -0.5 * sol[0], -0.5 * sol[1], sol[2]
    r2 = hx * hx + hy * hy - c
    if not r2 >= 0:
        return np.nan, np.nan, np.nan, _IMAGINARY
    return mx + s * hx, my + s * hy, s * np.sqrt(r2), _OK


def fit_circle_2d(pts2d):
    """Least-squares algebraic circle through 2-D points.

    Minimizes ``sum (x^2 + y^2 + a x + b y + c)^2`` by its 3x3 normal
    equations and returns ``(center, radius)`` with ``center = (-a/2, -b/2)``.

    Raises:
        InsufficientPoints: fewer than 3 points.
        CollinearPoints: the normal matrix is singular (condition > 1e12).
        ImaginaryRadius: ``hx^2 + hy^2 - c < 0``.
    """
    X = np.asarray(pts2d, dtype=float).reshape(-1, 2)
    hx, hy, r, status = _circle(np.ascontiguousarray(X[:, 0]), np.ascontiguousarray(X[:, 1]))
    if status == _FEW:
        raise InsufficientPoints(f"circle fit needs at least 3 points, got {len(X)}")
    if status == _COLLINEAR:
        raise CollinearPoints("points are (numerically) collinear")
    if status == _IMAGINARY:
        raise ImaginaryRadius("fitted circle has negative squared radius")
    return np.array([hx, hy]), float(r)


def circle_residual(pts2d, abc) -> float:
    """Sum of squared algebraic residuals ``x^2 + y^2 + a x + b y + c``."""
    X = np.asarray(pts2d, dtype=float).reshape(-1, 2)
    a, b, c = abc
    r = X[:, 0] ** 2 + X[:, 1] ** 2 + a * X[:, 0] + b * X[:, 1] + c
    return float(r @ r)


@dataclass(frozen=True, eq=False)
class ShellBatch:
    """Per-neighborhood results of :func:`find_shells` (``found`` marks hits)."""

    found: np.ndarray
    shells: list
    support_lists: list

    def shell(self, i) -> CylindricalShell | None:
        return self.shells[i]

    def support_indices(self, i) -> np.ndarray:
        return self.support_lists[i]


@numba.njit(cache=True)
def _search_one(points, idx, axis, w1, w2, Ps, ukeys, starts, dims, mins, cell,
                cap, t, step, allow, eps):
    """Returns ``(found, centroid, inner_radius, extent, support_mask)``."""
    n = idx.shape[0]
    P = np.empty((n, 3))
    for i in range(n):
        P[i] = points[idx[i]]
    none = (False, np.zeros(3), 0.0, 0.0, np.zeros(n, dtype=np.bool_))
    mean = np.zeros(3)
    for i in range(n):
        mean += P[i]
    mean /= max(n, 1)
    D = P - mean
    hx, hy, r0, status = _circle(D @ w1, D @ w2)
    if status != _OK or not (0 < r0 <= cap):
        return none
    along = D @ axis
    lo, hi = along.min(), along.max()
    half = 0.5 * (hi - lo)
    centroid = mean + hx * w1 + hy * w2 + 0.5 * (lo + hi) * axis
    kmax = int(np.floor((cap - r0) / step + 1e-9))
    if r0 + kmax * step > cap:
        kmax -= 1
    k = window_first_clear(Ps, ukeys, starts, dims, mins, cell, centroid, axis, half,
                           r0, kmax, step, t, eps, allow)
    if k < 0:
        return none
    inner = r0 + k * step
    E = P - centroid
    al = E @ axis
    sup = np.empty(n, dtype=np.bool_)
    amin, amax = np.inf, -np.inf
    for i in range(n):
        rho = np.sqrt(max(E[i, 0] ** 2 + E[i, 1] ** 2 + E[i, 2] ** 2 - al[i] ** 2, 0.0))
        sup[i] = rho <= inner
        if sup[i]:
            amin = min(amin, al[i])
            amax = max(amax, al[i])
    if not sup.any():
        return none
    return True, centroid, inner, amax - amin, sup


def find_shells(points, index, nb_flat, nb_offsets, axes, hand: HandParams,
                cfg: ShellSearchConfig) -> ShellBatch:
    """Empty-shell search for a batch of neighborhoods.

    Args:
        points: ``(n, 3)`` cloud points.
        index: :class:`~shellgrasp.cloud.SpatialIndex` over ``points``.
        nb_flat, nb_offsets: concatenated neighborhood indices.
        axes: ``(B, 3)`` unit axis per neighborhood.
    """
    points = np.ascontiguousarray(points, dtype=float)
    axes = np.ascontiguousarray(np.atleast_2d(np.asarray(axes, dtype=float)))
    nb_flat = np.asarray(nb_flat, dtype=np.int64)
    allow = cfg.allowance(np.diff(nb_offsets))
    shells, support = [], []
    if len(axes) == 0:
        return ShellBatch(np.zeros(0, dtype=bool), shells, support)
    w1, w2 = plane_basis(axes)
    w1, w2 = np.ascontiguousarray(w1), np.ascontiguousarray(w2)
    cap, t = hand.capture_radius, hand.finger_thickness
    grid = index.grid(GRID_CELL_FRACTION * cap).arrays()
    for b in range(len(axes)):
        idx = nb_flat[nb_offsets[b]:nb_offsets[b + 1]]
        found, centroid, inner, extent, sup = _search_one(
            points, idx, axes[b], w1[b], w2[b], *grid, cap, t, cfg.radius_step,
            int(allow[b]), ANNULUS_EPS)
        if not found:
            shells.append(None)
            support.append(None)
            continue
        shells.append(CylindricalShell(centroid, axes[b].copy(), float(inner), float(t),
                                       float(extent), int(np.count_nonzero(sup)),
                                       int(allow[b])))
        support.append(idx[sup])
    return ShellBatch(np.array([s is not None for s in shells], dtype=bool), shells, support)


def find_shell(nb, est, cloud, hand: HandParams, cfg: ShellSearchConfig | None = None,
               index=None) -> CylindricalShell | None:
    """Search one neighborhood for an empty cylindrical shell around ``est.axis``.

    Circle-fit failures yield ``None`` (the neighborhood is rejected).
    """
    cfg = cfg or ShellSearchConfig()
    index = index if index is not None else build_index(cloud)
    axis = np.asarray(est.axis if hasattr(est, "axis") else est, dtype=float)
    axis = axis / np.linalg.norm(axis)
    idx = np.asarray(nb.indices, dtype=np.int64)
    res = find_shells(cloud.points, index, idx, np.array([0, len(idx)]), axis[None, :],
                      hand, cfg)
    return res.shell(0)


def audit_shell(shell: CylindricalShell, points, hand: HandParams) -> tuple[bool, int]:
    """Brute-force check of both grasp conditions against every point.

    Condition 1: ``inner_radius <= capture_radius``. Condition 2: at most
    ``shell.max_gap_points`` points have axial offset within
    ``+-extent/2`` of the centroid and radial distance in
    ``[inner_radius, inner_radius + thickness]``.

    Returns:
        ``(passed, annulus_count)``.
    """
    P = np.asarray(points, dtype=float)
    a = np.asarray(shell.axis, dtype=float)
    d = P - shell.centroid
    along = d @ a
    radial = np.linalg.norm(d - np.outer(along, a), axis=1)
    inside = ((np.abs(along) <= 0.5 * shell.extent)
              & (radial >= shell.inner_radius)
              & (radial <= shell.inner_radius + shell.thickness))
    count = int(np.count_nonzero(inside))
    ok = shell.inner_radius <= hand.capture_radius and count <= shell.max_gap_points
    return bool(ok), count


class CircleFitter(BaseEstimator):
    """Algebraic least-squares circle estimator on 2-D points.

    Attributes
    ----------
    center_ : ndarray of shape (2,)
    radius_ : float
    coef_ : ndarray of shape (3,)
        ``(a, b, c)`` of ``x^2 + y^2 + a x + b y + c = 0``.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=3)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 features, got {X.shape[1]}")
        self.center_, self.radius_ = fit_circle_2d(X)
        hx, hy = self.center_
        self.coef_ = np.array([-2 * hx, -2 * hy, hx * hx + hy * hy - self.radius_ ** 2])
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        """Signed radial distance of each point to the fitted circle."""
        check_is_fitted(self, "center_")
        X = check_array(X, dtype=np.float64)
        return (np.linalg.norm(X - self.center_, axis=1) - self.radius_)[:, None]

    def score(self, X, y=None):
        return -circle_residual(check_array(X, dtype=np.float64), self.coef_)
