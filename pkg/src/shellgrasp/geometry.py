"""Differential geometry of implicit quadric surfaces.

Coefficients follow the term order

    (x1^2, x2^2, x3^2, x1*x2, x2*x3, x1*x3, x1, x2, x3, 1)

everywhere in the package. All point-valued functions accept either a single
point of shape ``(3,)`` or a batch of shape ``(n, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGradient

__all__ = [
    "Quadric",
    "PrincipalCurvature",
    "eval_quadric",
    "quadric_gradient",
    "quadric_hessian",
    "surface_normal",
    "principal_curvatures",
    "principal_curvatures_batch",
    "gradient_tolerance",
    "plane_basis",
    "canonical_sign",
]


def _canonicalize(coeffs: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(coeffs)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError("quadric coefficients must be finite and not all zero")
    c = coeffs / norm
    nz = np.flatnonzero(c)
    if c[nz[0]] < 0:
        c = -c
    return c


@dataclass(frozen=True, eq=False)
class Quadric:
    """Implicit quadric ``f(c, x) = 0``.

    Coefficients are stored with unit norm and the first nonzero entry
    positive, so two scale-equivalent coefficient vectors produce equal
    objects.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if c.shape != (10,):
            raise ValueError(f"expected 10 coefficients, got {c.shape}")
        c = _canonicalize(c)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __eq__(self, other):
        if not isinstance(other, Quadric):
            return NotImplemented
        return bool(np.array_equal(self.coeffs, other.coeffs))

    def __hash__(self):
        return hash(self.coeffs.tobytes())

    def __repr__(self):
        return f"Quadric({np.array2string(self.coeffs, precision=4)})"

    @classmethod
    def from_matrix(cls, A, b, d) -> "Quadric":
        """Build from ``x^T A x + b^T x + d`` with symmetric ``A``."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(np.array([
            A[0, 0], A[1, 1], A[2, 2],
            A[0, 1] + A[1, 0], A[1, 2] + A[2, 1], A[0, 2] + A[2, 0],
            b[0], b[1], b[2], float(d),
        ]))

    def as_matrix(self):
        """Return ``(A, b, d)`` with ``f(x) = x^T A x + b^T x + d``."""
        return _split(self.coeffs)

    def transformed(self, R, t) -> "Quadric":
        """Quadric whose zero set is the image of this one under ``x -> R x + t``.

        ``R`` may be any invertible 3x3 matrix (rotations, uniform scaling).
        """
        A2, b2, d2 = _affine_substitute(self.coeffs, R, t)
        return Quadric.from_matrix(A2, b2, d2)


def _split(c):
    A = np.array([
        [c[0], 0.5 * c[3], 0.5 * c[5]],
        [0.5 * c[3], c[1], 0.5 * c[4]],
        [0.5 * c[5], 0.5 * c[4], c[2]],
    ])
    return A, np.asarray(c[6:9], dtype=float), float(c[9])


def _affine_substitute(c, R, t):
    # f'(x') = f(P (x' - t)) with P = R^-1
    A, b, d = _split(np.asarray(c, dtype=float))
    P = np.linalg.inv(np.asarray(R, dtype=float))
    t = np.asarray(t, dtype=float)
    A2 = P.T @ A @ P
    b2 = P.T @ b - 2.0 * A2 @ t
    d2 = t @ A2 @ t - b @ (P @ t) + d
    return A2, b2, d2


def _join(A, b, d):
    return np.array([
        A[0, 0], A[1, 1], A[2, 2],
        2 * A[0, 1], 2 * A[1, 2], 2 * A[0, 2],
        b[0], b[1], b[2], d,
    ])


def affine_coeffs(c, R, t) -> np.ndarray:
    """Raw (unnormalized) coefficients of ``c`` pushed through ``x -> R x + t``."""
    return _join(*_affine_substitute(c, R, t))


def _coeffs(q) -> np.ndarray:
    return q.coeffs if isinstance(q, Quadric) else np.asarray(q, dtype=float)


def eval_quadric(q, x):
    """Evaluate ``f(c, x)``.

    ``q`` is a :class:`Quadric` or a coefficient array of shape ``(..., 10)``
    broadcasting against points ``x`` of shape ``(..., 3)``.
    """
    c = _coeffs(q)
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return (c[..., 0] * x1 * x1 + c[..., 1] * x2 * x2 + c[..., 2] * x3 * x3
            + c[..., 3] * x1 * x2 + c[..., 4] * x2 * x3 + c[..., 5] * x1 * x3
            + c[..., 6] * x1 + c[..., 7] * x2 + c[..., 8] * x3 + c[..., 9])


def quadric_gradient(q, x) -> np.ndarray:
    c = _coeffs(q)
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([
        2 * c[..., 0] * x1 + c[..., 3] * x2 + c[..., 5] * x3 + c[..., 6],
        2 * c[..., 1] * x2 + c[..., 3] * x1 + c[..., 4] * x3 + c[..., 7],
        2 * c[..., 2] * x3 + c[..., 4] * x2 + c[..., 5] * x1 + c[..., 8],
    ], axis=-1)


def quadric_hessian(q) -> np.ndarray:
    """Constant Hessian of ``f``; shape ``(..., 3, 3)``."""
    c = _coeffs(q)
    return np.stack([
        np.stack([2 * c[..., 0], c[..., 3], c[..., 5]], axis=-1),
        np.stack([c[..., 3], 2 * c[..., 1], c[..., 4]], axis=-1),
        np.stack([c[..., 5], c[..., 4], 2 * c[..., 2]], axis=-1),
    ], axis=-2)


def gradient_tolerance(q, x):
    """Scale-aware floor below which the gradient counts as vanished."""
    c = _coeffs(q)
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return 1e-10 * (1.0 + np.linalg.norm(c, axis=-1) * np.maximum(1.0, r2))


def surface_normal(q, x) -> np.ndarray:
    """Unit normal ``grad f / |grad f|``.

    Raises:
        DegenerateGradient: if any query point sits on a singular point.
    """
    g = quadric_gradient(q, x)
    gn = np.linalg.norm(g, axis=-1)
    if np.any(gn <= gradient_tolerance(q, x)):
        raise DegenerateGradient("gradient vanishes at query point")
    return g / gn[..., None]


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` (or each row) so its largest-magnitude component is positive."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return -v if v[np.argmax(np.abs(v))] < 0 else v
    k = np.argmax(np.abs(v), axis=1)
    s = np.sign(v[np.arange(len(v)), k])
    s[s == 0] = 1.0
    return v * s[:, None]


def plane_basis(axis):
    """Right-handed orthonormal ``(w1, w2)`` spanning the plane orthogonal to ``axis``.

    ``w1`` is Gram-Schmidt of the coordinate axis least aligned with ``axis``
    (lowest index wins ties) and ``w2 = axis x w1``. Accepts a batch of
    axes with shape ``(n, 3)``.
    """
    a = np.asarray(axis, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    k = np.argmin(np.abs(a), axis=1)
    e = np.zeros_like(a)
    e[np.arange(len(a)), k] = 1.0
    w1 = e - np.sum(e * a, axis=1, keepdims=True) * a
    w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
    w2 = np.cross(a, w1)
    if single:
        return w1[0], w2[0]
    return w1, w2


@dataclass(frozen=True)
class PrincipalCurvature:
    """Shape-operator eigenstructure at a surface point.

    ``kappa_max`` is the principal curvature of larger magnitude. Signs
    follow the gradient orientation of the quadric.
    """

    kappa_max: float
    kappa_min: float
    dir_max: np.ndarray
    dir_min: np.ndarray
    normal: np.ndarray


def _dot3(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def principal_curvatures_batch(q, X):
    """Vectorized principal curvatures at points ``X`` of shape ``(n, 3)``.

    ``q`` is one quadric or per-point coefficients of shape ``(n, 10)``.
    The shape operator ``(I - N N^T) dN`` restricted to the tangent plane
    equals ``T^T H T / |grad f|`` for an orthonormal tangent basis ``T``;
    the symmetrized 2x2 matrix is diagonalized in closed form.

    Returns:
        ``(kappa_max, kappa_min, dir_max, dir_min, normal)`` arrays.

    Raises:
        DegenerateGradient: if the gradient vanishes at any point.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = quadric_gradient(q, X)
    gn = np.sqrt(_dot3(g, g))
    if np.any(gn <= gradient_tolerance(q, X)):
        raise DegenerateGradient("gradient vanishes at query point")
    n = g / gn[:, None]
    H = quadric_hessian(q)
    t1, t2 = plane_basis(n)
    Ht1 = np.sum(H * t1[:, None, :], axis=-1)
    Ht2 = np.sum(H * t2[:, None, :], axis=-1)
    a = _dot3(t1, Ht1) / gn
    d = _dot3(t2, Ht2) / gn
    b = 0.5 * (_dot3(t1, Ht2) + _dot3(t2, Ht1)) / gn
    m = 0.5 * (a + d)
    h = np.hypot(0.5 * (a - d), b)
    sgn = np.where(m >= 0, 1.0, -1.0)
    kmax = m + sgn * h
    kmin = m - sgn * h
    theta = 0.5 * np.arctan2(2 * b, a - d)
    ct, st = np.cos(theta), np.sin(theta)
    # (ct, st) belongs to the larger eigenvalue m + h
    v1 = np.where(sgn > 0, ct, -st)
    v2 = np.where(sgn > 0, st, ct)
    dmax = v1[:, None] * t1 + v2[:, None] * t2
    dmax /= np.sqrt(_dot3(dmax, dmax))[:, None]
    dmin = np.cross(n, dmax)
    return kmax, kmin, dmax, dmin, n


def principal_curvatures(q, x) -> PrincipalCurvature:
    """Principal curvatures and directions at a single point ``x``."""
    kmax, kmin, dmax, dmin, n = principal_curvatures_batch(q, np.asarray(x, dtype=float)[None, :])
    return PrincipalCurvature(float(kmax[0]), float(kmin[0]), dmax[0], dmin[0], n[0])
