"""Synthetic data generators shared by the tests."""
import numpy as np

from shellgrasp.geometry import eval_quadric, quadric_gradient


def rotation(rng):
    """Uniformly random rotation matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def angle_deg(a, b):
    """Angle between two directions, ignoring sign."""
    c = abs(float(np.dot(a, b))) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(min(c, 1.0))))


def cylinder_patch(rng, radius, n=200, arc_deg=120.0, length=None, noise=0.0,
                   center=None, axis=None):
    """Points on a cylinder arc; returns ``(points, axis, center)``."""
    length = 2 * radius if length is None else length
    axis = unit(rng) if axis is None else np.asarray(axis, dtype=float)
    center = rng.uniform(-0.5, 0.5, 3) if center is None else np.asarray(center, dtype=float)
    e = np.eye(3)[np.argmin(np.abs(axis))]
    w1 = e - (e @ axis) * axis
    w1 /= np.linalg.norm(w1)
    w2 = np.cross(axis, w1)
    th = rng.uniform(0, np.radians(arc_deg), n) + rng.uniform(0, 2 * np.pi)
    z = rng.uniform(-0.5 * length, 0.5 * length, n)
    r = radius + (rng.normal(0, noise, n) if noise else 0.0)
    P = center + np.outer(r * np.cos(th), w1) + np.outer(r * np.sin(th), w2) + np.outer(z, axis)
    return P, axis, center


def sphere_patch(rng, radius, n=200, center=None, cap_deg=60.0):
    center = rng.uniform(-0.5, 0.5, 3) if center is None else np.asarray(center, dtype=float)
    pole = unit(rng)
    dirs = unit(rng, 4 * n)
    dirs = dirs[dirs @ pole >= np.cos(np.radians(cap_deg))][:n]
    return center + radius * dirs, center


def random_quadric(rng, box=1.0):
    """Random quadric coefficients whose surface passes through a random point of the box."""
    c = rng.uniform(-1, 1, 10)
    x = rng.uniform(-0.5 * box, 0.5 * box, 3)
    c[9] -= eval_quadric(c, x)
    return c


def random_quadric_points(rng, coeffs, n, box=1.0):
    """Exact surface samples of ``coeffs``: roots of the quadric along random lines.

    Each random line ``x0 + s d`` restricts ``f`` to a quadratic in ``s``; its
    real roots inside the box are polished by Newton steps along the line.
    """
    out = np.zeros((0, 3))
    for _ in range(200):
        m = 4 * n
        x0 = rng.uniform(-box, box, (m, 3))
        d = unit(rng, m)
        f0 = eval_quadric(coeffs, x0)
        f1 = eval_quadric(coeffs, x0 + d)
        fm = eval_quadric(coeffs, x0 - d)
        a = 0.5 * (f1 + fm) - f0
        b = 0.5 * (f1 - fm)
        disc = b * b - 4 * a * f0
        ok = (np.abs(a) > 1e-12) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sgn in (-1.0, 1.0):
            s = np.where(ok, (-b + sgn * sq) / (2 * np.where(ok, a, 1.0)), 0.0)
            for _ in range(3):
                x = x0 + s[:, None] * d
                g = np.sum(quadric_gradient(coeffs, x) * d, axis=1)
                s = s - np.where(g != 0, eval_quadric(coeffs, x) / np.where(g != 0, g, 1.0), 0.0)
            x = x0 + s[:, None] * d
            keep = ok & np.all(np.abs(x) <= box, axis=1)
            out = np.vstack([out, x[keep]])
        if len(out) >= n:
            return out[:n]
    raise AssertionError("could not sample enough surface points")
