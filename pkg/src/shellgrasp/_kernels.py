"""Compiled fixed-radius neighbor reductions."""
import numba
import numpy as np

# grid cells are radius / CELL_DIVISIONS wide
CELL_DIVISIONS = 2


@numba.njit(cache=True)
def _ball_moments(Ps, ukeys, starts, dims, mins, cell, radius, reach):
    n = Ps.shape[0]
    out = np.zeros((n, 10))
    r2 = radius * radius
    ny, nz = dims[1], dims[2]
    for i in range(n):
        px, py, pz = Ps[i, 0], Ps[i, 1], Ps[i, 2]
        ix = int((px - mins[0]) / cell)
        iy = int((py - mins[1]) / cell)
        iz = int((pz - mins[2]) / cell)
        c = 0.0
        s0 = s1 = s2 = 0.0
        a00 = a01 = a02 = a11 = a12 = a22 = 0.0
        for jx in range(max(ix - reach, 0), min(ix + reach + 1, dims[0])):
            for jy in range(max(iy - reach, 0), min(iy + reach + 1, ny)):
                base = (jx * ny + jy) * nz
                lo = np.searchsorted(ukeys, base + max(iz - reach, 0))
                hi = np.searchsorted(ukeys, base + min(iz + reach, nz - 1) + 1)
                for m in range(starts[lo], starts[hi]):
                    d0 = Ps[m, 0] - px
                    d1 = Ps[m, 1] - py
                    d2 = Ps[m, 2] - pz
                    if d0 * d0 + d1 * d1 + d2 * d2 <= r2:
                        c += 1.0
                        s0 += d0
                        s1 += d1
                        s2 += d2
                        a00 += d0 * d0
                        a01 += d0 * d1
                        a02 += d0 * d2
                        a11 += d1 * d1
                        a12 += d1 * d2
                        a22 += d2 * d2
        out[i, 0] = c
        out[i, 1] = s0
        out[i, 2] = s1
        out[i, 3] = s2
        out[i, 4] = a00
        out[i, 5] = a01
        out[i, 6] = a02
        out[i, 7] = a11
        out[i, 8] = a12
        out[i, 9] = a22
    return out


def ball_moments(P, radius):
    """Per point, neighbor count and first/second moments of offsets within ``radius``.

    Returns an ``(n, 10)`` array: count, sum of ``d`` (3), and the sums of
    ``d0d0, d0d1, d0d2, d1d1, d1d2, d2d2`` where ``d = q - p`` over all
    points ``q`` (the point itself included) with ``|q - p| <= radius``.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    if len(P) == 0:
        return np.zeros((0, 10))
    cell = radius / CELL_DIVISIONS
    mins = P.min(axis=0)
    idx = np.floor((P - mins) / cell).astype(np.int64)
    dims = idx.max(axis=0) + 1
    key = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    order = np.argsort(key, kind="stable")
    ukeys, first = np.unique(key[order], return_index=True)
    starts = np.append(first, len(P)).astype(np.int64)
    out = _ball_moments(P[order], ukeys, starts, dims.astype(np.int64), mins, cell,
                        float(radius), CELL_DIVISIONS)
    res = np.empty_like(out)
    res[order] = out
    return res


class PointGrid:
    """Points bucketed into cubic cells, sorted by cell key, for compiled range scans."""

    def __init__(self, P, cell):
        P = np.ascontiguousarray(P, dtype=np.float64)
        self.cell = float(cell)
        self.mins = P.min(axis=0) if len(P) else np.zeros(3)
        idx = np.floor((P - self.mins) / self.cell).astype(np.int64)
        self.dims = (idx.max(axis=0) + 1 if len(P) else np.ones(3, dtype=np.int64)).astype(np.int64)
        key = (idx[:, 0] * self.dims[1] + idx[:, 1]) * self.dims[2] + idx[:, 2]
        order = np.argsort(key, kind="stable")
        self.ukeys, first = np.unique(key[order], return_index=True)
        self.starts = np.append(first, len(P)).astype(np.int64)
        self.points = P[order]

    def arrays(self):
        return self.points, self.ukeys, self.starts, self.dims, self.mins, self.cell


@numba.njit(cache=True)
def window_first_clear(Ps, ukeys, starts, dims, mins, cell, centroid, axis, half,
                       r0, kmax, step, t, eps, allow):
    """Smallest ``k <= kmax`` whose annulus holds at most ``allow`` points, else -1.

    Counted points have axial offset within ``half + eps`` of ``centroid`` and
    radial distance in ``[r0 + k step - eps, r0 + k step + t + eps]``.
    """
    diff = np.zeros(kmax + 2, dtype=np.int64)
    reach = np.sqrt((r0 + kmax * step + t + 2 * eps) ** 2 + (half + eps) ** 2) + eps
    lo_c = np.empty(3, dtype=np.int64)
    hi_c = np.empty(3, dtype=np.int64)
    for a in range(3):
        lo_c[a] = max(int(np.floor((centroid[a] - reach - mins[a]) / cell)), 0)
        hi_c[a] = min(int(np.floor((centroid[a] + reach - mins[a]) / cell)), dims[a] - 1)
        if lo_c[a] > hi_c[a]:
            return 0 if allow >= 0 else -1
    ny, nz = dims[1], dims[2]
    lim = half + eps
    for jx in range(lo_c[0], hi_c[0] + 1):
        for jy in range(lo_c[1], hi_c[1] + 1):
            base = (jx * ny + jy) * nz
            lo = np.searchsorted(ukeys, base + lo_c[2])
            hi = np.searchsorted(ukeys, base + hi_c[2] + 1)
            for m in range(starts[lo], starts[hi]):
                d0 = Ps[m, 0] - centroid[0]
                d1 = Ps[m, 1] - centroid[1]
                d2 = Ps[m, 2] - centroid[2]
                al = d0 * axis[0] + d1 * axis[1] + d2 * axis[2]
                if abs(al) > lim:
                    continue
                rho = np.sqrt(max(d0 * d0 + d1 * d1 + d2 * d2 - al * al, 0.0))
                klo = max(np.ceil((rho - t - eps - r0) / step), 0.0)
                khi = min(np.floor((rho + eps - r0) / step), float(kmax))
                if klo <= khi:
                    diff[int(klo)] += 1
                    diff[int(khi) + 1] -= 1
    run = 0
    for k in range(kmax + 1):
        run += diff[k]
        if run <= allow:
            return k
    return -1
