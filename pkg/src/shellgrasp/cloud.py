"""Point-cloud storage, spatial queries, neighborhood sampling and occlusion filtering."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, NotOrganized

__all__ = [
    "RangeImageLayout",
    "PointCloud",
    "SpatialIndex",
    "Neighborhood",
    "RadiusSearch",
    "KnnSearch",
    "build_index",
    "sample_neighborhood",
    "neighborhood_at",
    "occlusion_filter",
    "occluder_counts",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RangeImageLayout:
    """Pixel grid of an organized cloud.

    ``pixel_index[v, u]`` is the index of the point seen at pixel ``(u, v)``
    or ``-1`` for an invalid return. Intrinsics are pinhole parameters in
    pixels, with ``u = fx * x / z + cx``.
    """

    width: int
    height: int
    pixel_index: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        pix = np.asarray(self.pixel_index, dtype=np.int64)
        if pix.shape != (self.height, self.width):
            raise ValueError(f"pixel_index shape {pix.shape} != ({self.height}, {self.width})")
        pix.setflags(write=False)
        object.__setattr__(self, "pixel_index", pix)

    def project(self, X):
        """Pixel coordinates ``(u, v)`` of sensor-frame points."""
        X = np.asarray(X, dtype=float)
        return (self.fx * X[..., 0] / X[..., 2] + self.cx,
                self.fy * X[..., 1] / X[..., 2] + self.cy)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable cloud of sensor-frame points in meters."""

    points: np.ndarray
    organized: RangeImageLayout | None = None
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        P = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(P)):
            raise ValueError("point coordinates must be finite")
        P.setflags(write=False)
        object.__setattr__(self, "points", P)
        vp = np.array(self.viewpoint, dtype=float).reshape(3)
        vp.setflags(write=False)
        object.__setattr__(self, "viewpoint", vp)
        if self.organized is not None:
            pix = self.organized.pixel_index
            valid = pix[pix >= 0]
            counts = np.bincount(valid, minlength=len(P))
            if len(counts) > len(P) or np.any(counts != 1):
                raise ValueError("every point must occupy exactly one pixel of the range image")

    def __len__(self):
        return len(self.points)

    @property
    def is_organized(self) -> bool:
        return self.organized is not None

    @cached_property
    def depth_image(self) -> np.ndarray:
        """Per-pixel depth with ``inf`` at invalid pixels (organized clouds only)."""
        if self.organized is None:
            raise NotOrganized("cloud has no range-image layout")
        pix = self.organized.pixel_index
        img = np.full(pix.shape, np.inf)
        valid = pix >= 0
        img[valid] = self.points[pix[valid], 2]
        img.setflags(write=False)
        return img


class SpatialIndex:
    """Radius and k-nearest-neighbor queries over a fixed cloud (kd-tree backed)."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        self._tree = cKDTree(self.points)
        self._grids = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.points)

    def __getstate__(self):
        return {"points": self.points}

    def __setstate__(self, state):
        self.__init__(state["points"])

    def grid(self, cell: float):
        """Cell-bucketed copy of the points for compiled window scans (built once per size)."""
        from ._kernels import PointGrid

        with self._lock:
            if cell not in self._grids:
                self._grids[cell] = PointGrid(self.points, cell)
            return self._grids[cell]

    def radius(self, center, r) -> np.ndarray:
        """Sorted indices of points with ``|p - center| <= r``."""
        return np.asarray(self._tree.query_ball_point(np.asarray(center, dtype=float), r,
                                                      return_sorted=True), dtype=np.int64)

    def radius_batch(self, centers, r):
        """Concatenated radius-query results; ``r`` is a scalar or one radius per center.

        Returns:
            ``(indices, offsets)`` where the result for query ``i`` is
            ``indices[offsets[i]:offsets[i + 1]]`` (sorted).
        """
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        lists = self._tree.query_ball_point(centers, r, return_sorted=True)
        return _concat(lists)

    def knn(self, center, k):
        """Indices and distances of the ``k`` nearest points, ties to the lower index."""
        idx, dist = self.knn_batch(np.asarray(center, dtype=float)[None, :], k)
        return idx[0], dist[0]

    def knn_batch(self, centers, k):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        n = len(self.points)
        k = min(int(k), n)
        extra = min(n, k + 8)
        d, i = self._tree.query(centers, k=extra)
        d = np.asarray(d).reshape(len(centers), extra)
        i = np.asarray(i).reshape(len(centers), extra)
        out_i = np.empty((len(centers), k), dtype=np.int64)
        out_d = np.empty((len(centers), k))
        for row in range(len(centers)):
            di, ii = d[row], i[row]
            kth = di[k - 1]
            if extra < n and di[-1] <= kth:
                # tie group may extend past the fetched candidates
                ii = np.asarray(self._tree.query_ball_point(centers[row], kth), dtype=np.int64)
                di = np.linalg.norm(self.points[ii] - centers[row], axis=1)
            order = np.lexsort((ii, di))[:k]
            out_i[row] = ii[order]
            out_d[row] = di[order]
        return out_i, out_d


def _concat(lists):
    lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum(lens, out=offsets[1:])
    if offsets[-1] == 0:
        return np.zeros(0, dtype=np.int64), offsets
    flat = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    return flat, offsets


def build_index(cloud: PointCloud) -> SpatialIndex:
    if len(cloud) == 0:
        raise EmptyCloud("cannot index an empty cloud")
    return SpatialIndex(cloud.points)


@dataclass(frozen=True)
class RadiusSearch:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class KnnSearch:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True, eq=False)
class Neighborhood:
    center: np.ndarray
    radius: float
    indices: np.ndarray
    seed_index: int

    def __len__(self):
        return len(self.indices)


def neighborhood_at(cloud: PointCloud, index: SpatialIndex, seed_index: int, mode) -> Neighborhood:
    """Neighborhood of a given seed point."""
    c = cloud.points[seed_index]
    if isinstance(mode, KnnSearch):
        idx, dist = index.knn(c, mode.k)
        return Neighborhood(c, float(dist[-1]), idx, int(seed_index))
    return Neighborhood(c, float(mode.radius), index.radius(c, mode.radius), int(seed_index))


def sample_neighborhood(cloud: PointCloud, index: SpatialIndex, rng, mode) -> Neighborhood:
    """Draw a seed point uniformly and return its neighborhood.

    ``mode`` is a :class:`RadiusSearch` (sphere of the given radius) or a
    :class:`KnnSearch`.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot sample an empty cloud")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return neighborhood_at(cloud, index, int(rng.integers(len(cloud))), mode)


def occluder_counts(cloud: PointCloud, centers, radii, min_depths) -> np.ndarray:
    """Per query, number of valid pixels inside the projected sphere that are
    closer (smaller depth) than ``min_depths``.

    The sphere around ``centers[i]`` with radius ``radii[i]`` projects to a
    circle centered on the projection of the center with pixel radius
    ``fx * r / z``. The circle is clipped to the image.
    """
    lay = cloud.organized
    if lay is None:
        raise NotOrganized("cloud has no range-image layout")
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),))
    min_depths = np.broadcast_to(np.asarray(min_depths, dtype=float), (len(centers),))
    depth_img = cloud.depth_image
    u0, v0 = lay.project(centers)
    rp = lay.fx * radii / centers[:, 2]
    out = np.zeros(len(centers), dtype=np.int64)
    for i in range(len(centers)):
        r = rp[i]
        ulo = max(int(np.ceil(u0[i] - r)), 0)
        uhi = min(int(np.floor(u0[i] + r)), lay.width - 1)
        vlo = max(int(np.ceil(v0[i] - r)), 0)
        vhi = min(int(np.floor(v0[i] + r)), lay.height - 1)
        if ulo > uhi or vlo > vhi:
            continue
        uu = np.arange(ulo, uhi + 1) - u0[i]
        vv = np.arange(vlo, vhi + 1) - v0[i]
        inside = vv[:, None] ** 2 + uu[None, :] ** 2 <= r * r
        win = depth_img[vlo:vhi + 1, ulo:uhi + 1]
        out[i] = int(np.count_nonzero(inside & (win < min_depths[i])))
    return out


def occlusion_filter(cloud: PointCloud, nb: Neighborhood, occluder_threshold: int = 20) -> bool:
    """True (discard) when more than ``occluder_threshold`` pixels in the
    projected neighborhood circle lie closer than the neighborhood's nearest point.

    Depth is the sensor-frame ``z`` coordinate.

    Raises:
        NotOrganized: the cloud carries no range image.
    """
    if cloud.organized is None:
        raise NotOrganized("occlusion filtering needs an organized cloud")
    if len(nb.indices) == 0:
        return False
    zmin = float(np.min(cloud.points[nb.indices, 2]))
    count = occluder_counts(cloud, nb.center, nb.radius, zmin)[0]
    return bool(count > occluder_threshold)
