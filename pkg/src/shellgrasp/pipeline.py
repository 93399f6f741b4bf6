"""Affordance detection: sampling loop, axis estimation variants and shell search.

Sample ordinals are processed in fixed blocks. Every ordinal draws from its
own generator seeded by ``(seed, ordinal)`` and every batched kernel works
per neighborhood, so the output depends only on the seed and the ordinal
range, never on block scheduling or worker count.
"""
from __future__ import annotations

import enum
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _segments as seg
from ._kernels import ball_moments
from .cloud import (KnnSearch, PointCloud, RadiusSearch, SpatialIndex, build_index,
                    occluder_counts)
from .errors import DegenerateCovariance, EmptyCloud, TooFewValidNormals
from .geometry import canonical_sign
from .shell import CylindricalShell, HandParams, ShellSearchConfig, find_shells
from .taubin import CurvatureEstimate, batch_curvature, batch_fit_taubin

__all__ = [
    "Variant",
    "DetectorConfig",
    "Detection",
    "DetectionRun",
    "Stage",
    "detect_affordances",
    "run_detector",
    "pca_axis",
    "estimate_normals",
    "normals_axis",
    "deduplicate",
    "AffordanceDetector",
]

logger = logging.getLogger(__name__)

BLOCK_SIZE = 256
MIN_NEIGHBORHOOD = 30
MIN_VALID_NORMALS = 3


class Variant(str, enum.Enum):
    TAUBIN = "taubin"
    PCA = "pca"
    NORMALS = "normals"


class Stage(enum.IntEnum):
    """Furthest step reached by a sample (recorded in the run trace)."""

    TOO_SMALL = 0
    OCCLUDED = 1
    AXIS_FAILED = 2
    CURVATURE_REJECTED = 3
    NO_SHELL = 4
    DETECTED = 5


@dataclass(frozen=True)
class DetectorConfig:
    """Detector settings.

    ``neighborhood=None`` means a radius search at the capture radius.
    """

    n_samples: int = 4000
    hand: HandParams = field(default_factory=HandParams)
    variant: Variant = Variant.TAUBIN
    neighborhood: RadiusSearch | KnnSearch | None = None
    occlusion_filter: bool = True
    occluder_threshold: int = 20
    shell: ShellSearchConfig = field(default_factory=ShellSearchConfig)
    seed: int = 0
    n_curvature_samples: int = 50
    min_neighborhood: int = MIN_NEIGHBORHOOD
    normals_radius: float = 0.03

    def __post_init__(self):
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.n_curvature_samples < 3:
            raise ValueError("n_curvature_samples must be >= 3")
        if self.occluder_threshold < 0:
            raise ValueError("occluder_threshold must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def search(self):
        return self.neighborhood or RadiusSearch(self.hand.capture_radius)


@dataclass(frozen=True, eq=False)
class Detection:
    shell: CylindricalShell
    seed_index: int
    variant: Variant
    ordinal: int
    curvature: CurvatureEstimate | None = None
    support_indices: np.ndarray | None = None

    def key(self):
        """Hashable identity used for set comparisons of detection lists."""
        s = self.shell
        return (self.ordinal, self.seed_index, self.variant.value, s.centroid.tobytes(),
                s.axis.tobytes(), s.inner_radius, s.thickness, s.extent, s.support)


@dataclass
class DetectionRun:
    """Detections plus a per-sample trace and per-phase timing."""

    detections: list
    seed_index: np.ndarray
    neighborhood_size: np.ndarray
    stage: np.ndarray
    timing: dict


def _rows(flat, offsets, keep):
    """Sub-batch of the groups selected by boolean mask ``keep``."""
    n = np.diff(offsets)[keep]
    starts = offsets[:-1][keep]
    new_off = np.zeros(len(n) + 1, dtype=np.int64)
    np.cumsum(n, out=new_off[1:])
    if new_off[-1] == 0:
        return flat[:0], new_off
    pos = np.repeat(starts - new_off[:-1], n) + np.arange(new_off[-1])
    return flat[pos], new_off


def pca_axis(points) -> np.ndarray:
    """Principal direction (largest-eigenvalue eigenvector) of the point covariance.

    Raises:
        DegenerateCovariance: fewer than 3 points or all points coincident.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegenerateCovariance("need at least 3 points")
    axes, ok = _pca_axes(P, np.array([0, len(P)]))
    if not ok[0]:
        raise DegenerateCovariance("points are coincident")
    return axes[0]


def _covariances(P, offsets):
    gid = seg.group_ids(offsets)
    mean = seg.seg_mean(P, offsets)
    D = P - mean[gid]
    prods = np.column_stack([D[:, 0] * D[:, 0], D[:, 0] * D[:, 1], D[:, 0] * D[:, 2],
                             D[:, 1] * D[:, 1], D[:, 1] * D[:, 2], D[:, 2] * D[:, 2]])
    return _sym3(seg.seg_sum(prods, offsets)), mean


def _sym3(s):
    C = np.empty((len(s), 3, 3))
    C[:, 0, 0], C[:, 0, 1], C[:, 0, 2] = s[:, 0], s[:, 1], s[:, 2]
    C[:, 1, 1], C[:, 1, 2], C[:, 2, 2] = s[:, 3], s[:, 4], s[:, 5]
    C[:, 1, 0], C[:, 2, 0], C[:, 2, 1] = s[:, 1], s[:, 2], s[:, 4]
    return C


def _pca_axes(P, offsets):
    C, _ = _covariances(P, offsets)
    tr = np.trace(C, axis1=1, axis2=2)
    ok = (np.diff(offsets) >= 3) & (tr > 0)
    axes = np.tile([0.0, 0.0, 1.0], (len(C), 1))
    if ok.any():
        _, V = np.linalg.eigh(C[ok])
        axes[ok] = canonical_sign(V[:, :, 2])
    return axes, ok


def estimate_normals(cloud: PointCloud, radius: float = 0.03):
    """Per-point PCA normals over a radius neighborhood, facing the viewpoint.

    Returns:
        ``(normals, valid)``; points with fewer than 3 neighbors (or a
        degenerate covariance) are marked invalid and carry a zero normal.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot estimate normals of an empty cloud")
    P = cloud.points
    mom = ball_moments(P, radius)
    cnt = mom[:, 0]
    mu = mom[:, 1:4] / cnt[:, None]
    S = mom[:, 4:10] / cnt[:, None]
    S -= np.column_stack([mu[:, 0] * mu[:, 0], mu[:, 0] * mu[:, 1], mu[:, 0] * mu[:, 2],
                          mu[:, 1] * mu[:, 1], mu[:, 1] * mu[:, 2], mu[:, 2] * mu[:, 2]])
    w, V = np.linalg.eigh(_sym3(S))
    valid = (cnt >= 3) & (w[:, 1] > 0)
    n = V[:, :, 0]
    flip = np.sum(n * (cloud.viewpoint - P), axis=1) < 0
    n[flip] *= -1
    n[~valid] = 0.0
    return n, valid


def _normals_axes(flat, offsets, normals, valid):
    v = valid[flat].astype(float)
    N = normals[flat] * v[:, None]
    prods = np.column_stack([N[:, 0] * N[:, 0], N[:, 0] * N[:, 1], N[:, 0] * N[:, 2],
                             N[:, 1] * N[:, 1], N[:, 1] * N[:, 2], N[:, 2] * N[:, 2]])
    M = _sym3(seg.seg_sum(prods, offsets))
    nvalid = seg.seg_sum(v, offsets)
    ok = nvalid >= MIN_VALID_NORMALS
    axes = np.tile([0.0, 0.0, 1.0], (len(M), 1))
    gap = np.zeros(len(M))
    if ok.any():
        w, V = np.linalg.eigh(M[ok])
        axes[ok] = canonical_sign(V[:, :, 0])
        gap[ok] = (w[:, 1] - w[:, 0]) / np.maximum(w[:, 2], 1e-300)
    return axes, ok, gap


def normals_axis(indices, normals, valid=None, return_gap=False):
    """Smallest-eigenvalue eigenvector of the uncentered normal second moment.

    With ``return_gap`` also returns the relative eigen gap; a value near
    zero flags an ill-defined axis (for example on a plane).

    Raises:
        TooFewValidNormals: fewer than 3 valid normals among ``indices``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    normals = np.asarray(normals, dtype=float)
    valid = np.ones(len(normals), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    axes, ok, gap = _normals_axes(idx, np.array([0, len(idx)]), normals, valid)
    if not ok[0]:
        raise TooFewValidNormals("need at least 3 valid normals")
    return (axes[0], float(gap[0])) if return_gap else axes[0]


@dataclass(frozen=True, eq=False)
class _Context:
    cloud: PointCloud
    index: SpatialIndex
    cfg: DetectorConfig
    normals: np.ndarray | None
    normals_valid: np.ndarray | None
    use_occlusion: bool


def _neighborhoods(ctx, seeds):
    mode = ctx.cfg.search
    centers = ctx.cloud.points[seeds]
    if isinstance(mode, KnnSearch):
        idx, dist = ctx.index.knn_batch(centers, mode.k)
        offsets = np.arange(0, idx.size + 1, idx.shape[1], dtype=np.int64)
        return idx.reshape(-1), offsets, dist[:, -1]
    flat, offsets = ctx.index.radius_batch(centers, mode.radius)
    return flat, offsets, np.full(len(seeds), float(mode.radius))


def _curvature_samples(P, offsets, gens, K):
    B = len(gens)
    samples = np.zeros((B, K, 3))
    mask = np.zeros((B, K), dtype=bool)
    for b, g in enumerate(gens):
        n = offsets[b + 1] - offsets[b]
        m = min(K, int(n))
        pick = g.choice(n, size=m, replace=False)
        samples[b, :m] = P[offsets[b] + pick]
        mask[b, :m] = True
    return samples, mask


def _run_block(ctx: _Context, start: int, stop: int):
    cfg = ctx.cfg
    timing = defaultdict(float)
    t0 = time.perf_counter()
    gens = [np.random.default_rng([cfg.seed, o]) for o in range(start, stop)]
    n_pts = len(ctx.cloud)
    seeds = np.fromiter((g.integers(n_pts) for g in gens), dtype=np.int64, count=len(gens))
    flat, offsets, radii = _neighborhoods(ctx, seeds)
    sizes = np.diff(offsets)
    stage = np.full(len(seeds), int(Stage.TOO_SMALL), dtype=np.int8)
    active = sizes >= cfg.min_neighborhood
    t1 = time.perf_counter()
    timing["sampling"] += t1 - t0

    if ctx.use_occlusion and active.any():
        ids = np.flatnonzero(active)
        zmin = seg.seg_min(ctx.cloud.points[flat, 2], offsets)[ids]
        counts = occluder_counts(ctx.cloud, ctx.cloud.points[seeds[ids]], radii[ids], zmin)
        occluded = counts > cfg.occluder_threshold
        stage[ids[occluded]] = Stage.OCCLUDED
        active[ids[occluded]] = False
    t2 = time.perf_counter()
    timing["occlusion"] += t2 - t1

    ids = np.flatnonzero(active)
    stage[ids] = Stage.AXIS_FAILED
    sub_flat, sub_off = _rows(flat, offsets, active)
    P = ctx.cloud.points[sub_flat]
    curv = [None] * len(ids)
    if cfg.variant is Variant.TAUBIN:
        fit = batch_fit_taubin(P, sub_off)
        samples, mask = _curvature_samples(P, sub_off, [gens[i] for i in ids],
                                           cfg.n_curvature_samples)
        good = fit.ok.copy()
        axes = np.tile([0.0, 0.0, 1.0], (len(ids), 1))
        if good.any():
            kappa, ax, anchor, n_ok, cok = batch_curvature(
                fit.coeffs[good], fit.centroid[good], fit.scale[good], samples[good], mask[good])
            gi = np.flatnonzero(good)
            axes[gi] = ax
            good[gi] = cok
            passed = cok & (kappa >= 1.0 / cfg.hand.capture_radius)
            stage[ids[gi[cok & ~passed]]] = Stage.CURVATURE_REJECTED
            for j, g in enumerate(gi):
                if cok[j]:
                    curv[g] = CurvatureEstimate(float(kappa[j]), ax[j].copy(), anchor[j].copy(),
                                                int(n_ok[j]))
            good[gi] = passed
    elif cfg.variant is Variant.PCA:
        axes, good = _pca_axes(P, sub_off)
    else:
        axes, good, _ = _normals_axes(sub_flat, sub_off, ctx.normals, ctx.normals_valid)
    t3 = time.perf_counter()
    timing["axis"] += t3 - t2

    stage[ids[good & (stage[ids] == Stage.AXIS_FAILED)]] = Stage.NO_SHELL
    sh_flat, sh_off = _rows(sub_flat, sub_off, good)
    gi = np.flatnonzero(good)
    res = find_shells(ctx.cloud.points, ctx.index, sh_flat, sh_off, axes[gi], cfg.hand, cfg.shell)
    dets = []
    for j, g in enumerate(gi):
        shell = res.shell(j)
        if shell is None:
            continue
        o = int(ids[g])
        stage[o] = Stage.DETECTED
        dets.append(Detection(shell, int(seeds[o]), cfg.variant, start + o, curv[g],
                              res.support_indices(j).copy()))
    timing["shell"] += time.perf_counter() - t3
    return dets, seeds, sizes, stage, dict(timing)


def run_detector(cloud: PointCloud, cfg: DetectorConfig | None = None, *, index=None,
                 normals=None, n_jobs: int = 1, backend: str = "threading",
                 block_size: int = BLOCK_SIZE) -> DetectionRun:
    """Run the sampling loop and return detections with a per-sample trace.

    ``normals`` may pass precomputed ``(normals, valid)`` for the Normals
    variant; otherwise they are computed here and counted in the timing.
    """
    cfg = cfg or DetectorConfig()
    if len(cloud) == 0:
        raise EmptyCloud("cannot detect affordances in an empty cloud")
    timing = {}
    t = time.perf_counter()
    index = index or build_index(cloud)
    timing["index"] = time.perf_counter() - t
    nv = (None, None)
    if cfg.variant is Variant.NORMALS:
        t = time.perf_counter()
        nv = normals if normals is not None else estimate_normals(cloud, cfg.normals_radius)
        timing["normals"] = time.perf_counter() - t
    use_occ = cfg.occlusion_filter and cloud.is_organized
    if cfg.occlusion_filter and not cloud.is_organized:
        logger.warning("cloud is not organized; skipping the occlusion filter")
    ctx = _Context(cloud, index, cfg, nv[0], nv[1], use_occ)
    blocks = [(s, min(s + block_size, cfg.n_samples)) for s in range(0, cfg.n_samples, block_size)]
    if n_jobs == 1 or len(blocks) == 1:
        parts = [_run_block(ctx, a, b) for a, b in blocks]
    else:
        parts = Parallel(n_jobs=n_jobs, backend=backend)(delayed(_run_block)(ctx, a, b)
                                                         for a, b in blocks)
    dets = [d for p in parts for d in p[0]]
    for p in parts:
        for k, v in p[4].items():
            timing[k] = timing.get(k, 0.0) + v
    return DetectionRun(dets, np.concatenate([p[1] for p in parts]),
                        np.concatenate([p[2] for p in parts]),
                        np.concatenate([p[3] for p in parts]), timing)


def detect_affordances(cloud: PointCloud, cfg: DetectorConfig | None = None, **kwargs) -> list:
    """Detected shells ordered by sample ordinal.

    Raises:
        EmptyCloud: the cloud has no points.
    """
    return run_detector(cloud, cfg, **kwargs).detections


def _axis_distance(c1, a1, c2, a2):
    n = np.cross(a1, a2)
    nn = np.linalg.norm(n)
    d = c2 - c1
    if nn < 1e-9:
        return float(np.linalg.norm(d - (d @ a1) * a1))
    return float(abs(d @ n) / nn)


def deduplicate(dets, distance: float = 0.01, angle_deg: float = 20.0) -> list:
    """Greedy merge of shells with axis distance and axis angle below the limits.

    Earlier ordinals win. Evaluation helper only; the detector never calls it.
    """
    cos_lim = np.cos(np.radians(angle_deg))
    kept = []
    for d in dets:
        s = d.shell
        dup = any(abs(float(s.axis @ k.shell.axis)) >= cos_lim
                  and _axis_distance(s.centroid, s.axis, k.shell.centroid, k.shell.axis) < distance
                  for k in kept)
        if not dup:
            kept.append(d)
    return kept


def _as_cloud(X):
    if isinstance(X, PointCloud):
        return X
    return PointCloud(np.asarray(X, dtype=float))


class AffordanceDetector(BaseEstimator):
    """Estimator facade over :func:`run_detector`.

    ``fit`` accepts a :class:`PointCloud` or an ``(n, 3)`` array.

    Attributes
    ----------
    detections_ : list of Detection
    run_ : DetectionRun
    """

    def __init__(self, n_samples=4000, capture_radius=0.026, finger_thickness=0.008,
                 variant="taubin", knn=None, radius=None, occlusion_filter=True,
                 occluder_threshold=20, radius_step=0.001, max_gap_points=None, seed=0,
                 n_jobs=1):
        self.n_samples = n_samples
        self.capture_radius = capture_radius
        self.finger_thickness = finger_thickness
        self.variant = variant
        self.knn = knn
        self.radius = radius
        self.occlusion_filter = occlusion_filter
        self.occluder_threshold = occluder_threshold
        self.radius_step = radius_step
        self.max_gap_points = max_gap_points
        self.seed = seed
        self.n_jobs = n_jobs

    def config(self) -> DetectorConfig:
        if self.knn is not None and self.radius is not None:
            raise ValueError("knn and radius are mutually exclusive")
        mode = (KnnSearch(int(self.knn)) if self.knn is not None
                else RadiusSearch(float(self.radius)) if self.radius is not None else None)
        return DetectorConfig(
            n_samples=int(self.n_samples),
            hand=HandParams(float(self.capture_radius), float(self.finger_thickness)),
            variant=Variant(self.variant), neighborhood=mode,
            occlusion_filter=bool(self.occlusion_filter),
            occluder_threshold=int(self.occluder_threshold),
            shell=ShellSearchConfig(float(self.radius_step), self.max_gap_points),
            seed=int(self.seed))

    def fit(self, X, y=None):
        cloud = _as_cloud(X)
        self.run_ = run_detector(cloud, self.config(), n_jobs=self.n_jobs)
        self.detections_ = self.run_.detections
        self.n_points_ = len(cloud)
        return self

    def predict(self, X=None):
        """Per-point label: ordinal of the first detection whose support holds the point, else -1."""
        check_is_fitted(self, "detections_")
        labels = np.full(self.n_points_, -1, dtype=np.int64)
        for d in reversed(self.detections_):
            labels[d.support_indices] = d.ordinal
        return labels

    def fit_predict(self, X, y=None):
        return self.fit(X).predict()

    def transform(self, X=None):
        """Shell parameters, one row per detection:
        centroid (3), axis (3), inner radius, thickness, extent, support."""
        check_is_fitted(self, "detections_")
        rows = [np.r_[d.shell.centroid, d.shell.axis, d.shell.inner_radius, d.shell.thickness,
                      d.shell.extent, d.shell.support] for d in self.detections_]
        return np.array(rows).reshape(-1, 10)

    def set_config(self, cfg: DetectorConfig):
        mode = cfg.neighborhood
        return self.set_params(
            n_samples=cfg.n_samples, capture_radius=cfg.hand.capture_radius,
            finger_thickness=cfg.hand.finger_thickness, variant=cfg.variant.value,
            knn=mode.k if isinstance(mode, KnnSearch) else None,
            radius=mode.radius if isinstance(mode, RadiusSearch) else None,
            occlusion_filter=cfg.occlusion_filter, occluder_threshold=cfg.occluder_threshold,
            radius_step=cfg.shell.radius_step, max_gap_points=cfg.shell.max_gap_points,
            seed=cfg.seed)

