"""Detection-to-truth matching, precision/recall and run aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "MatchTolerance",
    "MatchResult",
    "EvalReport",
    "match_detections",
    "point_segment_distance",
    "summarize_runs",
    "confidence_halfwidth",
]


@dataclass(frozen=True)
class MatchTolerance:
    position: float = 0.01
    angle_deg: float = 20.0
    radius: float = 0.01


def point_segment_distance(p, a, b):
    """Distance from ``p`` to every segment ``a[i]-b[i]``."""
    ab = b - a
    L2 = np.sum(ab * ab, axis=1)
    t = np.clip(np.sum((p - a) * ab, axis=1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    q = a + t[:, None] * ab
    return np.linalg.norm(p - q, axis=1)


def _shell_of(d):
    return getattr(d, "shell", d)


def _matches(shell, truth, tol):
    a, b = truth.polyline[:-1], truth.polyline[1:]
    dirs = b - a
    norms = np.linalg.norm(dirs, axis=1)
    keep = norms > 0
    a, b, dirs = a[keep], b[keep], dirs[keep] / norms[keep, None]
    dist = point_segment_distance(np.asarray(shell.centroid), a, b)
    cosang = np.abs(dirs @ np.asarray(shell.axis))
    ok = (dist < tol.position) & (cosang > np.cos(np.radians(tol.angle_deg)))
    return bool(ok.any()) and abs(shell.inner_radius - truth.radius) < tol.radius


@dataclass
class MatchResult:
    precision: float
    recall: float
    vacuous_precision: bool
    n_detections: int
    n_truth: int
    detection_matched: np.ndarray
    truth_hits: np.ndarray

    @property
    def false_positives(self) -> int:
        return int(self.n_detections - np.count_nonzero(self.detection_matched))


def match_detections(dets, truth, tol: MatchTolerance | None = None) -> MatchResult:
    """Match detections to truth affordances.

    A detection matches when its shell centroid lies within ``tol.position``
    of a piece of the truth center line whose direction is within
    ``tol.angle_deg`` of the shell axis (either sign), and the inner radius
    differs from the truth radius by less than ``tol.radius``. With no
    detections, precision is reported as 1.0 and flagged vacuous.
    """
    tol = tol or MatchTolerance()
    shells = [_shell_of(d) for d in dets]
    M = np.zeros((len(shells), len(truth)), dtype=bool)
    for i, s in enumerate(shells):
        for j, t in enumerate(truth):
            M[i, j] = _matches(s, t, tol)
    matched = M.any(axis=1)
    hits = M.sum(axis=0)
    vacuous = len(shells) == 0
    precision = 1.0 if vacuous else float(matched.mean())
    recall = float(np.mean(hits > 0)) if len(truth) else 1.0
    return MatchResult(precision, recall, vacuous, len(shells), len(truth), matched, hits)


def confidence_halfwidth(values, level: float = 0.95) -> float:
    """Student-t half width of the mean's confidence interval (0 for fewer than 2 values)."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 0.0
    sd = np.std(v, ddof=1)
    return float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * sd / np.sqrt(len(v)))


@dataclass
class EvalReport:
    """Aggregate over repeated runs of one scene and variant."""

    scene: str
    variant: str
    runs: list = field(default_factory=list)
    truth_names: list = field(default_factory=list)
    runtime: dict = field(default_factory=dict)

    def _col(self, key):
        return np.array([r[key] for r in self.runs], dtype=float)

    @property
    def precision(self) -> float:
        return float(self._col("precision").mean()) if self.runs else float("nan")

    @property
    def recall(self) -> float:
        return float(self._col("recall").mean()) if self.runs else float("nan")

    @property
    def precision_ci(self) -> float:
        return confidence_halfwidth(self._col("precision"))

    @property
    def recall_ci(self) -> float:
        return confidence_halfwidth(self._col("recall"))

    @property
    def min_recall(self) -> float:
        return float(self._col("recall").min()) if self.runs else float("nan")

    def hit_counts(self):
        """Per truth affordance, the summed detection hits over all runs."""
        tot = np.zeros(len(self.truth_names), dtype=np.int64)
        for r in self.runs:
            tot += np.asarray(r["truth_hits"], dtype=np.int64)
        return dict(zip(self.truth_names, tot.tolist()))

    def add_run(self, seed, result: MatchResult, seconds=None, timing=None, dets=None):
        fps = []
        if dets is not None:
            for d, m in zip(dets, result.detection_matched):
                if not m:
                    s = _shell_of(d)
                    fps.append({"centroid": np.asarray(s.centroid).tolist(),
                                "axis": np.asarray(s.axis).tolist(),
                                "inner_radius": float(s.inner_radius)})
        self.runs.append({
            "seed": int(seed), "precision": result.precision, "recall": result.recall,
            "vacuous_precision": result.vacuous_precision,
            "n_detections": result.n_detections, "false_positives": result.false_positives,
            "truth_hits": result.truth_hits.tolist(), "seconds": seconds,
            "timing": timing or {}, "false_positive_shells": fps,
        })

    def to_dict(self):
        return {
            "scene": self.scene, "variant": self.variant, "n_runs": len(self.runs),
            "precision": self.precision, "precision_ci95": self.precision_ci,
            "recall": self.recall, "recall_ci95": self.recall_ci,
            "min_recall": self.min_recall, "truth": self.truth_names,
            "hit_counts": self.hit_counts(), "runtime": self.runtime, "runs": self.runs,
        }

    CSV_FIELDS = ("scene", "variant", "n_runs", "precision", "precision_ci95", "recall",
                  "recall_ci95", "min_recall", "mean_detections", "mean_seconds")

    def csv_row(self):
        sec = [r["seconds"] for r in self.runs if r["seconds"] is not None]
        return {"scene": self.scene, "variant": self.variant, "n_runs": len(self.runs),
                "precision": self.precision, "precision_ci95": self.precision_ci,
                "recall": self.recall, "recall_ci95": self.recall_ci,
                "min_recall": self.min_recall,
                "mean_detections": float(self._col("n_detections").mean()) if self.runs else 0.0,
                "mean_seconds": float(np.mean(sec)) if sec else float("nan")}


def summarize_runs(reports) -> str:
    """CSV text with one row per report."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EvalReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()
