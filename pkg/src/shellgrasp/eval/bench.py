"""Wall-clock benchmark of the detector variants over a grid of sample counts."""
from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..cloud import PointCloud
from ..pipeline import DetectorConfig, Variant, run_detector
from .metrics import confidence_halfwidth

__all__ = ["BenchReport", "run_benchmark"]


@dataclass
class BenchReport:
    """Per ``(variant, n_samples)`` the list of measured wall times in seconds."""

    times: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)
    n_points: int = 0

    def mean(self, variant, n):
        return float(np.mean(self.times[(variant, n)]))

    def ci(self, variant, n):
        return confidence_halfwidth(self.times[(variant, n)])

    def variants(self):
        return sorted({v for v, _ in self.times}, key=lambda v: list(Variant).index(Variant(v)))

    def sample_counts(self, variant):
        return sorted(n for v, n in self.times if v == variant)

    def ordering_holds(self, n=None) -> bool:
        """PCA < Taubin < Normals by mean time at sample count ``n`` (default: largest)."""
        order = [v.value for v in (Variant.PCA, Variant.TAUBIN, Variant.NORMALS)]
        n = n if n is not None else max(self.sample_counts(order[1]))
        means = [self.mean(v, n) for v in order]
        return means[0] < means[1] < means[2]

    def linearity(self, variant="taubin", per_run=False):
        """``(slope, intercept, r_squared)`` of a least-squares line of wall time
        against the sample count, through the mean time per count or, with
        ``per_run``, through every individual time."""
        xs, ys = [], []
        for n in self.sample_counts(variant):
            t = self.times[(variant, n)]
            xs += [n] * len(t) if per_run else [n]
            ys += list(t) if per_run else [float(np.mean(t))]
        fit = stats.linregress(xs, ys)
        return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)

    CSV_FIELDS = ("variant", "n_samples", "runs", "mean_seconds", "ci95_seconds",
                  "min_seconds", "max_seconds")

    def rows(self):
        for v in self.variants():
            for n in self.sample_counts(v):
                t = self.times[(v, n)]
                yield {"variant": v, "n_samples": n, "runs": len(t),
                       "mean_seconds": self.mean(v, n), "ci95_seconds": self.ci(v, n),
                       "min_seconds": float(np.min(t)), "max_seconds": float(np.max(t))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow(r)
        return buf.getvalue()

    def to_dict(self):
        out = {"n_points": self.n_points, "rows": list(self.rows())}
        if Variant.TAUBIN.value in self.variants() and len(self.sample_counts("taubin")) > 1:
            keys = ("slope", "intercept", "r_squared")
            out["taubin_linearity"] = dict(zip(keys, self.linearity()))
            out["taubin_linearity_per_run"] = dict(zip(keys, self.linearity(per_run=True)))
        if len(self.variants()) == 3:
            out["ordering_pca_taubin_normals"] = self.ordering_holds()
        return out


def run_benchmark(cloud: PointCloud, base: DetectorConfig | None = None,
                  variants=("pca", "taubin", "normals"), n_samples=(4000,),
                  repetitions: int = 10, warmup: bool = True) -> BenchReport:
    """Time complete detector runs, including index building and, for the Normals
    variant, normal estimation.

    Repetition ``i`` uses seed ``base.seed + i`` for every grid cell, so all
    variants see the same seeds. One untimed warm-up run per variant absorbs
    one-off compilation costs. Repetitions are interleaved round-robin over the
    grid so slow drift in machine load spreads evenly over all cells, and the
    garbage collector is kept out of the timed region, as ``timeit`` does.
    """
    base = base or DetectorConfig()
    report = BenchReport(n_points=len(cloud))
    cells = [(Variant(v).value, int(n)) for v in variants for n in n_samples]
    if warmup:
        for v in variants:
            run_detector(cloud, DetectorConfig(**{**base.__dict__, "variant": v,
                                                  "n_samples": int(min(n_samples))}))
    for key in cells:
        report.times[key] = []
        report.phases[key] = {}
    gc_was_enabled = gc.isenabled()
    try:
        for i in range(repetitions):
            for v, n in cells:
                cfg = DetectorConfig(**{**base.__dict__, "variant": v, "n_samples": n,
                                        "seed": base.seed + i})
                gc.collect()
                gc.disable()
                t0 = time.perf_counter()
                run = run_detector(cloud, cfg)
                elapsed = time.perf_counter() - t0
                if gc_was_enabled:
                    gc.enable()
                report.times[(v, n)].append(elapsed)
                phases = report.phases[(v, n)]
                for k, s in run.timing.items():
                    phases[k] = phases.get(k, 0.0) + s / repetitions
    finally:
        if gc_was_enabled:
            gc.enable()
    return report
