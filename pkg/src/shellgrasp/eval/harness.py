"""Repeated-run evaluation of the detector on rendered fixture scenes."""
from __future__ import annotations

import time
from importlib import resources

import numpy as np

from ..cloud import build_index
from ..pipeline import DetectorConfig, Variant, estimate_normals, run_detector
from .metrics import EvalReport, MatchTolerance, match_detections
from .render import render_range_image
from .scene import SceneSpec, parse_scene
from .truth import label_scene

__all__ = ["fixture_names", "load_fixture", "derived_seeds", "evaluate_scene",
           "evaluate_rendering"]


def fixture_names() -> list:
    """Names of the shipped scene fixtures, sorted."""
    root = resources.files("shellgrasp.eval") / "fixtures"
    return sorted(p.name[:-6] for p in root.iterdir() if p.name.endswith(".scene"))


def load_fixture(name: str) -> SceneSpec:
    ref = resources.files("shellgrasp.eval") / "fixtures" / f"{name}.scene"
    if not ref.is_file():
        raise KeyError(f"no fixture named {name!r}; available: {', '.join(fixture_names())}")
    return parse_scene(ref.read_text(), name)


def derived_seeds(base: int, n: int) -> list:
    """``n`` reproducible detector seeds spawned from ``base``."""
    return [int(s) for s in np.random.SeedSequence(base).generate_state(n, dtype=np.uint32)]


def evaluate_rendering(rendering, truth, cfg: DetectorConfig, seeds,
                       tol: MatchTolerance | None = None, n_jobs: int = 1,
                       on_run=None) -> EvalReport:
    """Run the detector once per seed on a fixed rendering and aggregate the matches.

    ``on_run(seed, run)`` is called after each run with its :class:`DetectionRun`.
    """
    cloud = rendering.cloud
    index = build_index(cloud)
    normals = None
    if cfg.variant is Variant.NORMALS:
        normals = estimate_normals(cloud, cfg.normals_radius)
    report = EvalReport(rendering.spec.name, cfg.variant.value,
                        truth_names=[t.name for t in truth])
    for s in seeds:
        run_cfg = DetectorConfig(**{**cfg.__dict__, "seed": int(s)})
        t0 = time.perf_counter()
        run = run_detector(cloud, run_cfg, index=index, normals=normals, n_jobs=n_jobs)
        elapsed = time.perf_counter() - t0
        result = match_detections(run.detections, truth, tol)
        report.add_run(s, result, elapsed, run.timing, run.detections)
        if on_run is not None:
            on_run(int(s), run)
    return report


def evaluate_scene(spec: SceneSpec, cfg: DetectorConfig | None = None, runs: int = 10,
                   base_seed: int = 0, tol: MatchTolerance | None = None,
                   n_jobs: int = 1, on_run=None) -> EvalReport:
    """Render ``spec`` once, label it, and evaluate ``runs`` seeded detector runs."""
    cfg = cfg or DetectorConfig()
    rendering = render_range_image(spec)
    truth = label_scene(spec, rendering, cfg.hand)
    return evaluate_rendering(rendering, truth, cfg, derived_seeds(base_seed, runs), tol, n_jobs,
                              on_run)
