"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the pytest terminal summary under "acceptance criteria".
"""
import json
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize
from scipy.spatial import cKDTree

from conftest import record_criterion
from helpers import angle_deg, cylinder_patch, random_quadric, random_quadric_points
from shellgrasp.eval.harness import derived_seeds, evaluate_scene, fixture_names, load_fixture
from shellgrasp.eval.metrics import match_detections
from shellgrasp.eval.render import render_range_image
from shellgrasp.eval.truth import label_scene
from shellgrasp.geometry import eval_quadric
from shellgrasp.pipeline import DetectorConfig, Stage, Variant, detect_affordances, run_detector
from shellgrasp.shell import HandParams, audit_shell, fit_circle_2d
from shellgrasp.taubin import estimate_curvature, fit_taubin_full

HAND = HandParams(0.026, 0.008)
N_RUNS = 10


# ------------------------------------------------------------ 1


def test_criterion_1_taubin_exactness():
    rng = np.random.default_rng(1001)
    data = []
    for _ in range(50):
        c = random_quadric(rng)
        data.append(random_quadric_points(rng, c, 200))
    t0 = time.perf_counter()
    fits = [fit_taubin_full(P) for P in data]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for fit, P in zip(fits, data):
        c = fit.coeffs / np.linalg.norm(fit.coeffs)
        worst = max(worst, float(np.max(np.abs(eval_quadric(c, fit.moments.to_frame(P))))))
    ok = worst < 1e-8 and elapsed < 1.0
    assert record_criterion(1, ok, f"max conditioned residual {worst:.2e} (< 1e-8), "
                                   f"50 fits in {elapsed:.3f} s (< 1 s)")


# ------------------------------------------------------------ 2


def test_criterion_2_curvature():
    worst_rel, worst_ang, fails = 0.0, 0.0, 0
    for r in (0.01, 0.02, 0.026, 0.04):
        for trial in range(20):
            rng = np.random.default_rng([2002, int(r * 1e4), trial])
            P, axis, _ = cylinder_patch(rng, r, n=200, arc_deg=120.0, length=0.06)
            fit = fit_taubin_full(P)
            est = estimate_curvature(fit.quadric, P, random_state=trial)
            rel = abs(est.median_kappa_max * r - 1.0)
            ang = angle_deg(est.axis, axis)
            worst_rel, worst_ang = max(worst_rel, rel), max(worst_ang, ang)
            fails += not (rel < 0.02 and ang < 5.0)
    assert record_criterion(2, fails == 0, f"80 cylinders, worst kappa error {100 * worst_rel:.4f}% "
                                           f"(< 2%), worst axis error {worst_ang:.4f} deg (< 5)")


# ------------------------------------------------------------ 3


def _noisy_circle(rng, center, r, n, noise):
    th = rng.uniform(0, 2 * np.pi, n)
    rr = r + rng.normal(0, noise, n) if noise else np.full(n, r)
    return np.column_stack([center[0] + rr * np.cos(th), center[1] + rr * np.sin(th)])


def test_criterion_3_circle_fit():
    rng = np.random.default_rng(3003)
    exact = 0.0
    for _ in range(100):
        c, r = rng.uniform(-0.5, 0.5, 2), rng.uniform(0.005, 0.05)
        ctr, rad = fit_circle_2d(_noisy_circle(rng, c, r, 100, 0.0))
        exact = max(exact, float(np.max(np.abs(np.r_[ctr - c, rad - r]))))
    good = 0
    for _ in range(100):
        c = rng.uniform(-0.5, 0.5, 2)
        _, rad = fit_circle_2d(_noisy_circle(rng, c, 0.026, 100, 5e-4))
        good += abs(rad - 0.026) < 0.05 * 0.026
    # independent minimizer of the same algebraic objective over (center, radius)
    agree = 0.0
    for _ in range(100):
        X = _noisy_circle(rng, rng.uniform(-0.5, 0.5, 2), rng.uniform(0.005, 0.05), 100, 5e-4)
        ctr, rad = fit_circle_2d(X)
        start = [X[:, 0].mean() + 0.01, X[:, 1].mean() - 0.01, 0.03]
        res = optimize.least_squares(lambda p: np.sum((X - p[:2]) ** 2, axis=1) - p[2] ** 2,
                                     start, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        ref = np.r_[res.x[:2], abs(res.x[2])]
        agree = max(agree, float(np.max(np.abs(np.r_[ctr, rad] - ref))))
    ok = exact <= 1e-10 and good >= 95 and agree < 1e-9
    assert record_criterion(3, ok, f"noiseless error {exact:.1e} (<= 1e-10), {good}/100 noisy "
                                   f"trials within 5% (>= 95), minimizer gap {agree:.1e} (< 1e-9)")


# ------------------------------------------------------------ 4, 5, 6


class _Audit:
    """Brute-force EGA audit of every emitted shell, restricted to a bounding ball."""

    def __init__(self, points):
        self.points = points
        self.tree = cKDTree(points)
        self.checked = 0
        self.failed = []

    def __call__(self, dets, where):
        for d in dets:
            s = d.shell
            bound = np.hypot(0.5 * s.extent, s.outer_radius) + 1e-6
            idx = self.tree.query_ball_point(s.centroid, bound)
            ok = s.inner_radius <= HAND.capture_radius and \
                audit_shell(s, self.points[idx], HAND)[0]
            self.checked += 1
            if not ok:
                self.failed.append((where, d.key()))


@pytest.fixture(scope="module")
def fixture_runs(rendered):
    """Ten seeded runs per fixture for Taubin and PCA (plus one Normals run), every shell audited."""
    reports, audits, flush_runs = {}, {}, []
    for name in fixture_names():
        rendering = rendered(name)[0]
        audit = audits[name] = _Audit(rendering.cloud.points)
        for variant in (Variant.TAUBIN, Variant.PCA):
            def on_run(seed, run, variant=variant, name=name):
                audit(run.detections, (name, variant.value, seed))
                if name == "wall_flush" and variant is Variant.TAUBIN:
                    flush_runs.append((seed, run))
            reports[name, variant] = evaluate_scene(
                load_fixture(name), DetectorConfig(hand=HAND, n_samples=4000, variant=variant),
                runs=N_RUNS, base_seed=0, on_run=on_run)
        dets = detect_affordances(rendering.cloud, DetectorConfig(
            hand=HAND, variant=Variant.NORMALS, seed=derived_seeds(0, 1)[0]))
        audit(dets, (name, "normals", 0))
    return reports, audits, flush_runs


def test_criterion_4_ega_audit(fixture_runs):
    _, audits, _ = fixture_runs
    checked = sum(a.checked for a in audits.values())
    failed = [f for a in audits.values() for f in a.failed]
    assert checked > 0
    assert record_criterion(4, not failed, f"{checked - len(failed)}/{checked} shells pass the "
                                           f"brute-force audit over {len(audits)} fixtures")


def test_criterion_5_precision_recall(fixture_runs):
    reports, _, _ = fixture_runs
    names = fixture_names()
    taubin = {n: reports[n, Variant.TAUBIN] for n in names}
    pca = {n: reports[n, Variant.PCA] for n in names}
    full_recall = all(r.min_recall == 1.0 and len(r.runs) == N_RUNS for r in taubin.values())
    high = [n for n, r in taubin.items() if r.precision >= 0.9]
    mean_t = float(np.mean([r.precision for r in taubin.values()]))
    mean_p = float(np.mean([r.precision for r in pca.values()]))
    for n in names:
        print(f"  {n:12s} taubin P={taubin[n].precision:.3f}+-{taubin[n].precision_ci:.3f} "
              f"R={taubin[n].recall:.3f}  pca P={pca[n].precision:.3f} R={pca[n].recall:.3f}")
    ok = full_recall and len(high) >= 8 and mean_p <= mean_t
    assert record_criterion(5, ok, f"taubin recall 100% on every run: {full_recall}; precision "
                                   f">= 90% on {len(high)}/10 scenes (>= 8); mean precision "
                                   f"pca {mean_p:.3f} <= taubin {mean_t:.3f}")


def test_criterion_6_flush_hard_negative(fixture_runs, rendered):
    _, _, runs = fixture_runs
    rendering = rendered("wall_flush")[0]
    spec = rendering.spec
    k = [p.name for p in spec.primitives].index("flush_pipe")
    pipe = spec.primitives[k]
    a, b = (spec.camera.to_camera(e) for e in pipe.endpoints())
    on_pipe = rendering.point_label == k
    hits = 0
    for _, run in runs:
        for d in run.detections:
            c = d.shell.centroid
            t = np.clip((c - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
            near_axis = np.linalg.norm(c - (a + t * (b - a))) < pipe.radius + 0.01
            mostly_pipe = np.mean(on_pipe[d.support_indices]) >= 0.5
            hits += bool(on_pipe[d.seed_index] or near_axis or mostly_pipe)
    ok = hits == 0 and len(runs) == N_RUNS
    assert record_criterion(6, ok, f"{hits} detections on the wall-flush pipe over {len(runs)} runs")


# ------------------------------------------------------------ 7


def test_criterion_7_runtime(tmp_path):
    # a fresh interpreter keeps the heap and caches of the earlier tests out of the timings
    out = tmp_path / "bench.json"
    cmd = [sys.executable, "-m", "shellgrasp.cli", "bench", "--fixture", "household",
           "--knn", "500", "--capture-radius", str(HAND.capture_radius),
           "--finger-thickness", str(HAND.finger_thickness), "--seed", "7",
           "--sample-grid", "1000,2000,4000", "--runs", str(N_RUNS), "--json", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=1800)
    assert proc.returncode == 0, proc.stderr
    print(proc.stdout)
    rep = json.loads(out.read_text())
    means = {r["variant"]: r["mean_seconds"] for r in rep["rows"] if r["n_samples"] == 4000}
    # the fit runs through the mean time per sample count, the measured quantity
    r2 = rep["taubin_linearity"]["r_squared"]
    r2_runs = rep["taubin_linearity_per_run"]["r_squared"]
    ok = means["pca"] < means["taubin"] < means["normals"] and r2 > 0.95
    assert rep["ordering_pca_taubin_normals"] == (means["pca"] < means["taubin"] < means["normals"])
    assert record_criterion(7, ok, f"{rep['n_points']} points, mean s pca {means['pca']:.3f} < taubin "
                                   f"{means['taubin']:.3f} < normals {means['normals']:.3f}; "
                                   f"taubin linear fit of means R^2 {r2:.4f} (> 0.95), "
                                   f"of single runs {r2_runs:.4f}")


# ------------------------------------------------------------ 8


def test_criterion_8_determinism(rendered):
    names = fixture_names()
    mismatches = 0
    seeds = derived_seeds(8, 20)
    for trial, seed in enumerate(seeds):
        cloud = rendered(names[trial % len(names)])[0].cloud
        variant = (Variant.TAUBIN, Variant.PCA)[trial % 2]
        cfg = DetectorConfig(hand=HAND, seed=seed, variant=variant)
        serial = [d.key() for d in detect_affordances(cloud, cfg)]
        again = [d.key() for d in detect_affordances(cloud, cfg)]
        parallel = [d.key() for d in detect_affordances(cloud, cfg, n_jobs=4,
                                                        block_size=97 + trial)]
        mismatches += not (serial == again == parallel and set(serial) == set(parallel))
    assert record_criterion(8, mismatches == 0, f"{20 - mismatches}/20 trials identical across "
                                                f"repeated serial and 4-thread runs")


# ------------------------------------------------------------ 9


def test_criterion_9_occlusion(rendered):
    rendering, truth = rendered("occlusion")
    spec = rendering.spec
    names = [p.name for p in spec.primitives]
    slabs = [names.index("slab_left"), names.index("slab_right")]
    # surfaces the slabs hide: render the same view without them and keep the covered pixels
    bare = render_range_image(replace(spec, noise=0.0, primitives=tuple(
        p for i, p in enumerate(spec.primitives) if i not in slabs)))
    covered = np.isin(rendering.pixel_label, slabs) & (bare.pixel_label >= 0)
    hidden = cKDTree(bare.cloud.points[bare.cloud.organized.pixel_index[covered]])
    # a neighborhood lies in the shadow when its ball holds at least twice the
    # filter threshold of hidden surface points
    min_hidden = 2 * DetectorConfig().occluder_threshold
    in_shadow = kept = 0
    fp = {True: 0, False: 0}
    for seed in derived_seeds(0, N_RUNS):
        for filt in (True, False):
            cfg = DetectorConfig(hand=HAND, seed=seed, occlusion_filter=filt)
            run = run_detector(rendering.cloud, cfg)
            fp[filt] += match_detections(run.detections, truth).false_positives
            if not filt:
                continue
            centers = rendering.cloud.points[run.seed_index]
            counts = np.array([len(i) for i in hidden.query_ball_point(centers, HAND.capture_radius)])
            shadowed = (counts >= min_hidden) & ~np.isin(rendering.point_label[run.seed_index], slabs)
            in_shadow += int(shadowed.sum())
            kept += int(np.count_nonzero(run.stage[shadowed] != Stage.OCCLUDED))
    ok = in_shadow > 0 and kept == 0 and fp[False] > fp[True]
    assert record_criterion(9, ok, f"{in_shadow - kept}/{in_shadow} shadow neighborhoods "
                                   f"discarded; false positives {fp[True]} with filter < "
                                   f"{fp[False]} without")
