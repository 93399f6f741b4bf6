"""Command-line interface: ``shellgrasp {detect,synth,eval,bench}``.

Exit status is 0 on success, 2 for unreadable or invalid input files and
3 for invalid configuration (flags, config files, scene specs, or a truth
file that does not belong to the evaluated cloud).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import io as sgio
from .cloud import KnnSearch, RadiusSearch
from .errors import ConfigError, EmptyCloud, InputFormatError, ShellGraspError
from .pipeline import DetectorConfig, Variant, run_detector
from .shell import HandParams, ShellSearchConfig

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3

logger = logging.getLogger("shellgrasp")

# detector options shared by detect, eval and bench; None means "not given"
_DETECTOR_KEYS = ("capture_radius", "finger_thickness", "samples", "variant", "knn", "radius",
                  "occlusion_filter", "occluder_threshold", "radius_step", "max_gap_points",
                  "seed")
_DEFAULTS = {"capture_radius": 0.026, "finger_thickness": 0.008, "samples": 4000,
             "variant": "taubin", "knn": None, "radius": None, "occlusion_filter": True,
             "occluder_threshold": 20, "radius_step": 0.001, "max_gap_points": None, "seed": 0}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _add_detector_flags(p):
    g = p.add_argument_group("detector")
    g.add_argument("--config", help="JSON file with detector options (flag names, '_' for '-')")
    g.add_argument("--capture-radius", type=float, help="meters (default 0.026)")
    g.add_argument("--finger-thickness", type=float, help="meters (default 0.008)")
    g.add_argument("--samples", type=int, help="neighborhoods sampled (default 4000)")
    g.add_argument("--variant", choices=[v.value for v in Variant])
    mode = g.add_mutually_exclusive_group()
    mode.add_argument("--knn", type=int, metavar="K", help="k-nearest-neighbor neighborhoods")
    mode.add_argument("--radius", type=float, metavar="R",
                      help="radius neighborhoods in meters (default: the capture radius)")
    g.add_argument("--no-occlusion-filter", dest="occlusion_filter", action="store_const",
                   const=False)
    g.add_argument("--occluder-threshold", type=int)
    g.add_argument("--radius-step", type=float, help="shell radius increment, meters")
    g.add_argument("--max-gap-points", type=int,
                   help="fixed annulus point allowance (default: 1%% of the neighborhood)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-jobs", type=int, default=1, help="worker threads")


def _detector_options(args) -> dict:
    opts = dict(_DEFAULTS)
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}", EXIT_CONFIG)
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config}: invalid JSON at line {exc.lineno}: {exc.msg}",
                           EXIT_CONFIG)
        if not isinstance(conf, dict):
            raise CliError(f"config {args.config}: expected a JSON object", EXIT_CONFIG)
        for k, v in conf.items():
            key = k.replace("-", "_")
            if key not in _DETECTOR_KEYS:
                raise CliError(f"config {args.config}: unknown field {k!r}", EXIT_CONFIG)
            opts[key] = v
    for k in _DETECTOR_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    if args.knn is not None:
        opts["radius"] = None
    elif args.radius is not None:
        opts["knn"] = None
    return opts


def _config(opts: dict) -> DetectorConfig:
    try:
        if opts["knn"] is not None and opts["radius"] is not None:
            raise ValueError("knn and radius are mutually exclusive")
        mode = (KnnSearch(int(opts["knn"])) if opts["knn"] is not None
                else RadiusSearch(float(opts["radius"])) if opts["radius"] is not None else None)
        gap = opts["max_gap_points"]
        return DetectorConfig(
            n_samples=int(opts["samples"]),
            hand=HandParams(float(opts["capture_radius"]), float(opts["finger_thickness"])),
            variant=Variant(opts["variant"]), neighborhood=mode,
            occlusion_filter=bool(opts["occlusion_filter"]),
            occluder_threshold=int(opts["occluder_threshold"]),
            shell=ShellSearchConfig(float(opts["radius_step"]),
                                    None if gap is None else int(gap)),
            seed=int(opts["seed"]))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid detector configuration: {exc}", EXIT_CONFIG)


def config_params(cfg: DetectorConfig) -> dict:
    """Flat, JSON-ready view of a detector configuration."""
    mode = cfg.neighborhood
    return {"capture_radius": cfg.hand.capture_radius,
            "finger_thickness": cfg.hand.finger_thickness, "n_samples": cfg.n_samples,
            "variant": cfg.variant.value,
            "knn": mode.k if isinstance(mode, KnnSearch) else None,
            "radius": mode.radius if isinstance(mode, RadiusSearch) else None,
            "occlusion_filter": cfg.occlusion_filter,
            "occluder_threshold": cfg.occluder_threshold,
            "radius_step": cfg.shell.radius_step, "max_gap_points": cfg.shell.max_gap_points,
            "seed": cfg.seed}


def config_from_params(params: dict) -> DetectorConfig:
    opts = dict(_DEFAULTS)
    opts.update({("samples" if k == "n_samples" else k): v for k, v in params.items()})
    return _config(opts)


def _read_cloud(path):
    try:
        cloud = sgio.read_pcd(path)
    except InputFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT)
    if len(cloud) == 0:
        raise CliError(f"{path}: the cloud has no valid points", EXIT_INPUT)
    return cloud


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------- commands


def cmd_detect(args) -> int:
    cfg = _config(_detector_options(args))
    cloud = _read_cloud(args.input)
    try:
        run = run_detector(cloud, cfg, n_jobs=args.n_jobs)
    except EmptyCloud as exc:
        raise CliError(str(exc), EXIT_INPUT)
    source = {"path": str(args.input), "sha256": sgio.file_sha256(args.input),
              "n_points": len(cloud), "organized": cloud.is_organized}
    doc = sgio.detections_document(run.detections, config_params(cfg), source,
                                   None if args.no_timing else run.timing)
    _write(sgio.dump_json(doc), args.output)
    if args.ply_out:
        sgio.write_ply(args.ply_out, cloud, run.detections)
    logger.info("%d detections from %d samples", len(run.detections), cfg.n_samples)
    return EXIT_OK


def _scene(args):
    from .eval.harness import load_fixture
    from .eval.scene import load_scene

    try:
        if args.fixture:
            return load_fixture(args.fixture)
        return load_scene(args.scene)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_CONFIG)
    except ConfigError as exc:
        raise CliError(f"{args.fixture or args.scene}: {exc}", EXIT_CONFIG)
    except OSError as exc:
        raise CliError(f"cannot read scene {args.scene}: {exc.strerror}", EXIT_CONFIG)


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .eval.render import render_range_image
    from .eval.truth import label_scene

    spec = _scene(args)
    if args.seed is not None:
        spec = replace(spec, seed=int(args.seed))
    hand = HandParams(args.capture_radius, args.finger_thickness)
    try:
        rendering = render_range_image(spec)
    except ShellGraspError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    sgio.write_pcd(args.output, rendering.cloud)
    if args.truth:
        truth = label_scene(spec, rendering, hand)
        doc = {"format": "shellgrasp/truth", "version": 1, "scene": spec.name,
               "seed": int(spec.seed), "pcd_sha256": sgio.file_sha256(args.output),
               "n_points": len(rendering.cloud),
               "hand": {"capture_radius": hand.capture_radius,
                        "finger_thickness": hand.finger_thickness},
               "affordances": [t.to_dict() for t in truth]}
        sgio.dump_json(doc, args.truth)
    logger.info("rendered %d points", len(rendering.cloud))
    return EXIT_OK


def _load_doc(path, fmt):
    try:
        doc = sgio.load_json(path)
    except InputFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT)
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise CliError(f"{path}: not a {fmt} document", EXIT_INPUT)
    return doc


def cmd_eval(args) -> int:
    from .eval.harness import derived_seeds
    from .eval.metrics import EvalReport, MatchTolerance, match_detections, summarize_runs
    from .eval.truth import TruthAffordance

    dets_doc = _load_doc(args.detections, "shellgrasp/detections")
    truth_doc = _load_doc(args.truth, "shellgrasp/truth")
    src = dets_doc.get("source", {})
    if src.get("sha256") and src["sha256"] != truth_doc.get("pcd_sha256"):
        raise CliError(f"{args.truth} describes a different cloud than {args.detections}",
                       EXIT_CONFIG)
    try:
        tol = MatchTolerance(args.position_tol, args.angle_tol, args.radius_tol)
        truth = [TruthAffordance.from_dict(a) for a in truth_doc["affordances"]]
        dets = [sgio.record_to_detection(r) for r in dets_doc["detections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed document: {exc}", EXIT_INPUT)
    params = dets_doc.get("params", {})
    report = EvalReport(truth_doc.get("scene", ""), params.get("variant", ""),
                        truth_names=[t.name for t in truth])
    if args.runs <= 1:
        report.add_run(params.get("seed", 0), match_detections(dets, truth, tol),
                       dets=dets)
    else:
        path = args.input or src.get("path")
        if not path:
            raise CliError("--runs needs the source cloud (--input)", EXIT_CONFIG)
        if sgio.file_sha256(path) != truth_doc.get("pcd_sha256"):
            raise CliError(f"{args.truth} describes a different cloud than {path}", EXIT_CONFIG)
        cloud = _read_cloud(path)
        cfg = config_from_params(params)
        for s in derived_seeds(cfg.seed, args.runs):
            t0 = time.perf_counter()
            run = run_detector(cloud, DetectorConfig(**{**cfg.__dict__, "seed": s}),
                               n_jobs=args.n_jobs)
            elapsed = time.perf_counter() - t0
            report.add_run(s, match_detections(run.detections, truth, tol),
                           seconds=None if args.no_timing else elapsed,
                           timing=None if args.no_timing else run.timing, dets=run.detections)
    out = report.to_dict()
    out["tolerance"] = {"position": tol.position, "angle_deg": tol.angle_deg,
                        "radius": tol.radius}
    _write(sgio.dump_json(out), args.output)
    if args.csv:
        _write(summarize_runs([report]), args.csv)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .eval.bench import run_benchmark

    cfg = _config(_detector_options(args))
    if args.input:
        cloud = _read_cloud(args.input)
    else:
        from .eval.render import render_range_image

        cloud = render_range_image(_scene(args)).cloud
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        variants = [Variant(v).value for v in variants]
        counts = [int(n) for n in args.sample_grid.split(",")]
        if args.runs < 1 or not counts or min(counts) < 1:
            raise ValueError("runs and sample counts must be positive")
    except ValueError as exc:
        raise CliError(f"invalid benchmark grid: {exc}", EXIT_CONFIG)
    report = run_benchmark(cloud, cfg, variants, counts, args.runs)
    _write(report.to_csv(), args.output)
    if args.json:
        sgio.dump_json(report.to_dict(), args.json)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shellgrasp",
                                description="Enveloping grasp affordance detection in point clouds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="detect cylindrical shells in a PCD cloud")
    d.add_argument("--input", "-i", required=True, help="PCD file")
    d.add_argument("--output", "-o", help="JSON output (default stdout)")
    d.add_argument("--ply-out", help="colored PLY with support points and shell wireframes")
    d.add_argument("--no-timing", action="store_true",
                   help="omit the timing field so output is byte-reproducible")
    _add_detector_flags(d)
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("synth", help="render a scene spec to an organized PCD plus truth")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene spec file")
    src.add_argument("--fixture", help="name of a shipped fixture scene")
    s.add_argument("--seed", type=int, help="render seed (default: the scene's)")
    s.add_argument("--output", "-o", required=True, help="PCD output")
    s.add_argument("--truth", help="ground-truth JSON output")
    s.add_argument("--capture-radius", type=float, default=0.026)
    s.add_argument("--finger-thickness", type=float, default=0.008)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--detections", required=True, help="detections JSON from 'detect'")
    e.add_argument("--truth", required=True, help="truth JSON from 'synth'")
    e.add_argument("--input", help="source PCD for --runs (default: path in the detections)")
    e.add_argument("--runs", type=int, default=1,
                   help="repeat detection with seeds derived from the recorded one")
    e.add_argument("--position-tol", type=float, default=0.01, help="meters")
    e.add_argument("--angle-tol", type=float, default=20.0, help="degrees")
    e.add_argument("--radius-tol", type=float, default=0.01, help="meters")
    e.add_argument("--output", "-o", help="report JSON (default stdout)")
    e.add_argument("--csv", help="summary CSV row output")
    e.add_argument("--no-timing", action="store_true")
    e.add_argument("--n-jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time the variants over a sample-count grid")
    bsrc = b.add_mutually_exclusive_group(required=True)
    bsrc.add_argument("--input", "-i", help="PCD file")
    bsrc.add_argument("--fixture", help="render a shipped fixture scene")
    b.add_argument("--variants", default="pca,taubin,normals")
    b.add_argument("--sample-grid", default="1000,2000,4000",
                   help="comma-separated sample counts")
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--output", "-o", help="CSV output (default stdout)")
    b.add_argument("--json", help="summary JSON with ordering and linearity checks")
    _add_detector_flags(b)
    b.set_defaults(func=cmd_bench, scene=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"shellgrasp {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except InputFormatError as exc:
        print(f"shellgrasp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
