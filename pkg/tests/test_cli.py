import csv
import io
import json

import jsonschema
import numpy as np
import pytest

from shellgrasp import io as sgio
from shellgrasp.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, config_from_params, config_params, main
from shellgrasp.pipeline import DetectorConfig, Variant


@pytest.fixture(scope="module")
def mugs(tmp_path_factory):
    d = tmp_path_factory.mktemp("mugs")
    assert main(["synth", "--fixture", "mugs", "-o", str(d / "mugs.pcd"),
                 "--truth", str(d / "truth.json")]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def mugs_detected(mugs):
    # default parameters: capture 2.6 cm, gap 0.8 cm, 4000 samples
    assert main(["detect", "-i", str(mugs / "mugs.pcd"), "-o", str(mugs / "dets.json"),
                 "--no-timing"]) == EXIT_OK
    return mugs


class TestSynth:
    def test_outputs(self, mugs):
        truth = json.loads((mugs / "truth.json").read_text())
        jsonschema.validate(truth, sgio.load_schema("truth"))
        assert len(truth["affordances"]) == 3
        cloud = sgio.read_pcd(mugs / "mugs.pcd")
        assert cloud.is_organized and cloud.organized.width == 640
        assert truth["n_points"] == len(cloud)
        assert truth["pcd_sha256"] == sgio.file_sha256(mugs / "mugs.pcd")

    def test_noiseless_plane_has_constant_depth(self, tmp_path):
        spec = tmp_path / "plane.scene"
        spec.write_text("[scene]\nnoise = 0\n[plane wall]\ncenter = 0 0 1.5\nsize = 4 4\n")
        assert main(["synth", "--scene", str(spec), "-o", str(tmp_path / "p.pcd")]) == EXIT_OK
        P = sgio.read_pcd(tmp_path / "p.pcd").points
        assert len(P) == 640 * 480 and np.all(P[:, 2] == 1.5)

    def test_clutter_size(self, tmp_path):
        assert main(["synth", "--fixture", "clutter", "-o", str(tmp_path / "c.pcd")]) == EXIT_OK
        assert 100_000 <= len(sgio.read_pcd(tmp_path / "c.pcd")) <= 300_000

    def test_seed_changes_noise(self, tmp_path):
        for s in (1, 2):
            main(["synth", "--fixture", "jug", "--seed", str(s), "-o", str(tmp_path / f"{s}.pcd")])
        assert (tmp_path / "1.pcd").read_bytes() != (tmp_path / "2.pcd").read_bytes()

    @pytest.mark.parametrize("text", ["[cylinder c]\ncenter = 0 0 1\n", "garbage", "[scene]\n"])
    def test_malformed_scene(self, tmp_path, text, capsys):
        spec = tmp_path / "bad.scene"
        spec.write_text(text)
        assert main(["synth", "--scene", str(spec), "-o", str(tmp_path / "x.pcd")]) == EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_missing_scene_and_fixture(self, tmp_path):
        out = str(tmp_path / "x.pcd")
        assert main(["synth", "--scene", str(tmp_path / "none.scene"), "-o", out]) == EXIT_CONFIG
        assert main(["synth", "--fixture", "nope", "-o", out]) == EXIT_CONFIG


class TestDetect:
    def test_one_detection_per_handle(self, mugs_detected):
        doc = json.loads((mugs_detected / "dets.json").read_text())
        jsonschema.validate(doc, sgio.load_schema("detections"))
        assert "timing" not in doc
        assert main(["eval", "--detections", str(mugs_detected / "dets.json"),
                     "--truth", str(mugs_detected / "truth.json"),
                     "-o", str(mugs_detected / "report.json")]) == EXIT_OK
        rep = json.loads((mugs_detected / "report.json").read_text())
        jsonschema.validate(rep, sgio.load_schema("report"))
        assert len(rep["hit_counts"]) == 3 and min(rep["hit_counts"].values()) >= 1
        assert rep["recall"] == 1.0

    def test_byte_identical_reruns(self, mugs, tmp_path):
        args = ["detect", "-i", str(mugs / "mugs.pcd"), "--samples", "500", "--seed", "4",
                "--no-timing"]
        main(args + ["-o", str(tmp_path / "a.json")])
        main(args + ["-o", str(tmp_path / "b.json"), "--n-jobs", "2"])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_timing_field(self, mugs, tmp_path):
        main(["detect", "-i", str(mugs / "mugs.pcd"), "--samples", "100",
              "-o", str(tmp_path / "t.json")])
        doc = json.loads((tmp_path / "t.json").read_text())
        assert doc["timing"] and all(v >= 0 for v in doc["timing"].values())

    def test_variant_tag(self, mugs, tmp_path):
        assert main(["detect", "-i", str(mugs / "mugs.pcd"), "--samples", "600", "--variant",
                     "pca", "-o", str(tmp_path / "p.json")]) == EXIT_OK
        doc = json.loads((tmp_path / "p.json").read_text())
        assert doc["detections"] and {r["variant"] for r in doc["detections"]} == {"pca"}
        assert doc["params"]["variant"] == "pca"

    def test_flags_reach_config(self, mugs, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"capture-radius": 0.03, "samples": 50, "knn": 200}))
        main(["detect", "-i", str(mugs / "mugs.pcd"), "--config", str(conf), "--samples", "60",
              "--no-occlusion-filter", "-o", str(tmp_path / "o.json")])
        p = json.loads((tmp_path / "o.json").read_text())["params"]
        assert (p["capture_radius"], p["n_samples"], p["knn"], p["occlusion_filter"]) == \
            (0.03, 60, 200, False)

    def test_ply_out(self, mugs, tmp_path):
        assert main(["detect", "-i", str(mugs / "mugs.pcd"), "--samples", "300",
                     "-o", str(tmp_path / "o.json"), "--ply-out", str(tmp_path / "o.ply")]) == 0
        assert (tmp_path / "o.ply").read_text().startswith("ply\nformat ascii 1.0\n")

    def test_empty_pcd(self, tmp_path, capsys):
        p = tmp_path / "empty.pcd"
        p.write_text("VERSION 0.7\nFIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n"
                     "WIDTH 0\nHEIGHT 1\nPOINTS 0\nDATA ascii\n")
        assert main(["detect", "-i", str(p)]) == EXIT_INPUT
        assert "no valid points" in capsys.readouterr().err

    def test_bad_pcd_names_line(self, tmp_path, capsys):
        p = tmp_path / "bad.pcd"
        p.write_text("VERSION 0.7\nFIELDS x y z\nWIDTH 2\nPOINTS 2\nDATA ascii\n0 0 1\n0 1\n")
        assert main(["detect", "-i", str(p)]) == EXIT_INPUT
        assert "line 7" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert main(["detect", "-i", str(tmp_path / "none.pcd")]) == EXIT_INPUT

    @pytest.mark.parametrize("conf", ['{"capture_radius": -1}', '{"colour": 1}', "[1]", "{oops"])
    def test_bad_config_file(self, mugs, tmp_path, conf):
        c = tmp_path / "c.json"
        c.write_text(conf)
        assert main(["detect", "-i", str(mugs / "mugs.pcd"), "--config", str(c)]) == EXIT_CONFIG

    @pytest.mark.parametrize("flags", [["--samples", "0"], ["--finger-thickness", "0"],
                                       ["--variant", "ransac"], ["--knn", "5", "--radius", "1"],
                                       ["--samples", "many"]])
    def test_bad_flags(self, mugs, flags):
        assert main(["detect", "-i", str(mugs / "mugs.pcd")] + flags) == EXIT_CONFIG

    def test_params_round_trip(self):
        cfg = DetectorConfig(n_samples=123, variant=Variant.NORMALS, seed=9)
        assert config_params(config_from_params(config_params(cfg))) == config_params(cfg)


class TestEval:
    def test_multi_run_report(self, mugs, tmp_path):
        dets = tmp_path / "d.json"
        main(["detect", "-i", str(mugs / "mugs.pcd"), "--samples", "800", "-o", str(dets)])
        assert main(["eval", "--detections", str(dets), "--truth", str(mugs / "truth.json"),
                     "--runs", "2", "-o", str(tmp_path / "r.json"),
                     "--csv", str(tmp_path / "r.csv")]) == EXIT_OK
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["n_runs"] == 2 and len({r["seed"] for r in rep["runs"]}) == 2
        rows = list(csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text())))
        assert len(rows) == 1
        assert {"precision_ci95", "recall_ci95"} <= set(rows[0])
        assert rep["tolerance"] == {"position": 0.01, "angle_deg": 20.0, "radius": 0.01}

    def test_perfect_detections(self, mugs, tmp_path):
        truth = json.loads((mugs / "truth.json").read_text())
        recs = []
        for i, a in enumerate(truth["affordances"]):
            pl = np.array(a["polyline"])
            mid = pl[len(pl) // 2]
            tangent = pl[len(pl) // 2 + 1] - pl[len(pl) // 2 - 1]
            recs.append({"centroid": mid.tolist(),
                         "axis": (tangent / np.linalg.norm(tangent)).tolist(),
                         "inner_radius": a["radius"], "thickness": 0.008, "extent": 0.01,
                         "support": 40, "max_gap_points": 0, "variant": "taubin",
                         "ordinal": i, "seed_index": 0})
        doc = {"format": "shellgrasp/detections", "version": 1, "source": {},
               "params": {}, "detections": recs}
        (tmp_path / "d.json").write_text(json.dumps(doc))
        main(["eval", "--detections", str(tmp_path / "d.json"), "--truth",
              str(mugs / "truth.json"), "-o", str(tmp_path / "r.json")])
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["precision"] == 1.0 and rep["recall"] == 1.0

    def test_mismatched_truth(self, mugs_detected, tmp_path, capsys):
        main(["synth", "--fixture", "jug", "-o", str(tmp_path / "j.pcd"),
              "--truth", str(tmp_path / "jt.json")])
        assert main(["eval", "--detections", str(mugs_detected / "dets.json"),
                     "--truth", str(tmp_path / "jt.json")]) == EXIT_CONFIG
        assert "different cloud" in capsys.readouterr().err

    def test_wrong_document_kind(self, mugs):
        assert main(["eval", "--detections", str(mugs / "truth.json"),
                     "--truth", str(mugs / "truth.json")]) == EXIT_INPUT


class TestBench:
    def test_csv(self, mugs, tmp_path):
        assert main(["bench", "-i", str(mugs / "mugs.pcd"), "--variants", "pca,taubin",
                     "--sample-grid", "50,100", "--runs", "2", "-o", str(tmp_path / "b.csv"),
                     "--json", str(tmp_path / "b.json")]) == EXIT_OK
        rows = list(csv.DictReader(io.StringIO((tmp_path / "b.csv").read_text())))
        assert [(r["variant"], r["n_samples"]) for r in rows] == \
            [("taubin", "50"), ("taubin", "100"), ("pca", "50"), ("pca", "100")]
        assert all(float(r["mean_seconds"]) > 0 and r["runs"] == "2" for r in rows)
        assert "taubin_linearity" in json.loads((tmp_path / "b.json").read_text())

    @pytest.mark.parametrize("grid", [["--sample-grid", "0"], ["--variants", "ransac"],
                                      ["--runs", "0"], ["--sample-grid", "a,b"]])
    def test_bad_grid(self, mugs, grid):
        assert main(["bench", "-i", str(mugs / "mugs.pcd")] + grid) == EXIT_CONFIG


def test_usage_errors():
    assert main([]) == EXIT_CONFIG
    assert main(["detect"]) == EXIT_CONFIG
    assert main(["--version"]) == EXIT_OK
