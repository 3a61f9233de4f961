"""Command-line interface: subcommand behavior and exit codes."""

import csv
import datetime
import json
import os

import numpy as np
import pytest

from panicle.cli import main
from panicle.grid import RasterGrid, read_pdm1, sum_pool, write_pdm1
from panicle.instseg import load_segmentation
from panicle.isotonic import load_count_csv
from panicle.slic import load_superpixels
from panicle.synth import load_owner, synthetic_weather
from panicle.thermal import compute_gdd, save_weather_csv

CONFIG_TEXT = """\
[synth]
width = 32
height = 32
min_blobs = 2
max_blobs = 4
min_radius = 3.0
max_radius = 5.0

[train]
width_scale = 0.05
epochs = 1
batch_size = 2
"""

TRAIN_FLAGS = ["--width-scale", "0.05", "--epochs", "1", "--batch-size", "2"]


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(CONFIG_TEXT)
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, config_file):
    root = str(tmp_path_factory.mktemp("data"))
    code = main(
        ["--config", config_file, "synth", "--out", root, "--seed", "7", "--n-train", "4", "--n-test", "4"]
    )
    assert code == 0
    with open(os.path.join(root, "meta.json")) as fh:
        return root, json.load(fh)


@pytest.fixture(scope="module")
def models(tmp_path_factory, dataset):
    root, _ = dataset
    out = tmp_path_factory.mktemp("models")
    detect = str(out / "detect.pcnn")
    count = str(out / "count.pcnn")
    assert main(["train-detect", "--data", root, "--out", detect, *TRAIN_FLAGS]) == 0
    assert main(["train-count", "--data", root, "--out", count, *TRAIN_FLAGS]) == 0
    return detect, count


class TestUsageErrors:
    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["slic", "--image", "x.png"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "usage" in capsys.readouterr().out


class TestGdd:
    @pytest.fixture()
    def weather_csv(self, tmp_path):
        weather = synthetic_weather(1, datetime.date(2021, 5, 15), 40)
        path = tmp_path / "weather.csv"
        save_weather_csv(path, weather)
        return str(path), weather

    def test_prints_accumulated_value(self, weather_csv, capsys, tmp_path):
        path, weather = weather_csv
        out = tmp_path / "gdd.json"
        code = main(
            ["gdd", "--weather", path, "--planting", "2021-05-15", "--date", "2021-06-01", "--out", str(out)]
        )
        assert code == 0
        printed = float(capsys.readouterr().out.strip())
        expected = compute_gdd(weather, datetime.date(2021, 5, 15), datetime.date(2021, 6, 1)).gdd
        assert printed == pytest.approx(expected, abs=0.01)
        with open(out) as fh:
            doc = json.load(fh)
        assert doc["gdd"] == pytest.approx(expected, abs=0.01)

    def test_missing_weather_file(self, tmp_path):
        assert main(["gdd", "--weather", str(tmp_path / "nope.csv"), "--planting", "2021-05-15", "--date", "2021-06-01"]) == 2

    def test_date_outside_table(self, weather_csv):
        path, _ = weather_csv
        assert main(["gdd", "--weather", path, "--planting", "2021-05-15", "--date", "2022-01-01"]) == 2


class TestSlicAndDensity:
    def test_slic_writes_map(self, dataset, tmp_path, capsys):
        root, meta = dataset
        image = os.path.join(root, "images", meta["images"][0]["id"] + ".png")
        out = str(tmp_path / "sp.pdm1")
        assert main(["slic", "--image", image, "--level", "small", "--out", out]) == 0
        spmap = load_superpixels(out)
        assert spmap.labels.shape == (32, 32)
        assert str(spmap.n_superpixels) in capsys.readouterr().out

    def test_dot_density_sums_to_count(self, dataset, tmp_path):
        root, meta = dataset
        entry = meta["images"][0]
        image = os.path.join(root, "images", entry["id"] + ".png")
        ann = os.path.join(root, "ann_dot", entry["id"] + ".json")
        out = str(tmp_path / "dot.pdm1")
        assert main(["density", "--ann", ann, "--image", image, "--mode", "dot", "--out", out]) == 0
        grid = read_pdm1(out)
        assert grid.total == pytest.approx(entry["count"], abs=1e-6)

    def test_region_mode_requires_superpixels(self, dataset, tmp_path):
        root, meta = dataset
        entry = meta["images"][0]
        image = os.path.join(root, "images", entry["id"] + ".png")
        ann = os.path.join(root, "ann_dot", entry["id"] + ".json")
        code = main(["density", "--ann", ann, "--image", image, "--mode", "region", "--out", str(tmp_path / "x.pdm1")])
        assert code == 1


class TestTrainPredict:
    def test_checkpoints_written(self, models):
        detect, count = models
        assert os.path.getsize(detect) > 0
        assert os.path.getsize(count) > 0

    def test_predict_prints_count(self, dataset, models, tmp_path, capsys):
        root, meta = dataset
        _, count_model = models
        entry = meta["images"][-1]
        image = os.path.join(root, "images", entry["id"] + ".png")
        out_map = str(tmp_path / "pred.pdm1")
        code = main(
            ["predict", "--model", count_model, "--image", image, "--gdd", str(entry["gdd"]), "--out-map", out_map]
        )
        assert code == 0
        assert np.isfinite(float(capsys.readouterr().out.strip()))
        pred = read_pdm1(out_map)
        assert (pred.height, pred.width) == (8, 8)

    def test_predict_without_required_gdd(self, dataset, models):
        root, meta = dataset
        _, count_model = models
        image = os.path.join(root, "images", meta["images"][0]["id"] + ".png")
        assert main(["predict", "--model", count_model, "--image", image]) == 1

    def test_predict_tta_none(self, dataset, models, capsys):
        root, meta = dataset
        _, count_model = models
        entry = meta["images"][0]
        image = os.path.join(root, "images", entry["id"] + ".png")
        code = main(
            ["predict", "--model", count_model, "--image", image, "--gdd", str(entry["gdd"]), "--tta", "none"]
        )
        assert code == 0
        assert np.isfinite(float(capsys.readouterr().out.strip()))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_training_exit_code(self, dataset, tmp_path):
        root, _ = dataset
        code = main(
            ["train-count", "--data", root, "--out", str(tmp_path / "bad.pcnn"),
             "--width-scale", "0.05", "--batch-size", "2", "--epochs", "10", "--lr", "1e18"]
        )
        assert code == 3


class TestIsotonicCli:
    def test_corrects_each_segment(self, tmp_path):
        src = tmp_path / "raw.csv"
        with open(src, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["segment_id", "gdd", "raw_count", "isotonic_count"])
            for row in (
                ("a", 100, 3.0), ("a", 200, 1.0), ("a", 300, 2.0),
                ("b", 100, 1.0), ("b", 200, 5.0),
            ):
                writer.writerow([row[0], row[1], f"{row[2]:.6f}", ""])
        out = tmp_path / "fit.csv"
        assert main(["isotonic", "--counts", str(src), "--out", str(out)]) == 0
        series = {s.segment_id: s for s in load_count_csv(out)}
        assert set(series) == {"a", "b"}
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fitted = {}
        for row in rows:
            fitted.setdefault(row["segment_id"], []).append(float(row["isotonic_count"]))
        assert fitted["a"] == pytest.approx([2.0, 2.0, 2.0])
        assert fitted["b"] == pytest.approx([1.0, 5.0])


class TestEvalCount:
    def write_csv(self, path, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "count"])
            writer.writerows(rows)

    def test_reports_mae_and_r2(self, tmp_path, capsys):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        self.write_csv(pred, [("a", 3), ("b", 5)])
        self.write_csv(truth, [("a", 1), ("b", 5)])
        out = tmp_path / "eval.json"
        assert main(["eval-count", "--pred", str(pred), "--truth", str(truth), "--out", str(out)]) == 0
        assert "mae=1.0000" in capsys.readouterr().out
        with open(out) as fh:
            assert json.load(fh)["mae"] == pytest.approx(1.0)

    def test_degenerate_truths(self, tmp_path):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        self.write_csv(pred, [("a", 3), ("b", 5)])
        self.write_csv(truth, [("a", 4), ("b", 4)])
        assert main(["eval-count", "--pred", str(pred), "--truth", str(truth)]) == 2

    def test_disjoint_ids(self, tmp_path):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        self.write_csv(pred, [("a", 3)])
        self.write_csv(truth, [("b", 4)])
        assert main(["eval-count", "--pred", str(pred), "--truth", str(truth)]) == 1


class TestSegmentCli:
    def test_segments_from_maps(self, dataset, tmp_path, capsys):
        root, meta = dataset
        entry = meta["images"][0]
        image = os.path.join(root, "images", entry["id"] + ".png")
        owner = load_owner(os.path.join(root, "owner", entry["id"] + ".pdm1"))
        sp_path = str(tmp_path / "sp.pdm1")
        assert main(["slic", "--image", image, "--out", sp_path]) == 0

        detection = RasterGrid.from_array((owner >= 0).astype(np.float64))
        density = RasterGrid(detection.data / max(detection.total / entry["count"], 1e-9))
        det_path = str(tmp_path / "det.pdm1")
        dens_path = str(tmp_path / "dens.pdm1")
        write_pdm1(det_path, detection)
        write_pdm1(dens_path, density)
        out = str(tmp_path / "seg.json")
        code = main(
            ["segment", "--image", image, "--superpixels", sp_path,
             "--detection", det_path, "--density", dens_path, "--out", out]
        )
        assert code == 0
        doc, assignment = load_segmentation(out)
        assert doc["image"] == entry["id"]
        assert assignment.n_clusters >= 1
        assert f"{assignment.n_clusters} instances" in capsys.readouterr().out

    def test_accepts_pooled_maps(self, dataset, tmp_path):
        root, meta = dataset
        entry = meta["images"][1]
        image = os.path.join(root, "images", entry["id"] + ".png")
        owner = load_owner(os.path.join(root, "owner", entry["id"] + ".pdm1"))
        sp_path = str(tmp_path / "sp.pdm1")
        assert main(["slic", "--image", image, "--out", sp_path]) == 0

        detection = RasterGrid.from_array((owner >= 0).astype(np.float64))
        density = RasterGrid(detection.data / max(detection.total / entry["count"], 1e-9))
        det_pool = RasterGrid(sum_pool(detection, 4).data / 16.0)  # mean-pooled probabilities
        dens_pool = sum_pool(density, 4)
        det_path = str(tmp_path / "det8.pdm1")
        dens_path = str(tmp_path / "dens8.pdm1")
        write_pdm1(det_path, det_pool)
        write_pdm1(dens_path, dens_pool)
        out = str(tmp_path / "seg.json")
        code = main(
            ["segment", "--image", image, "--superpixels", sp_path,
             "--detection", det_path, "--density", dens_path, "--out", out]
        )
        assert code == 0
        _, assignment = load_segmentation(out)
        assert assignment.n_clusters >= 1


class TestRunPipeline:
    def test_end_to_end_artifacts(self, config_file, tmp_path, capsys):
        out = str(tmp_path / "run")
        code = main(
            ["--config", config_file, "run", "--out", out, "--seed", "7", "--n-train", "4", "--n-test", "4"]
        )
        assert code == 0
        with open(os.path.join(out, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert set(manifest["artifacts"]) == {"data", "detect", "count", "pred", "isotonic", "eval"}
        assert len(manifest["config_hash"]) == 64
        with open(manifest["artifacts"]["pred"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        with open(manifest["artifacts"]["eval"]) as fh:
            summary = json.load(fh)
        assert np.isfinite(summary["mae"])
        series = load_count_csv(manifest["artifacts"]["isotonic"])
        assert series
        out_text = capsys.readouterr().out
        assert "test mae" in out_text
