"""Tests for the skinseg command line."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from skinseg.cli import EXIT_INTERNAL_ERROR, EXIT_OK, EXIT_USER_ERROR, main, run
from skinseg.coordinator import MAIN_ENSEMBLE
from skinseg.ensemble import PRESETS
from skinseg.evaluation import read_report
from skinseg.imgio import BinaryMask, Image, read_image, read_mask, write_image, write_mask
from skinseg.skinny import save_weights

DESK_FLAGS = ["--samples", "12", "--size", "32", "--epochs", "1", "--arch", "levels=2,base=2"]


@pytest.fixture
def dataset(tmp_path) -> Path:
    """Generate a small dataset on disk and return its manifest."""
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--samples", "6", "--size", "32"]) == 0
    return tmp_path / "data" / "manifest.json"


@pytest.fixture
def mask_dirs(tmp_path, rng) -> tuple[Path, Path]:
    """Write matching prediction and truth directories."""
    preds, truths = tmp_path / "preds", tmp_path / "truths"
    preds.mkdir()
    truths.mkdir()
    for index in range(5):
        mask = BinaryMask(rng.uniform(size=(8, 8)) > 0.5)
        write_mask(preds / f"img-{index}.pgm", mask)
        write_mask(truths / f"img-{index}.pgm", mask)
    return preds, truths


class TestUsage:
    """Test argument handling and exit codes."""

    def test_unknown_subcommand(self, capsys):
        """Test a bad subcommand exits 1 with usage on stderr."""
        # Act
        code = main(["no-such-command"])

        # Assert
        err = capsys.readouterr().err
        assert code == EXIT_USER_ERROR
        assert "usage:" in err
        assert "skinseg: usage error:" in err

    def test_version(self, capsys):
        """Test --version prints and exits 0."""
        assert main(["--version"]) == EXIT_OK
        assert "skinseg" in capsys.readouterr().out

    def test_run_entry_point(self, dataset, tmp_path, capsys):
        """Test run executes a subcommand and reports the same exit codes as main."""
        # Act
        ok = run(["split", "--manifest", str(dataset), "--out", str(tmp_path / "split.json")])
        bad = run(["no-such-command"])

        # Assert
        assert ok == EXIT_OK
        assert (tmp_path / "split.json").is_file()
        assert bad == EXIT_USER_ERROR
        assert "skinseg: usage error:" in capsys.readouterr().err

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        """Test a missing input maps to exit 1 with one diagnostic line."""
        # Act
        code = main(["infer", "--model", str(tmp_path / "none.sknw"), "--in", "x.ppm", "--out", "y.pgm"])

        # Assert
        err = capsys.readouterr().err.strip().splitlines()
        assert code == EXIT_USER_ERROR
        assert err[-1].startswith("skinseg: I/O error:")

    def test_corrupt_image_is_parse_error(self, tmp_path, capsys):
        """Test an unreadable image maps to a parse error."""
        # Arrange
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P5 4 4 255\n\x00")

        # Act
        code = main(["overlay", "--in", str(bad), "--pred", str(bad), "--truth", str(bad), "--out", str(tmp_path / "o.ppm")])

        # Assert
        assert code == EXIT_USER_ERROR
        assert "skinseg: parse error:" in capsys.readouterr().err

    def test_unexpected_error_is_internal(self, monkeypatch, capsys):
        """Test bugs map to exit 2."""
        # Arrange
        def broken(_args):
            raise KeyError("boom")

        monkeypatch.setattr("skinseg.cli._cmd_split", broken)

        # Act
        code = main(["split", "--manifest", "m.json", "--out", "s.json"])

        # Assert
        assert code == EXIT_INTERNAL_ERROR
        assert "skinseg: internal error:" in capsys.readouterr().err


class TestDataCommands:
    """Test dataset and color classifier commands."""

    def test_split(self, dataset, tmp_path):
        """Test the split covers every sample."""
        # Act
        code = main(["split", "--manifest", str(dataset), "--out", str(tmp_path / "split.json")])

        # Assert
        split = json.loads((tmp_path / "split.json").read_text(encoding="utf-8"))
        assert code == EXIT_OK
        assert len(split["train"]) + len(split["validation"]) + len(split["test"]) == 6

    def test_bc_train_and_infer(self, dataset, tmp_path):
        """Test fitting histograms and classifying an image."""
        # Arrange
        hist = tmp_path / "bc.bch"
        image = next((dataset.parent / "images").iterdir())

        # Act
        fit = main(["train-bc", "--manifest", str(dataset), "--bins", "8", "--out", str(hist)])
        run = main(["bc-infer", "--hist", str(hist), "--in", str(image), "--out", str(tmp_path / "p.pgm"), "--binary", "0.5"])

        # Assert
        assert (fit, run) == (EXIT_OK, EXIT_OK)
        assert read_mask(tmp_path / "p.pgm").shape == read_image(image).shape

    def test_invalid_priors(self, dataset, tmp_path):
        """Test priors that do not sum to one are a contract violation."""
        # Arrange
        hist = tmp_path / "bc.bch"
        main(["train-bc", "--manifest", str(dataset), "--bins", "8", "--out", str(hist)])
        image = next((dataset.parent / "images").iterdir())

        # Act
        code = main(["bc-infer", "--hist", str(hist), "--in", str(image), "--priors", "0.5", "0.6", "--out", str(tmp_path / "p.pgm")])

        # Assert
        assert code == EXIT_USER_ERROR


class TestModelCommands:
    """Test training and inference commands."""

    def test_train_and_infer(self, dataset, tmp_path):
        """Test a grayscale network trains, saves and runs."""
        # Arrange
        split = tmp_path / "split.json"
        main(["split", "--manifest", str(dataset), "--out", str(split), "--fractions", "0.5", "0.25", "0.25"])
        model = tmp_path / "gs.sknw"
        image = next((dataset.parent / "images").iterdir())

        # Act
        trained = main(
            ["train-skinny", "--manifest", str(dataset), "--split", str(split), "--channels", "gs",
             "--epochs", "1", "--arch", "levels=2,base=2", "--out", str(model), "--log", str(tmp_path / "log.json")]
        )
        ran = main(["infer", "--model", str(model), "--in", str(image), "--out", str(tmp_path / "p.pgm")])

        # Assert
        assert (trained, ran) == (EXIT_OK, EXIT_OK)
        record = json.loads((tmp_path / "log.json").read_text(encoding="utf-8"))
        assert len(record["train_loss"]) == 1
        assert read_image(tmp_path / "p.pgm").channels == 1

    def test_vote_threshold_override(self, tiny_weights, rgb_image, tmp_path):
        """Test --threshold replaces the spec's vote threshold."""
        # Arrange
        save_weights(tiny_weights, tmp_path / "m.sknw")
        spec = {"scheme": "vote", "sources": [{"kind": "model", "model": "m.sknw"}] * 3}
        (tmp_path / "vote.json").write_text(json.dumps(spec), encoding="utf-8")
        write_image(tmp_path / "img.ppm", rgb_image)

        # Act
        code = main(
            ["ensemble-infer", "--spec", str(tmp_path / "vote.json"), "--in", str(tmp_path / "img.ppm"),
             "--threshold", "0", "--out", str(tmp_path / "v.pgm")]
        )

        # Assert
        assert code == EXIT_OK
        assert read_mask(tmp_path / "v.pgm").bits.all()

    def test_branch_needs_histograms(self, dataset, tmp_path):
        """Test stratified training without --bc is refused."""
        # Arrange
        split = tmp_path / "split.json"
        main(["split", "--manifest", str(dataset), "--out", str(split), "--fractions", "0.5", "0.25", "0.25"])

        # Act
        code = main(
            ["train-skinny", "--manifest", str(dataset), "--split", str(split), "--branch", "skin",
             "--epochs", "1", "--out", str(tmp_path / "m.sknw")]
        )

        # Assert
        assert code == EXIT_USER_ERROR


class TestEvaluationCommands:
    """Test scoring commands."""

    def test_perfect_predictions(self, mask_dirs, tmp_path):
        """Test maps equal to the truth score F = 1."""
        # Arrange
        preds, truths = mask_dirs

        # Act
        code = main(
            ["evaluate", "--pred-dir", str(preds), "--truth-dir", str(truths), "--out", str(tmp_path / "r.json"),
             "--method", "oracle", "--table", str(tmp_path / "t.csv")]
        )

        # Assert
        report = read_report(tmp_path / "r.json")
        assert code == EXIT_OK
        assert report.f_score == 1.0
        assert report.method == "oracle"
        assert (tmp_path / "t.csv").read_text(encoding="utf-8").splitlines()[1].startswith("oracle,1.0000")

    def test_pr_curve(self, mask_dirs, tmp_path):
        """Test the curve file holds one point per step."""
        preds, truths = mask_dirs

        main(["pr-curve", "--pred-dir", str(preds), "--truth-dir", str(truths), "--out", str(tmp_path / "c.json"), "--steps", "11"])

        assert len(json.loads((tmp_path / "c.json").read_text(encoding="utf-8"))) == 11

    def test_wilcoxon_same_report(self, mask_dirs, tmp_path, capsys):
        """Test comparing a report with itself gives p = 1."""
        # Arrange
        preds, truths = mask_dirs
        report = tmp_path / "r.json"
        main(["evaluate", "--pred-dir", str(preds), "--truth-dir", str(truths), "--out", str(report)])
        capsys.readouterr()

        # Act
        code = main(["wilcoxon", "--a", str(report), "--b", str(report)])

        # Assert
        assert code == EXIT_OK
        assert json.loads(capsys.readouterr().out)["p_value"] == 1.0

    def test_overlay(self, mask_dirs, tmp_path):
        """Test an overlay is written as a color image."""
        # Arrange
        preds, truths = mask_dirs
        image = tmp_path / "img.ppm"
        write_image(image, Image(np.full((8, 8, 3), 0.5)))

        # Act
        code = main(
            ["overlay", "--in", str(image), "--pred", str(preds / "img-0.pgm"), "--truth", str(truths / "img-0.pgm"),
             "--out", str(tmp_path / "o.ppm")]
        )

        # Assert
        assert code == EXIT_OK
        assert read_image(tmp_path / "o.ppm").channels == 3


class TestReproduceDesk:
    """Test the end-to-end desk experiment."""

    def test_outputs(self, tmp_path):
        """Test the run writes models, reports, the table and significance results."""
        # Act
        code = main(["reproduce-desk", "--out", str(tmp_path / "run"), "--overlays", "1", *DESK_FLAGS])

        # Assert
        run = tmp_path / "run"
        assert code == EXIT_OK
        with (run / "results.csv").open(encoding="utf-8") as handle:
            methods = [row[0] for row in csv.reader(handle)][1:]
        assert methods[:5] == ["bc", "skinny-rgb", "skinny-gs", "skinny-skin", "skinny-nonskin"]
        assert set(methods[5:]) == {MAIN_ENSEMBLE, "vote_gs_skin_nonskin", "bc_select"}
        significance = json.loads((run / "significance.json").read_text(encoding="utf-8"))
        assert significance["reference"] == MAIN_ENSEMBLE
        assert "bc" in significance["tests"]
        assert (run / "models" / f"{MAIN_ENSEMBLE}.sknw").is_file()
        assert any((run / "overlays").iterdir())
        assert "cache_stats" in json.loads((run / "diagnostics.json").read_text(encoding="utf-8"))

    @pytest.mark.slow
    def test_all_stacks(self, tmp_path):
        """Test every stacking preset is trained and scored on request."""
        code = main(["reproduce-desk", "--out", str(tmp_path / "run"), "--all-stacks", *DESK_FLAGS])

        with (tmp_path / "run" / "results.csv").open(encoding="utf-8") as handle:
            methods = {row[0] for row in csv.reader(handle)}
        assert code == EXIT_OK
        assert set(PRESETS) <= methods

    @pytest.mark.slow
    def test_deterministic(self, tmp_path):
        """Test two runs with the same seed produce identical artifacts."""
        # Act
        for name in ("a", "b"):
            assert main(["reproduce-desk", "--out", str(tmp_path / name), *DESK_FLAGS]) == EXIT_OK

        # Assert
        first = {
            p.relative_to(tmp_path / "a"): p.read_bytes()
            for p in (tmp_path / "a").rglob("*")
            if p.is_file() and p.name != "diagnostics.json"
        }
        second = {
            p.relative_to(tmp_path / "b"): p.read_bytes()
            for p in (tmp_path / "b").rglob("*")
            if p.is_file() and p.name != "diagnostics.json"
        }
        assert first.keys() == second.keys()
        for path, data in first.items():
            assert data == second[path], path
