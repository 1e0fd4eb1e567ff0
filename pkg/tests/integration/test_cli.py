"""
End-to-end tests of the hrapr command line.

A small synthetic scene is generated once per module through `hrapr synth`
and the other commands run against its files.
"""

import json

import pytest

from hrapr.cli import EXIT_OK, EXIT_USAGE, main
from hrapr.feature_store import load_db
from hrapr.replay import load_queries, save_queries
from hrapr.uncertainty import SCORED_CSV_HEADER, GatingPolicy, score_batch, scored_csv_rows
from utils.logger import setup_logging
from utils.report_writer import format_csv

SMALL_SCENE = ["--set", "dim=64", "--set", "num_train=200", "--set", "num_test_near=20", "--set", "num_test_far=20"]
SCENE_FILES = ("poses", "feat", "queries", "qfeat", "json")


def synth(stem, seed=42):
    return main(["--preset", "indoor", "synth", "--seed", str(seed), "--out-stem", str(stem)] + SMALL_SCENE)


@pytest.fixture(autouse=True)
def reset_logging():
    """Rebind the console handler once capsys streams are closed"""
    yield
    setup_logging("WARNING")


@pytest.fixture(scope="module")
def scene_stem(tmp_path_factory):
    """Stem of a small exported scene"""
    stem = tmp_path_factory.mktemp("cli") / "scene"
    assert synth(stem) == EXIT_OK
    return stem


class TestSynthCommand:
    """hrapr synth"""

    @pytest.mark.smoke
    @pytest.mark.integration
    def test_same_seed_same_bytes(self, tmp_path):
        """Two runs with one seed write identical files"""
        assert synth(tmp_path / "a" / "scene") == EXIT_OK
        assert synth(tmp_path / "b" / "scene") == EXIT_OK
        for ext in SCENE_FILES:
            a = (tmp_path / "a" / f"scene.{ext}").read_bytes()
            b = (tmp_path / "b" / f"scene.{ext}").read_bytes()
            assert a == b, f"scene.{ext} differs between runs"

    @pytest.mark.integration
    def test_manifest_records_indoor_radius(self, scene_stem):
        """The indoor preset records its 0.2 m radius"""
        manifest = json.loads(scene_stem.with_suffix(".json").read_text())
        assert manifest["run"]["d_th"] == 0.2
        assert manifest["scene"]["dim"] == 64
        assert manifest["files"]["poses"] == "scene.poses"

    @pytest.mark.integration
    def test_prints_error_gap(self, tmp_path, capsys):
        """The far/near gap is reported"""
        assert synth(tmp_path / "scene", seed=7) == EXIT_OK
        out = capsys.readouterr().out
        assert "far/near gap" in out, f"No gap line in output:\n{out}"

    @pytest.mark.integration
    def test_bad_override(self, tmp_path):
        """A --set without '=' is a usage error"""
        argv = ["synth", "--out-stem", str(tmp_path / "scene"), "--set", "dim64"]
        assert main(argv) == EXIT_USAGE


class TestBuildDbCommand:
    """hrapr build-db"""

    @pytest.mark.integration
    def test_rebuild_is_identical(self, scene_stem, tmp_path):
        """Rebuilding from the exported pair writes the same bytes"""
        out = tmp_path / "db"
        argv = ["build-db", "--poses", f"{scene_stem}.poses", "--feat", f"{scene_stem}.feat", "--out", str(out)]
        assert main(argv) == EXIT_OK
        assert (tmp_path / "db.poses").read_bytes() == scene_stem.with_suffix(".poses").read_bytes()
        assert (tmp_path / "db.feat").read_bytes() == scene_stem.with_suffix(".feat").read_bytes()

    @pytest.mark.integration
    def test_missing_input(self, tmp_path):
        """A missing poses file exits with 2"""
        argv = ["build-db", "--poses", str(tmp_path / "none.poses"), "--feat", str(tmp_path / "none.feat"),
                "--out", str(tmp_path / "db")]
        assert main(argv) == EXIT_USAGE


class TestScoreCommand:
    """hrapr score"""

    @pytest.mark.smoke
    @pytest.mark.integration
    def test_matches_library(self, scene_stem, tmp_path):
        """The CLI CSV equals score_batch on the same files"""
        out = tmp_path / "scored.csv"
        argv = ["--preset", "indoor", "score", "--db", str(scene_stem), "--queries", str(scene_stem),
                "--out", str(out), "--dth", "0.2"]
        assert main(argv) == EXIT_OK
        scored = score_batch(load_db(scene_stem), load_queries(scene_stem), GatingPolicy(), 0.2)
        expected = format_csv(SCORED_CSV_HEADER, scored_csv_rows(scored))
        assert out.read_text() == expected

    @pytest.mark.integration
    def test_zero_radius(self, scene_stem, tmp_path):
        """d_th 0 retrieves nothing, so every query gets the ls budget"""
        out = tmp_path / "scored.csv"
        argv = ["--preset", "indoor", "score", "--db", str(scene_stem), "--queries", str(scene_stem),
                "--out", str(out), "--dth", "0"]
        assert main(argv) == EXIT_OK
        rows = out.read_text().splitlines()[1:]
        assert len(rows) == 40
        for row in rows:
            assert row.split(",", 1)[1] == "0.000000,0,0,50,", f"Unexpected row {row}"

    @pytest.mark.integration
    def test_invalid_policy(self, scene_stem, tmp_path):
        """hs above ls in refine mode is a configuration error"""
        argv = ["score", "--db", str(scene_stem), "--queries", str(scene_stem), "--out", str(tmp_path / "s.csv"),
                "--policy", "hs60_ls50"]
        assert main(argv) == EXIT_USAGE


class TestSweepCommand:
    """hrapr sweep"""

    @pytest.mark.integration
    def test_writes_one_row_per_threshold(self, scene_stem, tmp_path):
        """Grid points become CSV rows; the first is the normalization anchor"""
        out = tmp_path / "sweep.csv"
        argv = ["sweep", "--db", str(scene_stem), "--queries", str(scene_stem), "--grid", "0,0.5,0.9", "--out", str(out)]
        assert main(argv) == EXIT_OK
        lines = out.read_text().splitlines()
        assert len(lines) == 4
        assert lines[1].startswith("0.0000,")
        assert lines[1].endswith(",1.000000,1.000000")

    @pytest.mark.integration
    def test_requires_ground_truth(self, scene_stem, tmp_path):
        """Queries without gt are a usage error"""
        stripped = [q._replace(gt=None) for q in load_queries(scene_stem)]
        save_queries(tmp_path / "nogt", stripped)
        argv = ["sweep", "--db", str(scene_stem), "--queries", str(tmp_path / "nogt"), "--out", str(tmp_path / "s.csv")]
        assert main(argv) == EXIT_USAGE


class TestRefineCommand:
    """hrapr refine"""

    @pytest.mark.integration
    def test_uniform_policy_has_no_reduction(self, scene_stem, tmp_path, capsys):
        """hs = ls spends the uniform budget"""
        out = tmp_path / "refined"
        argv = ["--preset", "indoor", "refine", "--db", str(scene_stem), "--queries", str(scene_stem),
                "--scene", f"{scene_stem}.json", "--out", str(out), "--policy", "hs50_ls50"]
        assert main(argv) == EXIT_OK
        stdout = capsys.readouterr().out
        assert "avg_steps 50.00" in stdout
        assert "reduction 0.0%" in stdout
        assert len(list((out / "traces").glob("*.csv"))) == 40

    @pytest.mark.integration
    def test_zero_budget_keeps_predictions(self, scene_stem, tmp_path):
        """With no steps the post errors equal the pre errors"""
        out = tmp_path / "refined"
        argv = ["refine", "--db", str(scene_stem), "--queries", str(scene_stem), "--scene", f"{scene_stem}.json",
                "--out", str(out), "--policy", "hs0_ls0"]
        assert main(argv) == EXIT_OK
        rows = [line.split(",") for line in (out / "summary.csv").read_text().splitlines()[1:]]
        assert len(rows) == 40
        for row in rows:
            assert row[3] == "0"
            assert row[4:6] == row[6:8], f"Query {row[0]} moved without steps"

    @pytest.mark.integration
    def test_filter_mode_rejected(self, scene_stem, tmp_path):
        """Refinement needs refine mode"""
        argv = ["refine", "--db", str(scene_stem), "--queries", str(scene_stem), "--scene", f"{scene_stem}.json",
                "--out", str(tmp_path / "r"), "--mode", "filter"]
        assert main(argv) == EXIT_USAGE

    @pytest.mark.integration
    def test_missing_manifest(self, scene_stem, tmp_path):
        """An unreadable manifest is a usage error"""
        argv = ["refine", "--db", str(scene_stem), "--queries", str(scene_stem), "--scene", str(tmp_path / "x.json"),
                "--out", str(tmp_path / "r")]
        assert main(argv) == EXIT_USAGE


class TestEvaluateCommand:
    """hrapr evaluate"""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_full_report(self, scene_stem, tmp_path, capsys):
        """With a scene manifest all five reports are written"""
        out = tmp_path / "report"
        argv = ["evaluate", "--db", str(scene_stem), "--queries", str(scene_stem), "--out-dir", str(out),
                "--scene", f"{scene_stem}.json", "--early-stop"]
        assert main(argv) == EXIT_OK
        for name in ("scored.csv", "sweep.csv", "summary.txt", "convergence.csv", "refine_summary.csv"):
            assert (out / name).exists(), f"{name} was not written"
        summary = (out / "summary.txt").read_text()
        assert "spearman(score, terr)" in summary
        assert summary in capsys.readouterr().out

    @pytest.mark.integration
    def test_without_scene(self, scene_stem, tmp_path):
        """Without a manifest no refinement reports are written"""
        out = tmp_path / "report"
        argv = ["evaluate", "--db", str(scene_stem), "--queries", str(scene_stem), "--out-dir", str(out)]
        assert main(argv) == EXIT_OK
        assert (out / "summary.txt").exists()
        assert not (out / "convergence.csv").exists()
        leftovers = [p.name for p in out.iterdir() if p.name.endswith(".tmp")]
        assert not leftovers, f"Temporary files left behind: {leftovers}"

    @pytest.mark.regression
    @pytest.mark.integration
    def test_single_query(self, scene_stem, tmp_path):
        """One query has no rank correlation; the report says nan instead of failing"""
        save_queries(tmp_path / "one", load_queries(scene_stem)[:1])
        out = tmp_path / "report"
        argv = ["evaluate", "--db", str(scene_stem), "--queries", str(tmp_path / "one"), "--out-dir", str(out)]
        assert main(argv) == EXIT_OK
        summary = (out / "summary.txt").read_text()
        assert "spearman(score, terr) = nan" in summary, f"Unexpected summary:\n{summary}"


class TestBenchCommand:
    """hrapr bench"""

    @pytest.mark.integration
    def test_reports_storage(self, scene_stem, capsys):
        """Storage per entry is dim x 4 bytes"""
        argv = ["bench", "--db", str(scene_stem), "--queries", str(scene_stem), "--repetitions", "20"]
        assert main(argv) == EXIT_OK
        assert "embedding storage 256 bytes per entry" in capsys.readouterr().out


class TestUsage:
    """Argument errors"""

    @pytest.mark.smoke
    @pytest.mark.integration
    def test_no_arguments(self):
        """A missing subcommand exits with 2"""
        assert main([]) == EXIT_USAGE

    @pytest.mark.integration
    def test_help(self):
        """--help exits with 0"""
        assert main(["--help"]) == EXIT_OK

    @pytest.mark.integration
    def test_unknown_preset(self, tmp_path):
        """argparse rejects unknown presets"""
        assert main(["--preset", "lunar", "synth", "--out-stem", str(tmp_path / "s")]) == EXIT_USAGE
