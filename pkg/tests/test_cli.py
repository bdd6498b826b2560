"""End-to-end tests for the branchtrack command line."""

import pandas as pd
import pytest

from src.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from src.dataset import read_dataset
from src.metrics import METRIC_NAMES
from src.tracker import TrackResult

SMALL_SIM = ["--n-plants", "3", "--frames-per-plant", "6"]


def generate(out_dir, *extra, seed=0, threads=1):
    return main([
        "--seed", str(seed), "--threads", str(threads), "-q",
        "generate", "--out", str(out_dir), *SMALL_SIM, *extra,
    ])


def write_ground_truth_tracks(data_dir, track_dir):
    manifest, sequences = read_dataset(data_dir)
    track_dir.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        result = TrackResult(
            stem=seq.stem, mode="fusion-fixed", dataset_hash=manifest.dataset_hash, tracks=seq.gt_tracks
        )
        (track_dir / f"{seq.stem}.tracks.json").write_text(result.model_dump_json(), encoding="utf-8")
    return sequences


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    assert generate(out) == EXIT_OK
    return out


@pytest.fixture
def small_net_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(
        "[net]\nembed_dim = 4\nheads = 2\nffn_dim = 8\nepochs = 3\n\n[gate]\nepochs = 5\n",
        encoding="utf-8",
    )
    return path


# =============================================================================
# generate / track / evaluate
# =============================================================================

class TestPipeline:
    def test_generate_writes_manifest_and_sequences(self, dataset_dir):
        manifest, sequences = read_dataset(dataset_dir)
        assert len(sequences) == 3
        assert len(manifest.files) == 3
        assert all(len(seq.frames) == 6 for seq in sequences)

    def test_track_then_evaluate(self, dataset_dir, tmp_path):
        tracks = tmp_path / "tracks"
        report = tmp_path / "report.csv"
        assert main(["-q", "track", "--data", str(dataset_dir), "--mode", "fusion-fixed", "--out", str(tracks)]) == EXIT_OK
        assert len(list(tracks.glob("*.tracks.json"))) == 3
        assert main([
            "-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tracks), "--out", str(report),
        ]) == EXIT_OK
        frame = pd.read_csv(report)
        assert set(frame["metric"]) == set(METRIC_NAMES)

    def test_self_evaluation_is_perfect(self, dataset_dir, tmp_path):
        tracks = tmp_path / "gt_tracks"
        write_ground_truth_tracks(dataset_dir, tracks)
        report = tmp_path / "report.csv"
        assert main([
            "-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tracks), "--out", str(report),
        ]) == EXIT_OK
        totals = pd.read_csv(report).query("aggregate").set_index("metric")["value"]
        assert totals["bma"] == pytest.approx(1.0)
        assert totals["mota"] == pytest.approx(1.0)
        assert totals["idf1"] == pytest.approx(1.0)
        assert totals["liou"] == pytest.approx(1.0)
        assert totals["ble"] == pytest.approx(0.0)
        assert totals["btc"] == pytest.approx(0.0)
        assert totals["idsw"] == 0

    def test_report_row_count(self, dataset_dir, tmp_path):
        tracks = tmp_path / "gt_tracks"
        sequences = write_ground_truth_tracks(dataset_dir, tracks)
        report = tmp_path / "report.csv"
        main(["-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tracks), "--out", str(report)])
        frame = pd.read_csv(report)
        phases = 3
        assert len(frame) == len(sequences) * phases * len(METRIC_NAMES) + len(METRIC_NAMES)

    def test_svg_overlays(self, dataset_dir, tmp_path):
        tracks = tmp_path / "gt_tracks"
        sequences = write_ground_truth_tracks(dataset_dir, tracks)
        svg_dir = tmp_path / "svg"
        assert main([
            "-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tracks),
            "--out", str(tmp_path / "report.csv"), "--svg", str(svg_dir),
        ]) == EXIT_OK
        files = sorted(svg_dir.glob("*.svg"))
        assert [f.stem for f in files] == sorted(seq.stem for seq in sequences)
        assert "<polyline" in files[0].read_text(encoding="utf-8")


class TestDeterminism:
    def test_generate_independent_of_threads(self, tmp_path):
        generate(tmp_path / "a", threads=1)
        generate(tmp_path / "b", threads=4)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_track_independent_of_threads(self, dataset_dir, tmp_path):
        for threads, name in ((1, "one"), (4, "four")):
            main([
                "-q", "--threads", str(threads), "track", "--data", str(dataset_dir),
                "--mode", "fusion-fixed", "--out", str(tmp_path / name),
            ])
        for path in sorted((tmp_path / "one").glob("*.json")):
            assert path.read_bytes() == (tmp_path / "four" / path.name).read_bytes()


# =============================================================================
# train
# =============================================================================

class TestTrain:
    def test_train_gate_then_track(self, dataset_dir, tmp_path, small_net_config):
        checkpoint = tmp_path / "gate.json"
        assert main([
            "-q", "--config", str(small_net_config), "train", "--data", str(dataset_dir),
            "--target", "gate", "--out", str(checkpoint),
        ]) == EXIT_OK
        assert checkpoint.exists()
        log = pd.read_csv(tmp_path / "gate.log.csv")
        assert log["epoch"].tolist() == list(range(5))
        assert main([
            "-q", "track", "--data", str(dataset_dir), "--mode", "fusion-learned",
            "--checkpoint", str(checkpoint), "--out", str(tmp_path / "tracks"),
        ]) == EXIT_OK
        assert len(list((tmp_path / "tracks").glob("*.tracks.json"))) == 3

    def test_train_scorer(self, dataset_dir, tmp_path, small_net_config):
        checkpoint = tmp_path / "scorer.json"
        log = tmp_path / "scorer_loss.csv"
        assert main([
            "-q", "--config", str(small_net_config), "train", "--data", str(dataset_dir),
            "--target", "scorer", "--out", str(checkpoint), "--log", str(log),
        ]) == EXIT_OK
        assert '"kind":"scorer"' in checkpoint.read_text(encoding="utf-8")
        assert len(pd.read_csv(log)) == 3


# =============================================================================
# report
# =============================================================================

class TestReportCommand:
    def test_benchmark_rows(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main([
            "-q", "report", "--out", str(out), "--seeds", "0",
            "--n-plants", "2", "--frames-per-plant", "5",
        ]) == EXIT_OK
        frame = pd.read_csv(out)
        assert (frame["experiment"] == "modes").sum() == 3
        assert (frame["experiment"] == "gravitropism").sum() == 2


# =============================================================================
# Exit codes
# =============================================================================

class TestExitCodes:
    def test_invalid_entanglement(self, tmp_path):
        assert generate(tmp_path / "data", "--entanglement", "2.0") == EXIT_VALIDATION
        assert not (tmp_path / "data").exists()

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["explode"])
        assert exc_info.value.code == EXIT_USAGE

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["track", "--out", "x"])
        assert exc_info.value.code == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("[simulator]\nplants = 3\n", encoding="utf-8")
        assert main(["-q", "--config", str(config), "generate", "--out", str(tmp_path / "d")]) == EXIT_VALIDATION

    def test_tampered_dataset(self, dataset_dir, tmp_path):
        victim = sorted(p for p in dataset_dir.glob("*.json") if p.name != "manifest.json")[0]
        victim.write_text(victim.read_text(encoding="utf-8").replace("0.", "0.0", 1), encoding="utf-8")
        code = main(["-q", "track", "--data", str(dataset_dir), "--out", str(tmp_path / "t")])
        assert code == EXIT_VALIDATION

    def test_tracks_from_another_dataset(self, dataset_dir, tmp_path):
        other = tmp_path / "other"
        generate(other, seed=9)
        tracks = tmp_path / "tracks"
        main(["-q", "track", "--data", str(other), "--out", str(tracks)])
        # same stems, different dataset hash
        code = main([
            "-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tracks),
            "--out", str(tmp_path / "r.csv"),
        ])
        assert code == EXIT_VALIDATION

    def test_learned_mode_without_checkpoint(self, dataset_dir, tmp_path):
        code = main([
            "-q", "track", "--data", str(dataset_dir), "--mode", "fusion-learned", "--out", str(tmp_path / "t"),
        ])
        assert code == EXIT_VALIDATION

    def test_malformed_checkpoint(self, dataset_dir, tmp_path):
        checkpoint = tmp_path / "bad.json"
        checkpoint.write_text("[]", encoding="utf-8")
        code = main([
            "-q", "track", "--data", str(dataset_dir), "--mode", "fusion-learned",
            "--checkpoint", str(checkpoint), "--out", str(tmp_path / "t"),
        ])
        assert code == EXIT_VALIDATION

    def test_missing_tracks_is_runtime_error(self, dataset_dir, tmp_path):
        code = main([
            "-q", "evaluate", "--data", str(dataset_dir), "--tracks", str(tmp_path / "nowhere"),
            "--out", str(tmp_path / "r.csv"),
        ])
        assert code == EXIT_RUNTIME
