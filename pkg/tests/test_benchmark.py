"""Tests for the mode comparison and gravitropism ablation."""

import pandas as pd
import pytest

import src.benchmark as benchmark_module
from src.benchmark import (
    BENCHMARK_COLUMNS,
    idsw_reduction,
    ordering_gaps,
    run_benchmark,
    summarize,
)
from src.config import load_settings
from src.simulator import generate_dataset
from src.tracker import TrackResult

BENCHMARK_SIM = {
    "n_plants": 50,
    "frames_per_plant": 20,
    "entanglement": 0.7,
    "entanglement_onset": 0.35,
    "occlusion_prob": 0.15,
    "sway_amplitude": 0.01,
    "sway_growth_coupling": 1.0,
}


def make_table():
    rows = []
    for seed, (spatial, temporal, fused) in enumerate([(0.5, 0.6, 0.7), (0.4, 0.5, 0.55)]):
        for mode, value in (("spatial", spatial), ("temporal", temporal), ("fusion-fixed", fused)):
            rows.append({"experiment": "modes", "seed": seed, "mode": mode, "lambda_vert": 6.0,
                         "bma": value, "mota": None, "idf1": None, "idsw": 0, "n_buds": 10})
        rows.append({"experiment": "gravitropism", "seed": seed, "mode": "fusion-fixed",
                     "lambda_vert": 6.0, "bma": fused, "mota": None, "idf1": None,
                     "idsw": 3, "n_buds": 10})
        rows.append({"experiment": "gravitropism", "seed": seed, "mode": "fusion-fixed",
                     "lambda_vert": 0.0, "bma": fused, "mota": None, "idf1": None,
                     "idsw": 5, "n_buds": 10})
    return pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)


class TestTables:
    def test_ordering_gaps(self):
        gaps = ordering_gaps(make_table())
        assert gaps["fusion_minus_temporal"].tolist() == pytest.approx([0.1, 0.05])
        assert gaps["temporal_minus_spatial"].tolist() == pytest.approx([0.1, 0.1])

    def test_idsw_reduction(self):
        assert idsw_reduction(make_table(), 6.0) == pytest.approx(0.4)

    def test_idsw_reduction_without_switches(self):
        table = make_table()
        table["idsw"] = 0
        assert idsw_reduction(table, 6.0) == 0.0


class TestSummarize:
    def test_ground_truth_summary(self, noise_free_sim, settings):
        sequences = generate_dataset(noise_free_sim)
        results = [TrackResult(stem=s.stem, mode="fusion-fixed", tracks=s.gt_tracks) for s in sequences]
        summary = summarize(sequences, results, settings)
        assert summary.bma == 1.0
        assert summary.mota == pytest.approx(1.0)
        assert summary.idsw == 0
        assert summary.n_buds == sum(len(f.buds) for s in sequences for f in s.frames)


class TestRunBenchmark:
    def test_rows_per_seed(self):
        settings = load_settings(simulator={"n_plants": 2, "frames_per_plant": 5})
        frame = run_benchmark(settings, seeds=[0, 1])
        assert list(frame.columns) == BENCHMARK_COLUMNS
        assert len(frame) == 2 * (3 + 2)
        ablation = frame[frame["experiment"] == "gravitropism"]
        assert sorted(ablation["lambda_vert"].unique()) == [0.0, 6.0]

    def test_penalised_arm_reuses_mode_run(self, mocker):
        spy = mocker.spy(benchmark_module, "track_dataset")
        settings = load_settings(simulator={"n_plants": 2, "frames_per_plant": 5})
        frame = run_benchmark(settings, seeds=[0, 1])
        assert spy.call_count == 2 * (3 + 1)

        for seed in (0, 1):
            mode_row = frame.query("experiment == 'modes' and mode == 'fusion-fixed' and seed == @seed")
            penalised = frame.query("experiment == 'gravitropism' and lambda_vert == 6.0 and seed == @seed")
            assert penalised[["bma", "idsw"]].to_numpy().tolist() == mode_row[["bma", "idsw"]].to_numpy().tolist()

    def test_zero_penalty_runs_fusion_once(self, mocker):
        spy = mocker.spy(benchmark_module, "track_dataset")
        settings = load_settings(
            simulator={"n_plants": 2, "frames_per_plant": 5}, temporal={"lambda_vert": 0.0}
        )
        frame = run_benchmark(settings, seeds=[0])
        assert spy.call_count == 3
        assert (frame["experiment"] == "gravitropism").sum() == 2

    def test_threads_do_not_change_results(self):
        settings = load_settings(simulator={"n_plants": 3, "frames_per_plant": 5})
        serial = run_benchmark(settings, seeds=[4], threads=1)
        parallel = run_benchmark(settings, seeds=[4], threads=3)
        pd.testing.assert_frame_equal(serial, parallel)


@pytest.mark.slow
class TestModeOrdering:
    """Mode ordering and penalty ablation on entangled 50-plant benchmarks.

    Sway follows elongation, so motion is erratic while branches grow fast and
    clean once they converge into the canopy.
    """

    @pytest.fixture(scope="class")
    def table(self):
        settings = load_settings(simulator=BENCHMARK_SIM)
        return run_benchmark(settings, seeds=[0, 1, 2, 3, 4], threads=4)

    def test_fusion_beats_temporal_beats_spatial(self, table):
        gaps = ordering_gaps(table)
        assert (gaps["fusion_minus_temporal"] >= 0.02).all()
        assert (gaps["temporal_minus_spatial"] >= 0.02).all()

    def test_penalty_reduces_identity_switches(self, table):
        assert idsw_reduction(table, 6.0) >= 0.10
