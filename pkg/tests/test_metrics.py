"""Tests for branch metrics, MOT metrics and stratified aggregation."""

import motmetrics as mm
import numpy as np
import pytest

from src.config import MetricsConfig
from src.metrics import (
    MetricError,
    MetricRow,
    aggregate,
    bma,
    ble,
    btc,
    evaluate,
    evaluate_sequence,
    gt_labels,
    liou,
    mot_metrics,
    predicted_labels,
)
from src.schemas import TrackSet
from tests.conftest import make_bud, make_frame


def make_run(length, shape=(5, 20)):
    mask = np.zeros(shape, dtype=bool)
    mask[2, 1:1 + length] = True
    return mask


def make_mot_frames():
    """Two ground-truth buds (ids 0 and 1) drifting upward over five frames."""
    return [
        make_frame(t, [make_bud(0, 0.3, 0.6 - 0.01 * t, frame=t), make_bud(1, 0.7, 0.6 - 0.01 * t, frame=t)])
        for t in range(5)
    ]


GT = TrackSet(tracks={1: [(t, 0) for t in range(5)], 2: [(t, 1) for t in range(5)]})


def make_switch_frames():
    """Buds 0 and 1 drift upward over six frames; bud 2 is clutter in frames 2 and 3."""
    frames = []
    for t in range(6):
        buds = [make_bud(0, 0.2, 0.6 - 0.01 * t, frame=t), make_bud(1, 0.7, 0.6 - 0.01 * t, frame=t)]
        if t in (2, 3):
            buds.append(make_bud(2, 0.45, 0.3, frame=t))
        frames.append(make_frame(t, buds))
    return frames


SWITCH_GT = TrackSet(tracks={1: [(t, 0) for t in range(6)], 2: [(t, 1) for t in range(5)]})
SWITCH_PRED = TrackSet(tracks={
    10: [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)],
    11: [(0, 1), (1, 1), (2, 1), (3, 0), (4, 0)],
    12: [(2, 2), (3, 2)],
})


def reference_summary(frames, gt, pred, radius):
    """motmetrics fed directly from bud coordinates."""
    acc = mm.MOTAccumulator(auto_id=False)
    for frame in frames:
        xy = {b.id: (b.cx, b.cy) for b in frame.buds}
        gt_here = {g: xy[b] for g, b in gt.detections_at(frame.index).items()}
        pred_here = {p: xy[b] for p, b in pred.detections_at(frame.index).items()}
        d2 = mm.distances.norm2squared_matrix(
            np.array(list(gt_here.values())), np.array(list(pred_here.values())), max_d2=radius**2
        )
        acc.update(list(gt_here), list(pred_here), d2, frameid=frame.index)
    return mm.metrics.create().compute(
        acc,
        metrics=["num_false_positives", "num_misses", "num_switches", "mota", "idf1", "num_objects"],
        name="reference",
    ).iloc[0]


# =============================================================================
# Branch metrics
# =============================================================================


class TestBma:
    def test_all_correct(self):
        assert bma([1, 2, 3], [1, 2, 3]) == 1.0

    def test_three_of_four(self):
        assert bma([1, 2, 3, None], [1, 2, 3, 4]) == 0.75

    def test_empty_is_absent(self):
        assert bma([], []) is None


class TestBle:
    def test_identical(self):
        assert ble([((0.1, 0.2), (0.1, 0.2))]) == 0.0

    def test_mean_of_distances(self):
        assert ble([((0, 0), (0.1, 0)), ((0, 0), (0, 0.3))]) == pytest.approx(0.2)

    def test_three_four_five(self):
        assert ble([((0.0, 0.0), (0.3, 0.4))]) == pytest.approx(0.5)

    def test_no_pairs(self):
        assert ble([]) is None


class TestLiou:
    def test_identical(self):
        assert liou(make_run(8), make_run(8)) == 1.0

    def test_length_ratio(self):
        assert liou(make_run(6), make_run(11)) == pytest.approx(0.5)

    def test_symmetric(self):
        assert liou(make_run(4), make_run(9)) == liou(make_run(9), make_run(4))

    def test_empty_sides(self):
        empty = np.zeros((5, 20), dtype=bool)

        assert liou(empty, empty) is None
        assert liou(make_run(5), empty) == 0.0


class TestBtc:
    def test_identical(self):
        assert btc([(0, 0), (4, 4)], [(0, 0), (4, 4)]) == 0.0

    def test_singletons(self):
        assert btc([(0, 0)], [(3, 4)]) == 5.0

    def test_hand_example(self):
        assert btc([(0, 0), (10, 0)], [(0, 0), (10, 4)]) == pytest.approx(2.0)

    def test_symmetric(self):
        a, b = [(0, 0), (5, 1), (9, 9)], [(1, 1), (7, 2)]
        assert btc(a, b) == pytest.approx(btc(b, a))

    def test_empty(self):
        assert btc([], [(1, 1)]) is None


# =============================================================================
# MOT metrics
# =============================================================================


class TestMotMetrics:
    def test_perfect_tracking(self):
        pred = TrackSet(tracks={7: GT.tracks[1], 8: GT.tracks[2]})

        result = mot_metrics(pred, GT, make_mot_frames())
        assert result.mota == 1.0
        assert result.idf1 == 1.0
        assert result.mt == 1.0
        assert result.ml == 0.0
        assert (result.fp, result.fn, result.idsw) == (0, 0, 0)

    def test_one_miss_one_switch(self):
        pred = TrackSet(tracks={
            7: GT.tracks[1],
            8: [(0, 1), (1, 1), (2, 1)],
            9: [(3, 1)],
        })

        result = mot_metrics(pred, GT, make_mot_frames())
        assert result.n_gt == 10
        assert (result.fn, result.fp, result.idsw) == (1, 0, 1)
        assert result.mota == pytest.approx(0.8)
        assert 0.0 <= result.idf1 < 1.0

    def test_false_positive_outside_radius(self):
        frames = [make_frame(0, [make_bud(0, 0.3, 0.5), make_bud(1, 0.34, 0.5)])]
        gt = TrackSet(tracks={1: [(0, 0)]})
        pred = TrackSet(tracks={5: [(0, 1)]})

        result = mot_metrics(pred, gt, frames, match_radius=0.03)
        assert (result.fp, result.fn) == (1, 1)
        assert result.mota == pytest.approx(-1.0)
        assert result.ml == 1.0

    def test_empty_ground_truth(self):
        with pytest.raises(MetricError):
            mot_metrics(TrackSet(), TrackSet(), make_mot_frames())

    def test_swapped_identities(self):
        result = mot_metrics(SWITCH_PRED, SWITCH_GT, make_switch_frames())
        assert result.n_gt == 11
        assert (result.fp, result.fn, result.idsw) == (3, 1, 2)
        assert result.mota == pytest.approx(5 / 11)
        assert result.idf1 == pytest.approx(0.5)
        assert (result.mt, result.ml) == (1.0, 0.0)
        assert len(result.matched_pairs) == 10

    def test_agrees_with_motmetrics(self):
        frames = make_switch_frames()
        expected = reference_summary(frames, SWITCH_GT, SWITCH_PRED, 0.03)

        result = mot_metrics(SWITCH_PRED, SWITCH_GT, frames, match_radius=0.03)
        assert result.fp == expected["num_false_positives"]
        assert result.fn == expected["num_misses"]
        assert result.idsw == expected["num_switches"]
        assert result.n_gt == expected["num_objects"]
        assert result.mota == pytest.approx(expected["mota"])
        assert result.idf1 == pytest.approx(expected["idf1"])

    def test_coverage_thresholds_follow_config(self):
        # ground-truth track 1 is covered in 5 of its 6 frames
        frames = make_switch_frames()
        strict = mot_metrics(SWITCH_PRED, SWITCH_GT, frames, mostly_tracked=0.9)
        assert strict.mt == 0.5


# =============================================================================
# Aggregation
# =============================================================================


class TestAggregate:
    def test_single_stratum(self):
        report = aggregate([MetricRow(phase="early", metric="bma", value=0.6, count=4)])

        assert report.aggregates["bma"] == 0.6

    def test_count_weighted(self):
        rows = [
            MetricRow(phase="early", metric="bma", value=0.9, count=3),
            MetricRow(phase="late", metric="bma", value=0.5, count=1),
        ]

        assert aggregate(rows).aggregates["bma"] == pytest.approx(0.8)
        assert aggregate(rows[::-1]).aggregates["bma"] == pytest.approx(0.8)

    def test_counts_sum(self):
        rows = [
            MetricRow(phase="early", metric="idsw", value=2.0, count=10),
            MetricRow(phase="late", metric="idsw", value=3.0, count=40),
        ]

        assert aggregate(rows).aggregates["idsw"] == 5.0

    def test_absent_values_ignored(self):
        rows = [
            MetricRow(phase="early", metric="btc", value=None, count=0),
            MetricRow(phase="mid", metric="btc", value=1.5, count=2),
        ]

        report = aggregate(rows)
        assert report.aggregates["btc"] == 1.5
        assert report.value("btc", "early") is None
        assert report.aggregate_rows()[0].count == 2


# =============================================================================
# Sequence evaluation
# =============================================================================


class TestEvaluateSequence:
    def test_labels(self, two_branch_sequence):
        frame = two_branch_sequence.frames[0]

        assert gt_labels(frame) == {0: 10, 1: 20}
        assert predicted_labels(two_branch_sequence.gt_tracks, frame) == {0: 10, 1: 20}

    def test_perfect_prediction(self, two_branch_sequence):
        rows = evaluate_sequence(two_branch_sequence, two_branch_sequence.gt_tracks, MetricsConfig())

        assert {r.phase for r in rows} == {"early", "mid", "late"}
        values = {(r.phase, r.metric): r.value for r in rows}
        for phase in ("early", "mid", "late"):
            assert values[(phase, "bma")] == 1.0
            assert values[(phase, "mota")] == 1.0
            assert values[(phase, "liou")] == 1.0
            assert values[(phase, "btc")] == 0.0

    def test_swapped_prediction(self, two_branch_sequence):
        swapped = TrackSet(tracks={
            10: two_branch_sequence.gt_tracks.tracks[20],
            20: two_branch_sequence.gt_tracks.tracks[10],
        })

        report = evaluate(
            [two_branch_sequence], {two_branch_sequence.stem: swapped}, MetricsConfig()
        )
        assert report.aggregates["bma"] == 0.0
        assert report.aggregates["mota"] == 1.0

    def test_missing_ground_truth(self, two_branch_sequence):
        seq = two_branch_sequence.model_copy(update={"gt_tracks": None})

        with pytest.raises(MetricError):
            evaluate_sequence(seq, TrackSet(), MetricsConfig())
