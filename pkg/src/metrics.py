"""Branch-specific and multi-object tracking metrics with stratified aggregation."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import motmetrics as mm
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist

from .assignment import hungarian_assign
from .config import MetricsConfig
from .core import PHASES, BranchTrackError, phase_of_frames
from .reconstruction import reconstruct_branch, skeleton_length
from .schemas import Frame, PlantSequence, ScoreMatrix, TrackSet

logger = logging.getLogger(__name__)

Point = Tuple[float, float]

METRIC_NAMES = ("bma", "ble", "mota", "idf1", "fp", "fn", "idsw", "mt", "ml", "liou", "btc")
# aggregated by summation; every other metric is a count-weighted mean
COUNT_METRICS = frozenset({"fp", "fn", "idsw"})


class MetricError(BranchTrackError):
    """Raised when a metric is undefined for its inputs."""


# ---------------------------------------------------------------------------
# Branch metrics
# ---------------------------------------------------------------------------

def bma(predicted: Sequence[Optional[int]], truth: Sequence[Optional[int]]) -> Optional[float]:
    """Fraction of buds whose predicted branch equals the annotated one.

    Args:
        predicted: Predicted branch id per bud (None for unmatched)
        truth: Annotated branch id per bud (None when its branch is not visible)

    Returns:
        Accuracy in [0, 1], or None when there are no buds
    """
    if len(predicted) != len(truth):
        raise MetricError(f"{len(predicted)} predictions for {len(truth)} labels")
    if not truth:
        return None
    return sum(p == t for p, t in zip(predicted, truth)) / len(truth)


def ble(pairs: Sequence[Tuple[Point, Point]]) -> Optional[float]:
    """Mean Euclidean distance between matched bud coordinates; None without pairs."""
    if not pairs:
        return None
    a = np.array([p for p, _ in pairs], dtype=float)
    b = np.array([q for _, q in pairs], dtype=float)
    return float(np.mean(np.hypot(*(a - b).T)))


def liou(skeleton_gt: np.ndarray, skeleton_pred: np.ndarray) -> Optional[float]:
    """Length ratio min/max of two raster skeletons.

    Returns:
        None when both skeletons are empty, 0 when exactly one is
    """
    gt_empty = not np.any(skeleton_gt)
    pred_empty = not np.any(skeleton_pred)
    if gt_empty and pred_empty:
        return None
    if gt_empty or pred_empty:
        return 0.0
    return length_ratio(skeleton_length(skeleton_gt), skeleton_length(skeleton_pred))


def length_ratio(length_a: float, length_b: float) -> float:
    longest = max(length_a, length_b)
    if longest == 0.0:
        return 1.0
    return min(length_a, length_b) / longest


def btc(endpoints_pred: Sequence[Tuple[int, int]], endpoints_gt: Sequence[Tuple[int, int]]) -> Optional[float]:
    """Bidirectional mean nearest-neighbour distance between endpoint sets, in pixels."""
    if len(endpoints_pred) == 0 or len(endpoints_gt) == 0:
        return None
    d = cdist(np.asarray(endpoints_pred, dtype=float), np.asarray(endpoints_gt, dtype=float))
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


# ---------------------------------------------------------------------------
# MOT metrics
# ---------------------------------------------------------------------------

class MotResult(BaseModel):
    """CLEAR-MOT and identity metrics of one sequence (or stratum)."""

    model_config = ConfigDict(frozen=True)

    mota: float
    idf1: float
    fp: int
    fn: int
    idsw: int
    mt: float = Field(description="Fraction of GT tracks covered for >= mostly_tracked of their frames")
    ml: float = Field(description="Fraction of GT tracks covered for <= mostly_lost of their frames")
    n_gt: int
    n_tracks: int
    matched_pairs: List[Tuple[Point, Point]] = Field(
        default_factory=list, description="(gt, pred) detection coordinates of every match"
    )


def _positions(
    tracks: TrackSet, frame: Frame
) -> Dict[int, Point]:
    return {
        identity: frame.bud_by_id(bud_id).position
        for identity, bud_id in tracks.detections_at(frame.index).items()
    }


def _distances(gt_pos: Dict[int, Point], pred_pos: Dict[int, Point], radius: float) -> np.ndarray:
    """Squared distances gt x pred, NaN beyond the match radius."""
    if not gt_pos or not pred_pos:
        return np.empty((len(gt_pos), len(pred_pos)))
    return mm.distances.norm2squared_matrix(
        np.array(list(gt_pos.values())), np.array(list(pred_pos.values())), max_d2=radius**2
    )


def mot_metrics(
    pred: TrackSet,
    gt: TrackSet,
    frames: Sequence[Frame],
    match_radius: float = 0.03,
    mostly_tracked: float = 0.8,
    mostly_lost: float = 0.2,
) -> MotResult:
    """CLEAR-MOT (MOTA, FP, FN, IDSW, MT, ML) and IDF1 over the given frames.

    Correspondences and the CLEAR-MOT counts come from a motmetrics
    accumulator fed with squared point distances. MT and ML use the
    configured coverage thresholds. IDF1 matches identities by a global
    optimum over trajectory overlap.

    Args:
        pred: Predicted identity tracks
        gt: Ground-truth identity tracks
        frames: Frames holding the detections the tracks refer to
        match_radius: Maximum distance of a detection correspondence
        mostly_tracked: Coverage at or above which a GT track is mostly tracked
        mostly_lost: Coverage at or below which a GT track is mostly lost

    Returns:
        MotResult

    Raises:
        MetricError: If there are no ground-truth detections in ``frames``
    """
    acc = mm.MOTAccumulator(auto_id=False)
    positions: Dict[int, Tuple[Dict[int, Point], Dict[int, Point]]] = {}
    gt_frames: Dict[int, int] = {}
    pred_count: Dict[int, int] = {}
    overlap: Dict[Tuple[int, int], int] = {}

    for frame in frames:
        gt_pos = _positions(gt, frame)
        pred_pos = _positions(pred, frame)
        positions[frame.index] = (gt_pos, pred_pos)
        gt_ids, pred_ids = list(gt_pos), list(pred_pos)
        d2 = _distances(gt_pos, pred_pos, match_radius)
        acc.update(gt_ids, pred_ids, d2, frameid=frame.index)

        for gid in gt_pos:
            gt_frames[gid] = gt_frames.get(gid, 0) + 1
        for pid in pred_pos:
            pred_count[pid] = pred_count.get(pid, 0) + 1
        for a, b in zip(*np.nonzero(np.isfinite(d2))):
            key = (gt_ids[a], pred_ids[b])
            overlap[key] = overlap.get(key, 0) + 1

    n_gt = sum(gt_frames.values())
    if n_gt == 0:
        raise MetricError("no ground-truth detections to evaluate")

    summary = mm.metrics.create().compute(
        acc,
        metrics=["num_false_positives", "num_misses", "num_switches", "mota", "num_objects"],
        name="sequence",
    ).iloc[0]

    gt_hits: Dict[int, int] = {}
    pairs: List[Tuple[Point, Point]] = []
    events = acc.mot_events
    matched = events[events["Type"].isin(["MATCH", "SWITCH"])]
    for (frame_id, _), row in matched.iterrows():
        gid, pid = int(row["OId"]), int(row["HId"])
        gt_hits[gid] = gt_hits.get(gid, 0) + 1
        gt_pos, pred_pos = positions[int(frame_id)]
        pairs.append((gt_pos[gid], pred_pos[pid]))

    idtp = _identity_true_positives(overlap, sorted(gt_frames), sorted(pred_count))
    n_pred = sum(pred_count.values())
    coverage = [gt_hits.get(g, 0) / gt_frames[g] for g in gt_frames]
    return MotResult(
        mota=float(summary["mota"]),
        idf1=2 * idtp / (2 * idtp + (n_pred - idtp) + (n_gt - idtp)),
        fp=int(summary["num_false_positives"]),
        fn=int(summary["num_misses"]),
        idsw=int(summary["num_switches"]),
        mt=sum(c >= mostly_tracked for c in coverage) / len(coverage),
        ml=sum(c <= mostly_lost for c in coverage) / len(coverage),
        n_gt=int(summary["num_objects"]),
        n_tracks=len(gt_frames),
        matched_pairs=pairs,
    )


def _identity_true_positives(
    overlap: Dict[Tuple[int, int], int], gt_ids: List[int], pred_ids: List[int]
) -> int:
    """Largest total overlap over one-to-one gt/pred identity correspondences."""
    if not gt_ids or not pred_ids:
        return 0
    values = np.array(
        [[float(overlap.get((g, p), 0)) for p in pred_ids] for g in gt_ids]
    )
    result = hungarian_assign(
        ScoreMatrix(values=values, row_ids=tuple(gt_ids), col_ids=tuple(pred_ids)),
        unmatched_logit=0.0,
    )
    return int(round(result.total))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

class MetricRow(BaseModel):
    """One stratum value; plant/view/phase are None on aggregate rows."""

    model_config = ConfigDict(frozen=True)

    plant: Optional[int] = None
    view: Optional[float] = None
    phase: Optional[str] = None
    metric: str
    value: Optional[float] = None
    count: int = 0
    aggregate: bool = False


class MetricReport(BaseModel):
    """Per-stratum rows plus one aggregate row per metric."""

    rows: List[MetricRow] = Field(default_factory=list)
    aggregates: Dict[str, Optional[float]] = Field(default_factory=dict)

    def aggregate_rows(self) -> List[MetricRow]:
        counts: Dict[str, int] = {}
        for row in self.rows:
            if row.value is not None:
                counts[row.metric] = counts.get(row.metric, 0) + row.count
        return [
            MetricRow(metric=name, value=value, count=counts.get(name, 0), aggregate=True)
            for name, value in self.aggregates.items()
        ]

    def value(self, metric: str, phase: Optional[str] = None) -> Optional[float]:
        """Aggregate value of a metric, optionally restricted to one phase."""
        if phase is None:
            return self.aggregates.get(metric)
        return weighted_mean(
            [r.value for r in self.rows if r.metric == metric and r.phase == phase],
            [r.count for r in self.rows if r.metric == metric and r.phase == phase],
        )


def weighted_mean(values: Sequence[Optional[float]], counts: Sequence[int]) -> Optional[float]:
    """Count-weighted mean ignoring absent values; None when nothing is present."""
    total = 0.0
    weight = 0
    for value, count in zip(values, counts):
        if value is None or count <= 0:
            continue
        total += value * count
        weight += count
    return total / weight if weight else None


def aggregate(rows: Sequence[MetricRow]) -> MetricReport:
    """Combine stratum rows into a report.

    Rate metrics aggregate as sample-count-weighted means, the raw counts
    FP/FN/IDSW as sums.
    """
    names = [m for m in METRIC_NAMES if any(r.metric == m for r in rows)]
    names += sorted({r.metric for r in rows} - set(names))
    aggregates: Dict[str, Optional[float]] = {}
    for name in names:
        selected = [r for r in rows if r.metric == name]
        if name in COUNT_METRICS:
            present = [r.value for r in selected if r.value is not None]
            aggregates[name] = float(sum(present)) if present else None
        else:
            aggregates[name] = weighted_mean([r.value for r in selected], [r.count for r in selected])
    return MetricReport(rows=list(rows), aggregates=aggregates)


# ---------------------------------------------------------------------------
# Sequence evaluation
# ---------------------------------------------------------------------------

def gt_labels(frame: Frame) -> Dict[int, Optional[int]]:
    """bud id -> id of the branch carrying the bud's annotated order in this frame."""
    by_order = {bp.order: bp.id for bp in frame.branch_points}
    return {b.id: by_order.get(b.gt_order) for b in frame.buds}


def predicted_labels(tracks: TrackSet, frame: Frame) -> Dict[int, Optional[int]]:
    """bud id -> identity holding it in ``tracks`` (None when untracked)."""
    inverse = {bud_id: identity for identity, bud_id in tracks.detections_at(frame.index).items()}
    return {b.id: inverse.get(b.id) for b in frame.buds}


def _identity_geometry(
    tracks: TrackSet, frames: Sequence[Frame], identity: int
) -> Tuple[Optional[Point], List[Point]]:
    by_index = {f.index: f for f in frames}
    origin = None
    for frame in frames:
        for bp in frame.branch_points:
            if bp.id == identity:
                origin = (bp.x, bp.y)
    buds = [
        by_index[f].bud_by_id(bud_id).position
        for f, bud_id in tracks.tracks.get(identity, [])
        if f in by_index
    ]
    return origin, buds


def skeleton_metrics(
    pred: TrackSet, gt: TrackSet, frames: Sequence[Frame], config: MetricsConfig
) -> Tuple[List[float], List[float]]:
    """Per-identity LIoU and BTC values over the frames (absent values dropped)."""
    liou_values: List[float] = []
    btc_values: List[float] = []
    empty = np.zeros((config.raster_size, config.raster_size), dtype=bool)
    for identity in sorted(set(gt.tracks) | set(pred.tracks)):
        origin, gt_buds = _identity_geometry(gt, frames, identity)
        _, pred_buds = _identity_geometry(pred, frames, identity)
        if origin is None:
            continue
        sides = []
        for buds in (gt_buds, pred_buds):
            if buds:
                sides.append(reconstruct_branch(
                    origin, buds, config.raster_size, config.stroke_px, config.curve_samples
                ))
            else:
                sides.append(None)
        (gt_side, pred_side) = sides
        value = liou(
            gt_side[1] if gt_side else empty, pred_side[1] if pred_side else empty
        )
        if value is not None:
            liou_values.append(value)
        if gt_side and pred_side:
            distance = btc(pred_side[0].endpoints, gt_side[0].endpoints)
            if distance is not None:
                btc_values.append(distance)
    return liou_values, btc_values


def evaluate_sequence(
    seq: PlantSequence, pred: TrackSet, config: MetricsConfig
) -> List[MetricRow]:
    """Metric rows of one plant-view sequence, one per (phase, metric).

    Skeleton metrics for a phase use every frame up to the end of that phase.

    Raises:
        MetricError: If the sequence carries no ground-truth tracks
    """
    if seq.gt_tracks is None:
        raise MetricError(f"sequence {seq.stem} has no ground-truth tracks")
    frames = sorted(seq.frames, key=lambda f: f.timestamp_days)
    phases = phase_of_frames(len(frames), config.phase_fractions)
    rows: List[MetricRow] = []

    def add(phase: str, metric: str, value: Optional[float], count: int) -> None:
        rows.append(MetricRow(
            plant=seq.plant_id, view=seq.view_angle, phase=phase, metric=metric,
            value=value, count=count if value is not None else 0,
        ))

    for phase in PHASES:
        phase_frames = [f for f, p in zip(frames, phases) if p == phase]
        predicted: List[Optional[int]] = []
        truth: List[Optional[int]] = []
        for frame in phase_frames:
            labels = gt_labels(frame)
            guesses = predicted_labels(pred, frame)
            for bud in frame.buds:
                predicted.append(guesses[bud.id])
                truth.append(labels[bud.id])
        add(phase, "bma", bma(predicted, truth), len(truth))

        try:
            mot = mot_metrics(
                pred, seq.gt_tracks, phase_frames,
                config.match_radius, config.mostly_tracked, config.mostly_lost,
            )
        except MetricError:
            mot = None
        add(phase, "ble", ble(mot.matched_pairs) if mot else None,
            len(mot.matched_pairs) if mot else 0)
        for name in ("mota", "idf1", "fp", "fn", "idsw"):
            add(phase, name, float(getattr(mot, name)) if mot else None, mot.n_gt if mot else 0)
        for name in ("mt", "ml"):
            add(phase, name, getattr(mot, name) if mot else None, mot.n_tracks if mot else 0)

        upto = frames[: frames.index(phase_frames[-1]) + 1] if phase_frames else []
        liou_values, btc_values = skeleton_metrics(pred, seq.gt_tracks, upto, config)
        add(phase, "liou", float(np.mean(liou_values)) if liou_values else None, len(liou_values))
        add(phase, "btc", float(np.mean(btc_values)) if btc_values else None, len(btc_values))
    logger.debug(f"Evaluated {seq.stem}: {len(rows)} rows")
    return rows


def evaluate(
    sequences: Sequence[PlantSequence], predictions: Dict[str, TrackSet], config: MetricsConfig
) -> MetricReport:
    """Stratified report over sequences; ``predictions`` is keyed by sequence stem."""
    rows: List[MetricRow] = []
    for seq in sequences:
        rows.extend(evaluate_sequence(seq, predictions[seq.stem], config))
    return aggregate(rows)
