"""Per-frame tracking pipeline: evidence, gating, fusion, assignment and identity propagation.

A bud inherits the identity of the branch it is assigned to, so identities
are branch ids. At inference a previous bud's order is the order of the
branch it was assigned to; training examples use annotated orders instead.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from .assignment import hungarian_assign
from .config import GateParams, Settings
from .core import BranchTrackError
from .evidence.spatial import spatial_score_matrix
from .evidence.temporal import (
    apply_gravitropism_penalty,
    estimate_global_uplift,
    estimate_motion,
    order_groups,
    selected_deviations,
    temporal_score_matrix,
    temporal_to_branch,
    vertical_displacements,
)
from .fusion import (
    FusionExample,
    FusionGate,
    GateWeights,
    fixed_gate,
    fuse,
    gating_feature_tensor,
    learned_gate,
)
from .schemas import UNMATCHED, Frame, MotionState, PlantSequence, ScoreMatrix, TrackSet
from .scorer_net import ScorerNet, build_example, score_frame

logger = logging.getLogger(__name__)

MODES = ("spatial", "temporal", "fusion-fixed", "fusion-learned")


class TrackingError(BranchTrackError):
    """Raised when a tracking run is misconfigured."""


# ---------------------------------------------------------------------------
# Evidence for one frame
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameEvidence:
    """Analytic evidence of one frame against its predecessor."""

    m_spatial: ScoreMatrix
    m_tb: ScoreMatrix
    deviations: torch.Tensor    # (M, K), NaN without history
    has_history: Tuple[bool, ...]


def frame_evidence(
    frame: Frame,
    previous: Optional[Frame],
    prev_orders: Sequence[Optional[int]],
    settings: Settings,
    motions: Optional[Dict[int, MotionState]] = None,
) -> FrameEvidence:
    """Spatial scores and penalized temporal-to-branch scores.

    Args:
        frame: Current frame (at least one bud and one branch point)
        previous: Previous frame, or None when no temporal evidence applies
        prev_orders: Order carried by each bud of ``previous``
        settings: Pipeline settings
        motions: previous bud id -> motion; annotated motion when None
    """
    temporal = settings.temporal
    m_spatial = spatial_score_matrix(frame, settings.spatial)
    branch_orders = [bp.order for bp in frame.branch_points]
    branch_ids = [bp.id for bp in frame.branch_points]
    n_rows, n_cols = len(frame.buds), len(branch_orders)

    if previous is None or not previous.buds:
        return FrameEvidence(
            m_spatial=m_spatial,
            m_tb=ScoreMatrix(
                values=np.full((n_rows, n_cols), temporal.beta_absent),
                row_ids=m_spatial.row_ids,
                col_ids=m_spatial.col_ids,
            ),
            deviations=torch.full((n_rows, n_cols), float("nan"), dtype=torch.float64),
            has_history=(False,) * n_cols,
        )

    m_temporal = temporal_score_matrix(frame, previous, temporal, motions)
    groups = order_groups(prev_orders, branch_orders)
    m_tb = temporal_to_branch(m_temporal, prev_orders, branch_orders, temporal, branch_ids)
    dy_global = estimate_global_uplift(frame, previous, temporal.topk_global)
    m_tb = apply_gravitropism_penalty(
        m_tb, m_temporal, dy_global, frame.buds, previous.buds, groups, temporal
    )
    deviations = selected_deviations(
        torch.as_tensor(np.asarray(m_temporal.values, dtype=float)),
        torch.as_tensor(vertical_displacements(frame.buds, previous.buds)),
        dy_global,
        groups,
    )
    return FrameEvidence(
        m_spatial=m_spatial,
        m_tb=m_tb,
        deviations=deviations,
        has_history=tuple(bool(g) for g in groups),
    )


def mode_weights(
    mode: str,
    evidence: FrameEvidence,
    gate_params: GateParams,
    gate: Optional[FusionGate] = None,
) -> GateWeights:
    """Per-branch spatial weights for a tracking mode.

    spatial uses spatial evidence only; temporal uses temporal evidence
    except for branches without history, which fall back to spatial.
    """
    history = np.asarray(evidence.has_history, dtype=bool)
    if mode == "spatial":
        return GateWeights(spatial=np.ones(len(history)))
    if mode == "temporal":
        return GateWeights(spatial=np.where(history, 0.0, 1.0))
    if mode == "fusion-fixed":
        return fixed_gate(history, gate_params)
    if mode == "fusion-learned":
        if gate is None:
            raise TrackingError("fusion-learned mode needs a trained gate")
        h = gating_feature_tensor(
            torch.as_tensor(np.asarray(evidence.m_spatial.values, dtype=float)),
            torch.as_tensor(np.asarray(evidence.m_tb.values, dtype=float)),
            evidence.deviations,
            torch.as_tensor(history, dtype=torch.float64),
        )
        return learned_gate(h, gate)
    raise TrackingError(f"unknown tracking mode '{mode}'; expected one of {MODES}")


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

class FrameAssignment(BaseModel):
    frame: int
    assignments: Dict[int, Optional[int]] = Field(description="bud id -> branch id (None unmatched)")


class TrackResult(BaseModel):
    """Serialized output of one tracked sequence (the ``<stem>.tracks.json`` document)."""

    stem: str
    mode: str
    dataset_hash: str = ""
    frames: List[FrameAssignment] = Field(default_factory=list)
    tracks: TrackSet = Field(default_factory=TrackSet)


@dataclass
class _TrackState:
    previous: Optional[Frame] = None
    prev_orders: Optional[Dict[int, int]] = None
    history: Optional[Dict[int, List[Tuple[float, float, float]]]] = None

    def reset(self) -> None:
        self.previous = None
        self.prev_orders = {}
        self.history = {}


def _motions(state: _TrackState, assigned: Dict[int, int], window: int) -> Dict[int, MotionState]:
    """Motion of each previous bud from its identity's tracked history."""
    motions = {}
    for bud in state.previous.buds:
        identity = assigned.get(bud.id)
        if identity is None:
            motions[bud.id] = MotionState(px=bud.cx, py=bud.cy)
        else:
            motions[bud.id] = estimate_motion(state.history.get(identity, []), window)
    return motions


def track_sequence(
    seq: PlantSequence,
    settings: Settings,
    mode: Optional[str] = None,
    gate: Optional[FusionGate] = None,
    scorer: Optional[ScorerNet] = None,
    gate_params: Optional[GateParams] = None,
) -> TrackResult:
    """Track one plant-view sequence frame by frame.

    Args:
        seq: Sequence to track (annotated orders and motion are never read)
        settings: Pipeline settings
        mode: Tracking mode; defaults to settings.tracking.mode
        gate: Trained gate for fusion-learned mode
        scorer: Trained scorer network; when given with fusion-learned the learned
            spatial and temporal paths replace the analytic ones
        gate_params: Gate constants of a checkpoint; defaults to settings.gate

    Returns:
        TrackResult with per-frame assignments and identity tracks

    Raises:
        TrackingError: On unknown mode or missing gate in learned mode
    """
    mode = mode or settings.tracking.mode
    gate_params = gate_params or settings.gate
    if mode not in MODES:
        raise TrackingError(f"unknown tracking mode '{mode}'; expected one of {MODES}")
    if mode == "fusion-learned" and gate is None:
        raise TrackingError("fusion-learned mode needs a checkpoint")

    state = _TrackState()
    state.reset()
    assigned_prev: Dict[int, int] = {}
    tracks: Dict[int, List[Tuple[int, int]]] = {}
    results: List[FrameAssignment] = []

    for frame in sorted(seq.frames, key=lambda f: f.timestamp_days):
        if frame.sequence_break:
            state.reset()
            assigned_prev = {}
        previous = state.previous if mode != "spatial" else None
        branch_of: Dict[int, Optional[int]] = {b.id: None for b in frame.buds}

        if frame.buds and frame.branch_points:
            prev_orders = (
                [state.prev_orders.get(b.id) for b in previous.buds] if previous is not None else []
            )
            motions = (
                _motions(state, assigned_prev, settings.temporal.motion_window)
                if previous is not None else {}
            )
            if mode == "fusion-learned" and scorer is not None:
                example = build_example(
                    frame, previous, prev_orders, motions, settings.temporal.topk_global
                )
                fused = ScoreMatrix(
                    values=score_frame(example, scorer, gate, settings.temporal, gate_params),
                    row_ids=tuple(b.id for b in frame.buds),
                    col_ids=tuple(bp.id for bp in frame.branch_points),
                    has_unmatched=True,
                )
            else:
                evidence = frame_evidence(frame, previous, prev_orders, settings, motions)
                weights = mode_weights(mode, evidence, gate_params, gate)
                unmatched = float(gate.unmatched.detach()) if gate is not None else None
                fused = fuse(evidence.m_spatial, evidence.m_tb, weights, gate_params, unmatched)
            branch_of = hungarian_assign(fused).branch_of()

        order_of = {bp.id: bp.order for bp in frame.branch_points}
        assigned_prev = {}
        state.prev_orders = {}
        for bud in frame.buds:
            identity = branch_of[bud.id]
            if identity is None:
                continue
            tracks.setdefault(identity, []).append((frame.index, bud.id))
            state.history.setdefault(identity, []).append((frame.timestamp_days, bud.cx, bud.cy))
            assigned_prev[bud.id] = identity
            state.prev_orders[bud.id] = order_of[identity]
        state.previous = frame

        matched = sum(v is not None for v in branch_of.values())
        logger.debug(f"{seq.stem} frame {frame.index}: {matched}/{len(branch_of)} buds matched")
        results.append(FrameAssignment(frame=frame.index, assignments=branch_of))

    return TrackResult(
        stem=seq.stem,
        mode=mode,
        frames=results,
        tracks=TrackSet(tracks=dict(sorted(tracks.items()))),
    )


def track_dataset(
    sequences: Sequence[PlantSequence],
    settings: Settings,
    mode: Optional[str] = None,
    threads: int = 1,
    gate: Optional[FusionGate] = None,
    scorer: Optional[ScorerNet] = None,
    gate_params: Optional[GateParams] = None,
) -> List[TrackResult]:
    """Track every sequence; output order follows the input regardless of threads."""

    def run(seq: PlantSequence) -> TrackResult:
        return track_sequence(seq, settings, mode, gate, scorer, gate_params)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        return list(pool.map(run, sequences))


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------

def frame_labels(frame: Frame) -> Tuple[int, ...]:
    """Branch column of each bud's annotated order, UNMATCHED when the branch is absent."""
    column_of = {bp.order: j for j, bp in enumerate(frame.branch_points)}
    return tuple(column_of.get(b.gt_order, UNMATCHED) for b in frame.buds)


def gate_examples(sequences: Sequence[PlantSequence], settings: Settings) -> List[FusionExample]:
    """Analytic evidence with annotated orders and motion, one example per usable frame."""
    examples = []
    for seq in sequences:
        previous: Optional[Frame] = None
        for frame in sorted(seq.frames, key=lambda f: f.timestamp_days):
            if frame.sequence_break:
                previous = None
            if frame.buds and frame.branch_points:
                prev_orders = [b.gt_order for b in previous.buds] if previous is not None else []
                evidence = frame_evidence(frame, previous, prev_orders, settings)
                examples.append(FusionExample(
                    m_spatial=torch.as_tensor(np.asarray(evidence.m_spatial.values, dtype=float)),
                    m_tb=torch.as_tensor(np.asarray(evidence.m_tb.values, dtype=float)),
                    deviations=evidence.deviations,
                    has_history=torch.as_tensor(evidence.has_history, dtype=torch.float64),
                    labels=frame_labels(frame),
                ))
            previous = frame
    return examples
