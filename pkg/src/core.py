"""Sequence validation, chronological splitting and the shared error hierarchy."""

import math
from collections import Counter
from typing import List, Sequence, Tuple

from .schemas import Diagnostic, Frame, PlantSequence


class BranchTrackError(Exception):
    """Base class for all branch tracker errors."""


class SequenceError(BranchTrackError):
    """Raised when a frame sequence cannot be used for the requested operation."""

    def __init__(self, message: str, n_frames: int = 0):
        super().__init__(message)
        self.n_frames = n_frames


class TrainingDivergedError(BranchTrackError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, epoch: int, losses: List[float]):
        super().__init__(message)
        self.epoch = epoch
        self.losses = losses


PHASES = ("early", "mid", "late")


def _in_unit(value: float) -> bool:
    return math.isfinite(value) and 0.0 <= value <= 1.0


def validate_sequence(frames: Sequence[Frame]) -> List[Diagnostic]:
    """Collect every invariant violation in a frame sequence.

    Checks coordinate ranges, orientation range, box sizes, strictly increasing
    timestamps, unique branch orders and bud ids per frame, and finite motion.

    Args:
        frames: Frames in sequence order

    Returns:
        List of diagnostics; empty means the sequence is valid
    """
    problems: List[Diagnostic] = []

    def report(kind: str, frame: int, entity: str, message: str) -> None:
        problems.append(Diagnostic(kind=kind, frame=frame, entity=entity, message=message))

    previous_ts = None
    for frame in frames:
        if previous_ts is not None and not frame.timestamp_days > previous_ts:
            report(
                "timestamp", frame.index, None,
                f"timestamp {frame.timestamp_days} does not increase over {previous_ts}",
            )
        previous_ts = frame.timestamp_days

        for bp in frame.branch_points:
            name = f"branch {bp.id}"
            if not (_in_unit(bp.x) and _in_unit(bp.y)):
                report("range", frame.index, name, f"position ({bp.x}, {bp.y}) outside [0,1]")
            if not (math.isfinite(bp.theta) and -math.pi < bp.theta <= math.pi):
                report("range", frame.index, name, f"theta {bp.theta} outside (-pi, pi]")

        orders = Counter(bp.order for bp in frame.branch_points)
        for order, count in sorted(orders.items()):
            if count > 1:
                report(
                    "duplicate-order", frame.index, f"order {order}",
                    f"{count} branch points share order {order}",
                )

        bud_ids = Counter(bud.id for bud in frame.buds)
        for bud_id, count in sorted(bud_ids.items()):
            if count > 1:
                report("duplicate-id", frame.index, f"bud {bud_id}", f"bud id repeated {count} times")

        for bud in frame.buds:
            name = f"bud {bud.id}"
            if not (_in_unit(bud.cx) and _in_unit(bud.cy)):
                report("range", frame.index, name, f"center ({bud.cx}, {bud.cy}) outside [0,1]")
            if not (0.0 < bud.w <= 1.0 and 0.0 < bud.h <= 1.0):
                report("range", frame.index, name, f"box size ({bud.w}, {bud.h}) outside (0,1]")
            if bud.frame != frame.index:
                report("frame", frame.index, name, f"bud claims frame {bud.frame}")
            m = bud.motion
            if not all(math.isfinite(v) for v in (m.px, m.py, m.vx, m.vy, m.ax, m.ay)):
                report("motion", frame.index, name, "non-finite motion state")

    return problems


def partition_counts(n: int, ratios: Sequence[float], min_each: int = 0) -> List[int]:
    """Split ``n`` items by ratio: floor all but the last share, remainder to the last.

    When ``min_each`` is set, empty parts borrow from the currently largest part.
    """
    counts = [int(math.floor(n * r + 1e-9)) for r in ratios[:-1]]
    counts.append(n - sum(counts))
    for i in range(len(counts)):
        while counts[i] < min_each:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            if counts[donor] <= min_each:
                break
            counts[donor] -= 1
            counts[i] += 1
    return counts


def chronological_split(
    frames: Sequence[Frame],
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> Tuple[List[Frame], List[Frame], List[Frame]]:
    """Split one sequence into contiguous train/val/test blocks in time order.

    Args:
        frames: Frames of a single plant-view sequence
        ratios: Shares of (train, val, test); each > 0, summing to 1

    Returns:
        (train, val, test) frame lists

    Raises:
        SequenceError: If ratios are invalid or the sequence has fewer than 3 frames
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SequenceError(f"split ratios must be three positive shares summing to 1: {ratios}")
    n = len(frames)
    if n < 3:
        raise SequenceError(f"need at least 3 frames to split, got {n}", n_frames=n)
    ordered = sorted(frames, key=lambda f: f.timestamp_days)
    n_train, n_val, _ = partition_counts(n, ratios, min_each=1)
    return (
        ordered[:n_train],
        ordered[n_train:n_train + n_val],
        ordered[n_train + n_val:],
    )


def split_sequences(
    sequences: Sequence[PlantSequence],
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> Tuple[List[PlantSequence], List[PlantSequence], List[PlantSequence]]:
    """Apply chronological_split per plant-view sequence."""
    parts: Tuple[List[PlantSequence], ...] = ([], [], [])
    for seq in sequences:
        for bucket, frames in zip(parts, chronological_split(seq.frames, ratios)):
            bucket.append(seq.model_copy(update={"frames": frames}))
    return parts


def phase_of_frames(n: int, fractions: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> List[str]:
    """Growth phase label (early/mid/late) for each of ``n`` frame positions."""
    labels: List[str] = []
    for phase, count in zip(PHASES, partition_counts(n, fractions)):
        labels.extend([phase] * count)
    return labels
