"""Pydantic schemas for branch points, buds, frames and tracking results.

Coordinates are normalized to [0, 1] with y growing downward (image
convention), so upward growth means decreasing y.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

# Sentinel for disallowed bud/branch pairs in a score matrix.
MASKED = -1e9
# Assignment.columns entry for a bud bound to no branch.
UNMATCHED = -1


class _Record(BaseModel):
    """Immutable schema record; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class MotionState(_Record):
    """Per-bud kinematics in normalized units per day."""

    px: float = Field(default=0.0, description="Previous x position")
    py: float = Field(default=0.0, description="Previous y position")
    vx: float = Field(default=0.0, description="Velocity x (units/day)")
    vy: float = Field(default=0.0, description="Velocity y (units/day)")
    ax: float = Field(default=0.0, description="Acceleration x (units/day^2)")
    ay: float = Field(default=0.0, description="Acceleration y (units/day^2)")

    @property
    def position(self) -> Tuple[float, float]:
        return (self.px, self.py)


class BranchPoint(_Record):
    """Junction where a primary branch attaches to the stem."""

    id: int = Field(description="Stable branch identity")
    order: int = Field(ge=1, description="Botanical rank counted from the bottom of the stem")
    x: float = Field(description="Normalized x")
    y: float = Field(description="Normalized y (grows downward)")
    theta: float = Field(description="Branch orientation in radians, (-pi, pi]")
    first_seen: int = Field(ge=0, description="Frame index of first appearance")
    reserved: float = Field(default=0.0, description="Unused slot of the stored branch vector")


class Bud(_Record):
    """Floral bud detection at a branch tip."""

    id: int = Field(description="Per-frame bud identifier")
    gt_order: Optional[int] = Field(
        default=None, ge=1, description="Annotated branch order; never a network input"
    )
    cx: float
    cy: float
    w: float
    h: float
    frame: int = Field(ge=0)
    motion: MotionState = Field(
        default_factory=MotionState, description="Annotated finite-difference kinematics"
    )

    @property
    def position(self) -> Tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.w * self.h


class Frame(_Record):
    """One annotated time point of a plant-view sequence."""

    index: int = Field(ge=0)
    timestamp_days: float = Field(ge=0.0)
    branch_points: List[BranchPoint] = Field(default_factory=list)
    buds: List[Bud] = Field(default_factory=list)
    masks: Optional[Dict[int, "RLEMask"]] = Field(
        default=None, description="Per-branch run-length encoded masks keyed by branch id"
    )
    sequence_break: bool = Field(
        default=False, description="No temporal evidence crosses into this frame"
    )

    def bud_by_id(self, bud_id: int) -> Bud:
        for bud in self.buds:
            if bud.id == bud_id:
                return bud
        raise KeyError(f"frame {self.index} has no bud {bud_id}")


class RLEMask(_Record):
    """Row-major run-length encoded binary mask; runs alternate starting with zeros."""

    size: Tuple[int, int] = Field(description="(height, width)")
    counts: List[int]


class TrackSet(_Record):
    """Identity trajectories: identity id -> ordered (frame index, bud id) pairs."""

    tracks: Dict[int, List[Tuple[int, int]]] = Field(default_factory=dict)

    def frames_of(self, identity: int) -> List[int]:
        return [f for f, _ in self.tracks.get(identity, [])]

    def detections_at(self, frame_index: int) -> Dict[int, int]:
        """identity -> bud id for every track present in a frame."""
        found = {}
        for identity, entries in self.tracks.items():
            for f, bud_id in entries:
                if f == frame_index:
                    found[identity] = bud_id
                    break
        return found


class PlantSequence(_Record):
    """Dataset document: one plant seen from one view over time."""

    plant_id: int
    view_angle: float = Field(default=0.0, description="Camera view angle in degrees")
    frames: List[Frame]
    gt_tracks: Optional[TrackSet] = Field(default=None, description="Ground-truth identities")

    @property
    def stem(self) -> str:
        return f"plant_{self.plant_id:04d}_view_{int(round(self.view_angle)):03d}"


class Diagnostic(_Record):
    """One invariant violation found in a sequence."""

    kind: str = Field(description="range | timestamp | duplicate-order | dimension")
    frame: Optional[int] = None
    entity: Optional[str] = None
    message: str


Frame.model_rebuild()


@dataclass(frozen=True)
class ScoreMatrix:
    """Log-domain affinity matrix between current buds and branches (or previous buds).

    ``values`` has one row per entry of ``row_ids`` and one column per entry of
    ``col_ids``; when ``has_unmatched`` is set, one extra last column holds the
    unmatched option. ``flagged`` marks an empty result produced from empty inputs.
    """

    values: np.ndarray
    row_ids: Tuple[int, ...] = ()
    col_ids: Tuple[int, ...] = ()
    has_unmatched: bool = False
    flagged: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def n_cols(self) -> int:
        """Number of real (non-unmatched) columns."""
        return self.values.shape[1] - (1 if self.has_unmatched else 0)

    @property
    def body(self) -> np.ndarray:
        """Values without the unmatched column."""
        return self.values[:, : self.n_cols]

    @classmethod
    def empty(cls, row_ids=(), col_ids=()) -> "ScoreMatrix":
        return cls(
            values=np.zeros((len(row_ids), len(col_ids))),
            row_ids=tuple(row_ids),
            col_ids=tuple(col_ids),
            flagged=True,
        )


@dataclass(frozen=True)
class Assignment:
    """Per-bud assignment result; ``columns[i]`` is a column index or UNMATCHED."""

    columns: Tuple[int, ...]
    total: float = 0.0
    row_ids: Tuple[int, ...] = ()
    col_ids: Tuple[int, ...] = ()

    def branch_of(self) -> Dict[int, Optional[int]]:
        """bud id -> branch id (None when unmatched)."""
        return {
            bud_id: (None if col == UNMATCHED else self.col_ids[col])
            for bud_id, col in zip(self.row_ids, self.columns)
        }

    def matched_pairs(self) -> List[Tuple[int, int]]:
        return [(i, c) for i, c in enumerate(self.columns) if c != UNMATCHED]


@dataclass(frozen=True)
class BranchSkeleton:
    """Reconstructed branch geometry."""

    polyline: np.ndarray
    length: float
    endpoints: List[Tuple[int, int]] = field(default_factory=list)
    flagged: bool = False


def bud_vector(bud: Bud) -> List[float]:
    """Stored 11-dim bud vector [order, cx, cy, w, h, px, py, vx, vy, ax, ay]."""
    m = bud.motion
    order = float(bud.gt_order) if bud.gt_order is not None else 0.0
    return [order, bud.cx, bud.cy, bud.w, bud.h, m.px, m.py, m.vx, m.vy, m.ax, m.ay]


def network_vector(bud: Bud) -> List[float]:
    """Bud vector with the order slot stripped (the only form networks see)."""
    return bud_vector(bud)[1:]


def branch_vector(bp: BranchPoint) -> List[float]:
    """Stored 6-dim branch vector [order, x, y, sin(theta), cos(theta), reserved]."""
    return [float(bp.order), bp.x, bp.y, math.sin(bp.theta), math.cos(bp.theta), bp.reserved]
