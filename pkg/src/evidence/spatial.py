"""Current-frame geometric compatibility between buds and branch points."""

import logging
import math
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..config import SpatialParams
from ..schemas import BranchPoint, Bud, Frame, ScoreMatrix

logger = logging.getLogger(__name__)

DIAGONAL = math.sqrt(2.0)


class GeomFeatures(BaseModel):
    """Geometric descriptors of one bud/branch-point pair."""

    model_config = ConfigDict(frozen=True)

    dpx: float
    dpy: float
    dist: float
    align: float
    aspect: float
    area: float


def pairwise_geometry(
    bud_xy: np.ndarray, bp_xy: np.ndarray, theta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Relative position, diagonal-normalized distance and angular deviation for all pairs.

    Args:
        bud_xy: (M, 2) bud centers
        bp_xy: (K, 2) branch point positions
        theta: (K,) branch orientations

    Returns:
        dpx, dpy, dist, align arrays of shape (M, K); align is 0 for coincident pairs
    """
    dpx = bud_xy[:, None, 0] - bp_xy[None, :, 0]
    dpy = bud_xy[:, None, 1] - bp_xy[None, :, 1]
    dist = np.minimum(np.hypot(dpx, dpy) / DIAGONAL, 1.0)
    cos_t = np.cos(theta)[None, :]
    sin_t = np.sin(theta)[None, :]
    dot = dpx * cos_t + dpy * sin_t
    cross = np.abs(dpx * sin_t - dpy * cos_t)
    align = np.arctan2(cross, dot)
    align = np.where((dpx == 0.0) & (dpy == 0.0), 0.0, align)
    return dpx, dpy, dist, align


def geometric_features(bud: Bud, bp: BranchPoint) -> GeomFeatures:
    """Descriptors for one pair: relative position, distance, alignment, box geometry."""
    dpx, dpy, dist, align = pairwise_geometry(
        np.array([[bud.cx, bud.cy]]), np.array([[bp.x, bp.y]]), np.array([bp.theta])
    )
    return GeomFeatures(
        dpx=float(dpx[0, 0]),
        dpy=float(dpy[0, 0]),
        dist=float(dist[0, 0]),
        align=float(align[0, 0]),
        aspect=bud.w / bud.h,
        area=bud.w * bud.h,
    )


def _score(dist, align, params: SpatialParams):
    return -0.5 * (dist / params.sigma_d) ** 2 - 0.5 * (align / params.sigma_a) ** 2


def spatial_score(feats: GeomFeatures, params: SpatialParams) -> float:
    """Gaussian-style log score; 0 at a perfect on-ray, zero-distance match."""
    return float(_score(feats.dist, feats.align, params))


def spatial_score_matrix(frame: Frame, params: SpatialParams) -> ScoreMatrix:
    """Raw (pre-temperature) spatial scores, buds x branch points.

    Returns:
        ScoreMatrix with rows = bud ids, cols = branch ids; flagged and empty
        when the frame has no buds or no branch points
    """
    row_ids = tuple(b.id for b in frame.buds)
    col_ids = tuple(bp.id for bp in frame.branch_points)
    if not row_ids or not col_ids:
        logger.debug(f"Frame {frame.index}: empty spatial matrix ({len(row_ids)}x{len(col_ids)})")
        return ScoreMatrix.empty(row_ids, col_ids)
    bud_xy = np.array([[b.cx, b.cy] for b in frame.buds], dtype=float)
    bp_xy = np.array([[bp.x, bp.y] for bp in frame.branch_points], dtype=float)
    theta = np.array([bp.theta for bp in frame.branch_points], dtype=float)
    _, _, dist, align = pairwise_geometry(bud_xy, bp_xy, theta)
    return ScoreMatrix(values=_score(dist, align, params), row_ids=row_ids, col_ids=col_ids)


def count_ambiguous_pairs(frame: Frame, params: SpatialParams) -> int:
    """Number of bud pairs closer than the ambiguity radius."""
    if len(frame.buds) < 2:
        return 0
    xy = np.array([[b.cx, b.cy] for b in frame.buds], dtype=float)
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    upper = np.triu_indices(len(xy), k=1)
    return int(np.sum(d[upper] < params.ambiguity_radius))
