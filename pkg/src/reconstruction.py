"""Branch geometry from tracked identities: B-spline curves, raster masks and skeletons."""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import splev, splprep
from skimage.draw import line as draw_line
from skimage.morphology import skeletonize as _thin

from .schemas import BranchSkeleton

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 1024
_NEIGHBOURS = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]])


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def polyline_length(polyline: np.ndarray) -> float:
    """Sum of consecutive segment lengths."""
    points = np.asarray(polyline, dtype=float).reshape(-1, 2)
    if len(points) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(points, axis=0).T)))


def _distinct(points: np.ndarray) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0.0, axis=1)
    return points[keep]


def fit_branch_curve(
    origin: Tuple[float, float],
    bud_positions: Sequence[Tuple[float, float]],
    samples: int = DEFAULT_SAMPLES,
) -> BranchSkeleton:
    """Interpolating B-spline through the branch point and chronological bud positions.

    The degree is cubic, reduced to (distinct points - 1) for short tracks.
    Consecutive repeated positions are collapsed before fitting.

    Args:
        origin: Branch point (x, y); the curve starts exactly here
        bud_positions: Bud centers of one identity in time order
        samples: Number of curve samples

    Returns:
        BranchSkeleton with the sampled polyline and its length; a single-point
        polyline flagged as degenerate when all points coincide
    """
    points = _distinct(np.vstack([np.asarray(origin, dtype=float).reshape(1, 2),
                                  np.asarray(bud_positions, dtype=float).reshape(-1, 2)]))
    if len(points) < 2:
        logger.warning(f"Degenerate branch curve at {tuple(points[0])}: all points coincide")
        return BranchSkeleton(polyline=points[:1].copy(), length=0.0, flagged=True)

    degree = min(3, len(points) - 1)
    tck, _ = splprep([points[:, 0], points[:, 1]], k=degree, s=0)
    xs, ys = splev(np.linspace(0.0, 1.0, samples), tck)
    curve = np.column_stack([xs, ys])
    curve[0] = points[0]
    curve[-1] = points[-1]
    return BranchSkeleton(polyline=curve, length=polyline_length(curve))


# ---------------------------------------------------------------------------
# Raster
# ---------------------------------------------------------------------------

def rasterize(polyline: np.ndarray, size: int = 224, stroke_px: int = 2) -> np.ndarray:
    """Draw a normalized polyline into a (size, size) boolean mask.

    Consecutive samples are joined with 8-connected Bresenham segments, then
    thickened with a stroke_px x stroke_px square.
    """
    mask = np.zeros((size, size), dtype=bool)
    points = np.asarray(polyline, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        return mask
    pixels = np.clip(np.rint(points * (size - 1)), 0, size - 1).astype(int)
    if len(pixels) == 1:
        mask[pixels[0, 1], pixels[0, 0]] = True
    for (c0, r0), (c1, r1) in zip(pixels, pixels[1:]):
        rr, cc = draw_line(r0, c0, r1, c1)
        mask[rr, cc] = True
    if stroke_px > 1:
        mask = ndimage.binary_dilation(mask, structure=np.ones((stroke_px, stroke_px), dtype=bool))
    return mask


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """One-pixel-wide connectivity-preserving skeleton (two-subiteration thinning)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return _thin(mask)


def skeleton_length(skeleton: np.ndarray) -> float:
    """Total edge weight of the 8-connected skeleton graph.

    Axis steps weigh 1 and diagonal steps sqrt(2); a diagonal step is skipped
    when the two pixels are already joined through a shared axis neighbour.
    """
    s = np.asarray(skeleton, dtype=bool)
    if s.size == 0:
        return 0.0
    horizontal = np.count_nonzero(s[:, :-1] & s[:, 1:])
    vertical = np.count_nonzero(s[:-1, :] & s[1:, :])
    main = s[:-1, :-1] & s[1:, 1:] & ~s[:-1, 1:] & ~s[1:, :-1]
    anti = s[:-1, 1:] & s[1:, :-1] & ~s[:-1, :-1] & ~s[1:, 1:]
    diagonal = np.count_nonzero(main) + np.count_nonzero(anti)
    return float(horizontal + vertical + math.sqrt(2.0) * diagonal)


def endpoints(skeleton: np.ndarray) -> List[Tuple[int, int]]:
    """(row, col) of skeleton pixels with at most one 8-neighbour."""
    s = np.asarray(skeleton, dtype=bool)
    counts = ndimage.convolve(s.astype(int), _NEIGHBOURS, mode="constant", cval=0)
    rows, cols = np.nonzero(s & (counts <= 1))
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def reconstruct_branch(
    origin: Tuple[float, float],
    bud_positions: Sequence[Tuple[float, float]],
    size: int = 224,
    stroke_px: int = 2,
    samples: int = DEFAULT_SAMPLES,
) -> Tuple[BranchSkeleton, np.ndarray]:
    """Curve, raster and thinning for one identity.

    Returns:
        (curve with raster endpoints attached, raster skeleton mask)
    """
    curve = fit_branch_curve(origin, bud_positions, samples)
    skeleton = skeletonize(rasterize(curve.polyline, size, stroke_px))
    return (
        BranchSkeleton(
            polyline=curve.polyline,
            length=curve.length,
            endpoints=endpoints(skeleton),
            flagged=curve.flagged,
        ),
        skeleton,
    )
