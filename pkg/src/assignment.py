"""One-to-one bud-to-branch assignment on fused scores, with an exhaustive oracle."""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BranchTrackError
from .schemas import MASKED, UNMATCHED, Assignment, ScoreMatrix

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_ROWS = 8


class AssignmentError(BranchTrackError):
    """Raised when an assignment problem cannot be solved as requested."""


def _split(scores: ScoreMatrix, unmatched_logit: Optional[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Branch-column body and the per-row unmatched score."""
    values = np.asarray(scores.values, dtype=float)
    n_rows = values.shape[0]
    if scores.has_unmatched:
        return values[:, :-1], values[:, -1].copy()
    fallback = MASKED if unmatched_logit is None else unmatched_logit
    return values, np.full(n_rows, fallback, dtype=float)


def hungarian_assign(scores: ScoreMatrix, unmatched_logit: Optional[float] = None) -> Assignment:
    """Globally optimal one-to-one assignment maximizing the total score.

    Each bud may take its own unmatched option: the unmatched column of
    ``scores`` when present, else ``unmatched_logit``, else the MASKED
    sentinel. The problem is solved as a rectangular minimum-cost assignment
    with one dummy column per bud.

    Args:
        scores: Bud x branch scores, optionally with an unmatched column
        unmatched_logit: Unmatched score when the matrix has no unmatched column

    Returns:
        Assignment with a column index or UNMATCHED per bud and the total score
    """
    body, unmatched = _split(scores, unmatched_logit)
    n_rows, n_cols = body.shape
    if n_rows == 0:
        return Assignment(columns=(), total=0.0, row_ids=scores.row_ids, col_ids=scores.col_ids)

    dummy = np.full((n_rows, n_rows), np.inf)
    np.fill_diagonal(dummy, -unmatched)
    cost = np.hstack([-body, dummy])
    rows, cols = linear_sum_assignment(cost)

    columns = [UNMATCHED] * n_rows
    total = 0.0
    for r, c in zip(rows, cols):
        if c < n_cols:
            columns[r] = int(c)
            total += body[r, c]
        else:
            total += unmatched[r]
    return Assignment(
        columns=tuple(columns), total=float(total), row_ids=scores.row_ids, col_ids=scores.col_ids
    )


def brute_force_assign(scores: ScoreMatrix, unmatched_logit: Optional[float] = None) -> Assignment:
    """Exhaustive optimum over all one-to-one assignments including unmatched options.

    Raises:
        AssignmentError: If the matrix has more than BRUTE_FORCE_MAX_ROWS rows
    """
    body, unmatched = _split(scores, unmatched_logit)
    n_rows, n_cols = body.shape
    if n_rows > BRUTE_FORCE_MAX_ROWS:
        raise AssignmentError(f"brute force limited to {BRUTE_FORCE_MAX_ROWS} rows, got {n_rows}")

    best_total = -np.inf
    best: List[int] = [UNMATCHED] * n_rows
    current: List[int] = []
    used = [False] * n_cols

    def search(row: int, running: float) -> None:
        nonlocal best_total, best
        if row == n_rows:
            if running > best_total:
                best_total = running
                best = list(current)
            return
        for c in range(n_cols):
            if not used[c]:
                used[c] = True
                current.append(c)
                search(row + 1, running + body[row, c])
                current.pop()
                used[c] = False
        current.append(UNMATCHED)
        search(row + 1, running + unmatched[row])
        current.pop()

    search(0, 0.0)
    return Assignment(
        columns=tuple(best),
        total=float(best_total) if n_rows else 0.0,
        row_ids=scores.row_ids,
        col_ids=scores.col_ids,
    )
