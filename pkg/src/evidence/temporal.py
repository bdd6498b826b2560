"""Cross-frame bud association, motion prediction and order-based branch scores.

The aggregation and gravitropism steps are written against torch tensors so the
learned scorer can backpropagate through them; the ScoreMatrix-level functions
wrap them for the analytic pipeline.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..config import TemporalParams
from ..core import SequenceError
from ..schemas import Bud, Frame, MotionState, ScoreMatrix

logger = logging.getLogger(__name__)

DIAGONAL = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# Motion
# ---------------------------------------------------------------------------

def estimate_motion(
    observations: Sequence[Tuple[float, float, float]], window: int = 3
) -> MotionState:
    """Finite-difference kinematics from the latest observations of one track.

    Args:
        observations: (timestamp_days, x, y) tuples in time order
        window: Number of most recent observations used (3 gives acceleration)

    Returns:
        MotionState anchored at the latest position; velocity needs two
        observations, acceleration three, otherwise they are zero

    Raises:
        SequenceError: If timestamps are not strictly increasing
    """
    obs = list(observations)
    for (t0, _, _), (t1, _, _) in zip(obs, obs[1:]):
        if not t1 > t0:
            raise SequenceError(f"motion timestamps must strictly increase: {t0} then {t1}")
    if not obs:
        return MotionState()
    recent = obs[-max(window, 1):]
    t_n, x_n, y_n = recent[-1]
    if len(recent) < 2:
        return MotionState(px=x_n, py=y_n)

    t_m, x_m, y_m = recent[-2]
    vx = (x_n - x_m) / (t_n - t_m)
    vy = (y_n - y_m) / (t_n - t_m)
    ax = ay = 0.0
    if len(recent) >= 3:
        t_l, x_l, y_l = recent[-3]
        vx_prev = (x_m - x_l) / (t_m - t_l)
        vy_prev = (y_m - y_l) / (t_m - t_l)
        # velocities live at interval midpoints
        span = 0.5 * (t_n - t_l)
        ax = (vx - vx_prev) / span
        ay = (vy - vy_prev) / span
    return MotionState(px=x_n, py=y_n, vx=vx, vy=vy, ax=ax, ay=ay)


def predict_position(m: MotionState, dt_days: float) -> Tuple[float, float]:
    """Constant-acceleration prediction p + v dt + a dt^2 / 2."""
    half = 0.5 * dt_days * dt_days
    return (m.px + m.vx * dt_days + m.ax * half, m.py + m.vy * dt_days + m.ay * half)


def _anchored(prev: Bud, motion: Optional[MotionState]) -> MotionState:
    base = motion if motion is not None else prev.motion
    return base.model_copy(update={"px": prev.cx, "py": prev.cy})


def temporal_score(
    current: Bud, prev: Bud, motion: Optional[MotionState], dt: float, params: TemporalParams
) -> float:
    """Log score that ``current`` continues ``prev`` after ``dt`` days.

    The prediction starts from the previous bud's center and uses the
    velocity/acceleration of ``motion`` (the bud's annotated motion when None).
    """
    px, py = predict_position(_anchored(prev, motion), dt)
    offset = math.hypot(current.cx - px, current.cy - py) / (params.sigma_m * DIAGONAL)
    return -0.5 * offset * offset - abs(math.log(current.area / prev.area))


def temporal_score_matrix(
    current: Frame,
    previous: Frame,
    params: TemporalParams,
    motions: Optional[Dict[int, MotionState]] = None,
) -> ScoreMatrix:
    """Raw (pre-temperature) scores, current buds x previous buds.

    Args:
        current: Frame at t
        previous: Frame at t-1
        params: Temporal parameters
        motions: previous bud id -> MotionState; defaults to each bud's annotated motion

    Returns:
        ScoreMatrix; flagged and empty when either frame has no buds
    """
    row_ids = tuple(b.id for b in current.buds)
    col_ids = tuple(b.id for b in previous.buds)
    if not row_ids or not col_ids:
        logger.debug(f"Frame {current.index}: empty temporal matrix, spatial fallback downstream")
        return ScoreMatrix.empty(row_ids, col_ids)
    dt = current.timestamp_days - previous.timestamp_days
    motions = motions or {}
    predicted = np.array(
        [predict_position(_anchored(b, motions.get(b.id)), dt) for b in previous.buds]
    )
    cur_xy = np.array([[b.cx, b.cy] for b in current.buds])
    offset = np.hypot(
        cur_xy[:, None, 0] - predicted[None, :, 0], cur_xy[:, None, 1] - predicted[None, :, 1]
    ) / (params.sigma_m * DIAGONAL)
    cur_area = np.array([b.area for b in current.buds])
    prev_area = np.array([b.area for b in previous.buds])
    size_term = np.abs(np.log(cur_area[:, None] / prev_area[None, :]))
    return ScoreMatrix(values=-0.5 * offset**2 - size_term, row_ids=row_ids, col_ids=col_ids)


# ---------------------------------------------------------------------------
# Order-based aggregation (tensor core)
# ---------------------------------------------------------------------------

def order_groups(
    prev_bud_orders: Sequence[Optional[int]], branch_orders: Sequence[int]
) -> List[List[int]]:
    """S_j: indices of previous buds whose order equals branch j's order."""
    return [
        [k for k, order in enumerate(prev_bud_orders) if order is not None and order == b_order]
        for b_order in branch_orders
    ]


def aggregate_by_order(
    m_temporal: torch.Tensor, groups: Sequence[Sequence[int]], beta_absent: float
) -> torch.Tensor:
    """LSE over each order group minus log|S_j|; beta_absent for empty groups."""
    n_rows = m_temporal.shape[0]
    columns = []
    for group in groups:
        if group:
            idx = torch.as_tensor(list(group), dtype=torch.long)
            columns.append(
                torch.logsumexp(m_temporal.index_select(1, idx), dim=1) - math.log(len(group))
            )
        else:
            columns.append(m_temporal.new_full((n_rows,), float(beta_absent)))
    if not columns:
        return m_temporal.new_zeros((n_rows, 0))
    return torch.stack(columns, dim=1)


def selected_deviations(
    m_temporal: torch.Tensor,
    dy: torch.Tensor,
    dy_global: float,
    groups: Sequence[Sequence[int]],
) -> torch.Tensor:
    """Delta-y of the argmax previous bud of each group, minus the global uplift.

    Args:
        m_temporal: (M, N) temporal scores; only used to pick k*
        dy: (M, N) vertical displacements y_i - y_k
        dy_global: Global uplift between the two frames
        groups: Order groups S_j

    Returns:
        (M, K) deviations, NaN where S_j is empty
    """
    n_rows = m_temporal.shape[0]
    out = torch.full((n_rows, len(groups)), float("nan"), dtype=dy.dtype)
    if n_rows == 0:
        return out
    scores = m_temporal.detach()
    for j, group in enumerate(groups):
        if not group:
            continue
        idx = torch.as_tensor(list(group), dtype=torch.long)
        best = idx[torch.argmax(scores.index_select(1, idx), dim=1)]
        out[:, j] = dy.gather(1, best[:, None]).squeeze(1) - dy_global
    return out


def gravitropism_penalty(
    m_tb: torch.Tensor, deviations: torch.Tensor, lambda_vert: float, eps_tol: float
) -> torch.Tensor:
    """Subtract lambda * max(0, |deviation| - eps) where a deviation exists."""
    present = ~torch.isnan(deviations)
    excess = torch.clamp(torch.nan_to_num(deviations).abs() - eps_tol, min=0.0)
    return torch.where(present, m_tb - lambda_vert * excess, m_tb)


# ---------------------------------------------------------------------------
# ScoreMatrix-level operations
# ---------------------------------------------------------------------------

def temporal_to_branch(
    m_temporal: ScoreMatrix,
    prev_bud_orders: Sequence[Optional[int]],
    branch_orders: Sequence[int],
    params: TemporalParams,
    branch_ids: Optional[Sequence[int]] = None,
) -> ScoreMatrix:
    """Convert bud-to-bud scores into bud-to-branch scores by order aggregation.

    Args:
        m_temporal: Current x previous bud scores
        prev_bud_orders: Order carried by each previous bud (None excludes it)
        branch_orders: Order of each current branch point
        params: Temporal parameters (beta_absent)
        branch_ids: Column ids of the result; defaults to the orders

    Returns:
        ScoreMatrix shaped current buds x branches
    """
    groups = order_groups(prev_bud_orders, branch_orders)
    values = torch.as_tensor(np.asarray(m_temporal.values, dtype=float).reshape(
        len(m_temporal.row_ids), len(prev_bud_orders)
    ))
    aggregated = aggregate_by_order(values, groups, params.beta_absent)
    return ScoreMatrix(
        values=aggregated.numpy(),
        row_ids=m_temporal.row_ids,
        col_ids=tuple(branch_ids if branch_ids is not None else branch_orders),
    )


def estimate_global_uplift(current: Frame, previous: Frame, topk: int) -> float:
    """Mean y of the topk topmost current buds minus that of the previous buds."""
    if not current.buds or not previous.buds:
        return 0.0
    cur = sorted(b.cy for b in current.buds)[:topk]
    prev = sorted(b.cy for b in previous.buds)[:topk]
    return float(np.mean(cur) - np.mean(prev))


def vertical_displacements(current_buds: Sequence[Bud], previous_buds: Sequence[Bud]) -> np.ndarray:
    """(M, N) matrix of y_i(t) - y_k(t-1)."""
    cur = np.array([b.cy for b in current_buds], dtype=float)
    prev = np.array([b.cy for b in previous_buds], dtype=float)
    return cur[:, None] - prev[None, :]


def apply_gravitropism_penalty(
    m_tb: ScoreMatrix,
    m_temporal: ScoreMatrix,
    dy_global: float,
    current_buds: Sequence[Bud],
    previous_buds: Sequence[Bud],
    groups: Sequence[Sequence[int]],
    params: TemporalParams,
) -> ScoreMatrix:
    """Penalize bud-to-branch scores whose driving match deviates from the global uplift.

    For each pair with a non-empty order group, k* is the previous bud with
    the largest temporal score; the score drops by
    lambda_vert * max(0, |dy_ik* - dy_global| - eps_tol).
    """
    if m_tb.values.size == 0:
        return m_tb
    dy = torch.as_tensor(vertical_displacements(current_buds, previous_buds))
    deviations = selected_deviations(
        torch.as_tensor(np.asarray(m_temporal.values, dtype=float)), dy, dy_global, groups
    )
    penalized = gravitropism_penalty(
        torch.as_tensor(m_tb.values, dtype=torch.float64), deviations,
        params.lambda_vert, params.eps_tol,
    )
    return ScoreMatrix(values=penalized.numpy(), row_ids=m_tb.row_ids, col_ids=m_tb.col_ids)
