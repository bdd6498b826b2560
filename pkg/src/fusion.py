"""Per-branch gating of spatial and temporal evidence, fused logits and the training loss.

Temperatures are applied exactly once, here: decoder and analytic scores
arrive raw.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from .config import GateParams
from .core import BranchTrackError, TrainingDivergedError
from .schemas import UNMATCHED, ScoreMatrix

logger = logging.getLogger(__name__)

DIAGONAL = math.sqrt(2.0)


class FusionError(BranchTrackError):
    """Raised on inconsistent shapes or labels in fusion."""


class GatingFeatures(BaseModel):
    """Evidence statistics h_j of one branch column."""

    model_config = ConfigDict(frozen=True)

    mu_spatial: float
    mu_temporal: float
    sigma_vert: float
    has_history: int

    def as_list(self) -> List[float]:
        return [self.mu_spatial, self.mu_temporal, self.sigma_vert, float(self.has_history)]


@dataclass(frozen=True)
class GateWeights:
    """Per-branch spatial weights; temporal weights are their complement."""

    spatial: np.ndarray

    @property
    def temporal(self) -> np.ndarray:
        return 1.0 - self.spatial


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------

def fixed_gate(has_history: Union[bool, Sequence[bool]], params: GateParams) -> GateWeights:
    """Heuristic gate: alpha_new for branches without history, alpha_exist otherwise."""
    flags = np.atleast_1d(np.asarray(has_history, dtype=bool))
    return GateWeights(spatial=np.where(flags, params.alpha_exist, params.alpha_new).astype(float))


class FusionGate(nn.Module):
    """Learnable gate MLP (4 -> hidden -> 1, tanh) plus the unmatched logit."""

    def __init__(self, params: GateParams, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.alpha_min = params.alpha_min
        self.alpha_max = params.alpha_max
        self.hidden = nn.Linear(4, params.hidden, dtype=torch.float64)
        self.out = nn.Linear(params.hidden, 1, dtype=torch.float64)
        self.unmatched = nn.Parameter(torch.tensor(params.unmatched_logit, dtype=torch.float64))
        with torch.no_grad():
            # replicate the fixed gate for existing branches at initialization
            self.hidden.weight.normal_(0.0, 1e-2, generator=generator)
            self.hidden.bias.zero_()
            self.out.weight.zero_()
            self.out.bias.fill_(math.log(params.alpha_exist / (1.0 - params.alpha_exist)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(K, 4) gating features -> (K,) clamped spatial weights."""
        raw = torch.sigmoid(self.out(torch.tanh(self.hidden(h)))).squeeze(-1)
        return torch.clamp(raw, self.alpha_min, self.alpha_max)


def learned_gate(h: Union[GatingFeatures, torch.Tensor], gate: FusionGate) -> GateWeights:
    """Spatial weights from the learnable gate, clamped to [alpha_min, alpha_max]."""
    if isinstance(h, GatingFeatures):
        h = torch.tensor([h.as_list()], dtype=torch.float64)
    with torch.no_grad():
        return GateWeights(spatial=gate(h).numpy().copy())


def gating_feature_tensor(
    m_spatial: torch.Tensor,
    m_tb: torch.Tensor,
    deviations: torch.Tensor,
    has_history: torch.Tensor,
) -> torch.Tensor:
    """Stack h_j for every branch column.

    Args:
        m_spatial: (M, K) raw spatial scores
        m_tb: (M, K) temporal-to-branch scores
        deviations: (M, K) vertical deviations, NaN where the branch lacks history
        has_history: (K,) 0/1 indicators

    Returns:
        (K, 4) tensor [mu_spatial, mu_temporal, sigma_vert, has_history]
    """
    if m_spatial.shape != m_tb.shape:
        raise FusionError(f"score shapes differ: {tuple(m_spatial.shape)} vs {tuple(m_tb.shape)}")
    if m_spatial.shape[0] == 0:
        raise FusionError("gating features need at least one bud row")
    dev = deviations.detach()
    present = ~torch.isnan(dev)
    count = present.sum(dim=0)
    filled = torch.nan_to_num(dev)
    mean = filled.sum(dim=0) / count.clamp(min=1)
    var = (torch.where(present, filled - mean, torch.zeros_like(filled)) ** 2).sum(dim=0)
    sigma = torch.sqrt(var / count.clamp(min=1)) / DIAGONAL
    history = has_history.to(m_spatial.dtype)
    sigma = torch.where(history > 0, sigma, torch.zeros_like(sigma))
    return torch.stack([m_spatial.mean(dim=0), m_tb.mean(dim=0), sigma, history], dim=1)


def gating_features(
    j: int,
    m_spatial: ScoreMatrix,
    m_tb: ScoreMatrix,
    vertical_deviations: Sequence[Optional[float]],
    has_history: bool,
) -> GatingFeatures:
    """Evidence statistics of branch column ``j``.

    Args:
        j: Branch column
        m_spatial: Raw spatial scores
        m_tb: Temporal-to-branch scores
        vertical_deviations: Per-bud dy_ik* - dy_global for this column (None/NaN if absent)
        has_history: Whether the branch's order group is non-empty

    Returns:
        GatingFeatures; sigma_vert is the population standard deviation of the
        deviations divided by the diagonal sqrt(2), and 0 without history

    Raises:
        FusionError: If the column is empty or the inputs disagree in rows
    """
    ms = torch.as_tensor(np.asarray(m_spatial.body, dtype=float))
    mt = torch.as_tensor(np.asarray(m_tb.body, dtype=float))
    if ms.shape[0] == 0:
        raise FusionError(f"column {j} is empty")
    column = [math.nan if d is None else float(d) for d in vertical_deviations]
    if len(column) != ms.shape[0]:
        raise FusionError(f"{len(column)} deviations for {ms.shape[0]} buds")
    dev = torch.full(ms.shape, math.nan, dtype=torch.float64)
    dev[:, j] = torch.as_tensor(column, dtype=torch.float64)
    flags = torch.zeros(ms.shape[1], dtype=torch.float64)
    flags[j] = 1.0 if has_history else 0.0
    row = gating_feature_tensor(ms, mt, dev, flags)[j]
    return GatingFeatures(
        mu_spatial=float(row[0]), mu_temporal=float(row[1]),
        sigma_vert=float(row[2]), has_history=int(has_history),
    )


# ---------------------------------------------------------------------------
# Fusion and loss
# ---------------------------------------------------------------------------

def fuse_tensors(
    m_spatial: torch.Tensor,
    m_tb: torch.Tensor,
    w_spatial: torch.Tensor,
    tau_spatial: float,
    tau_temporal: float,
    unmatched_logit: Union[float, torch.Tensor],
) -> torch.Tensor:
    """Temperature-scaled convex combination with a trailing unmatched column."""
    if m_spatial.shape != m_tb.shape:
        raise FusionError(f"score shapes differ: {tuple(m_spatial.shape)} vs {tuple(m_tb.shape)}")
    if w_spatial.shape[0] != m_spatial.shape[1]:
        raise FusionError(f"{w_spatial.shape[0]} weights for {m_spatial.shape[1]} columns")
    fused = w_spatial * m_spatial / tau_spatial + (1.0 - w_spatial) * m_tb / tau_temporal
    unmatched = torch.as_tensor(unmatched_logit, dtype=fused.dtype).reshape(1, 1)
    return torch.cat([fused, unmatched.expand(fused.shape[0], 1)], dim=1)


def fuse(
    m_spatial: ScoreMatrix,
    m_tb: ScoreMatrix,
    weights: GateWeights,
    params: GateParams,
    unmatched_logit: Optional[float] = None,
) -> ScoreMatrix:
    """Fused bud x branch logits with the unmatched column appended.

    Adding a constant c to a row of both inputs moves column j of that row by
    c * (w_j / tau_spatial + (1 - w_j) / tau_temporal). The row argmax over
    branches is therefore kept only when that coefficient is the same for every
    column, i.e. when the temperatures are equal or the weights are uniform.
    The unmatched column never moves.

    Raises:
        FusionError: On shape mismatch between the matrices or the weights
    """
    if m_spatial.values.shape != m_tb.values.shape:
        raise FusionError(f"score shapes differ: {m_spatial.values.shape} vs {m_tb.values.shape}")
    fused = fuse_tensors(
        torch.as_tensor(np.asarray(m_spatial.values, dtype=float)),
        torch.as_tensor(np.asarray(m_tb.values, dtype=float)),
        torch.as_tensor(np.asarray(weights.spatial, dtype=float)),
        params.tau_spatial,
        params.tau_temporal,
        params.unmatched_logit if unmatched_logit is None else unmatched_logit,
    )
    return ScoreMatrix(
        values=fused.detach().numpy(),
        row_ids=m_spatial.row_ids,
        col_ids=m_spatial.col_ids,
        has_unmatched=True,
    )


def label_tensor(labels: Sequence[int], n_branches: int) -> torch.Tensor:
    """Map branch column labels (UNMATCHED -> last column) to class indices.

    Raises:
        FusionError: If a label is outside the branch columns
    """
    out = []
    for label in labels:
        if label == UNMATCHED:
            out.append(n_branches)
        elif 0 <= label < n_branches:
            out.append(label)
        else:
            raise FusionError(f"label {label} outside 0..{n_branches - 1}")
    return torch.as_tensor(out, dtype=torch.long)


def fusion_loss(
    fused: Union[ScoreMatrix, torch.Tensor], labels: Sequence[int]
) -> torch.Tensor:
    """Mean cross entropy between row softmax (with unmatched column) and labels.

    Args:
        fused: (M, C+1) logits, last column unmatched
        labels: Per-bud branch column index or UNMATCHED

    Returns:
        Scalar loss tensor (zero for an empty frame)
    """
    logits = fused
    if isinstance(fused, ScoreMatrix):
        logits = torch.as_tensor(np.asarray(fused.values, dtype=float))
    if len(labels) != logits.shape[0]:
        raise FusionError(f"{len(labels)} labels for {logits.shape[0]} rows")
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, label_tensor(labels, logits.shape[1] - 1))


# ---------------------------------------------------------------------------
# Gate training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionExample:
    """Pre-computed analytic evidence of one frame for gate training."""

    m_spatial: torch.Tensor
    m_tb: torch.Tensor
    deviations: torch.Tensor
    has_history: torch.Tensor
    labels: Tuple[int, ...]


def gated_logits(example: FusionExample, gate: FusionGate, params: GateParams) -> torch.Tensor:
    h = gating_feature_tensor(example.m_spatial, example.m_tb, example.deviations, example.has_history)
    return fuse_tensors(
        example.m_spatial, example.m_tb, gate(h),
        params.tau_spatial, params.tau_temporal, gate.unmatched,
    )


def train_gate(
    examples: Sequence[FusionExample], params: GateParams
) -> Tuple[FusionGate, List[float]]:
    """Full-batch gradient descent on the gate MLP and unmatched logit.

    Returns:
        (trained gate, per-epoch mean losses)

    Raises:
        TrainingDivergedError: If the loss becomes non-finite
    """
    generator = torch.Generator().manual_seed(params.seed)
    gate = FusionGate(params, generator=generator)
    usable = [ex for ex in examples if ex.m_spatial.shape[0] > 0 and ex.m_spatial.shape[1] > 0]
    optimizer = torch.optim.SGD(gate.parameters(), lr=params.learning_rate)
    losses: List[float] = []
    if not usable:
        logger.warning("No usable frames for gate training; returning the initial gate")
        return gate, losses
    for epoch in range(params.epochs):
        optimizer.zero_grad()
        loss = sum(fusion_loss(gated_logits(ex, gate, params), ex.labels) for ex in usable)
        loss = loss / len(usable)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"gate loss diverged at epoch {epoch}", epoch=epoch, losses=losses + [value]
            )
        losses.append(value)
        loss.backward()
        optimizer.step()
        if epoch % 10 == 0 or epoch == params.epochs - 1:
            logger.info(f"Gate epoch {epoch}: loss {value:.5f}")
    return gate, losses
