"""Learned matching path: geometry/motion embeddings, cross attention and dot-product logits.

Inputs are geometric and kinematic only. Branch orders are used to group
previous buds and to build labels, never as network inputs.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .config import GateParams, NetConfig, TemporalParams
from .core import SequenceError, TrainingDivergedError
from .evidence.temporal import (
    aggregate_by_order,
    estimate_global_uplift,
    gravitropism_penalty,
    order_groups,
    selected_deviations,
    vertical_displacements,
)
from .fusion import FusionGate, fuse_tensors, fusion_loss, gating_feature_tensor
from .schemas import UNMATCHED, Frame, MotionState, PlantSequence

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BUD_GEOM_DIM = 6
BRANCH_GEOM_DIM = 5
MOTION_VEC_DIM = 10


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairExample:
    """Network inputs and supervision for one (previous, current) frame pair."""

    bud_geom: torch.Tensor      # (M, 6) cx, cy, w, h, aspect, area
    branch_geom: torch.Tensor   # (K, 5) x, y, sin, cos, reserved
    cur_vec: torch.Tensor       # (M, 10) current buds, motion slots zero
    prev_vec: torch.Tensor      # (N, 10) previous buds with motion
    dt: float
    groups: Tuple[Tuple[int, ...], ...]
    dy: torch.Tensor            # (M, N)
    dy_global: float
    has_history: torch.Tensor   # (K,)
    labels: Tuple[int, ...]


def _bud_geometry(frame: Frame) -> torch.Tensor:
    rows = [[b.cx, b.cy, b.w, b.h, b.w / b.h, b.w * b.h] for b in frame.buds]
    return torch.tensor(rows, dtype=DTYPE).reshape(len(rows), BUD_GEOM_DIM)


def _branch_geometry(frame: Frame) -> torch.Tensor:
    rows = [
        [bp.x, bp.y, math.sin(bp.theta), math.cos(bp.theta), bp.reserved]
        for bp in frame.branch_points
    ]
    return torch.tensor(rows, dtype=DTYPE).reshape(len(rows), BRANCH_GEOM_DIM)


def _motion_vectors(frame: Optional[Frame], motions: Optional[Dict[int, MotionState]]) -> torch.Tensor:
    if frame is None:
        return torch.zeros((0, MOTION_VEC_DIM), dtype=DTYPE)
    rows = []
    for b in frame.buds:
        if motions is None:
            m = b.motion
        else:
            m = motions.get(b.id, MotionState(px=b.cx, py=b.cy))
        rows.append([b.cx, b.cy, b.w, b.h, m.px, m.py, m.vx, m.vy, m.ax, m.ay])
    return torch.tensor(rows, dtype=DTYPE).reshape(len(rows), MOTION_VEC_DIM)


def build_example(
    current: Frame,
    previous: Optional[Frame],
    prev_orders: Optional[Sequence[Optional[int]]] = None,
    motions: Optional[Dict[int, MotionState]] = None,
    topk_global: int = 3,
) -> PairExample:
    """Assemble network inputs for a frame pair.

    Args:
        current: Frame at t
        previous: Frame at t-1 (None when there is no usable history)
        prev_orders: Order carried by each previous bud; defaults to annotations
        motions: previous bud id -> MotionState; defaults to annotated motion
        topk_global: Topmost buds used for the global uplift

    Returns:
        PairExample; labels come from annotated orders (UNMATCHED when the
        bud's order has no branch point in the current frame)
    """
    prev_buds = previous.buds if previous is not None else []
    if prev_orders is None:
        prev_orders = [b.gt_order for b in prev_buds]
    branch_orders = [bp.order for bp in current.branch_points]
    groups = tuple(tuple(g) for g in order_groups(prev_orders, branch_orders))
    column_of = {order: j for j, order in enumerate(branch_orders)}
    labels = tuple(column_of.get(b.gt_order, UNMATCHED) for b in current.buds)
    cur_vec = _motion_vectors(current, {})
    cur_vec[:, 4:] = 0.0
    dt = current.timestamp_days - previous.timestamp_days if previous is not None else 1.0
    dy_global = estimate_global_uplift(current, previous, topk_global) if prev_buds else 0.0
    return PairExample(
        bud_geom=_bud_geometry(current),
        branch_geom=_branch_geometry(current),
        cur_vec=cur_vec,
        prev_vec=_motion_vectors(previous, motions),
        dt=float(dt),
        groups=groups,
        dy=torch.as_tensor(vertical_displacements(current.buds, prev_buds)).reshape(
            len(current.buds), len(prev_buds)
        ),
        dy_global=dy_global,
        has_history=torch.tensor([1.0 if g else 0.0 for g in groups], dtype=DTYPE),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

def _mlp(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, out_dim, dtype=DTYPE),
        nn.Tanh(),
        nn.Linear(out_dim, out_dim, dtype=DTYPE),
    )


class CrossAttentionBlock(nn.Module):
    """Multi-head cross attention, residual + LayerNorm, GELU FFN, residual + LayerNorm."""

    def __init__(self, config: NetConfig):
        super().__init__()
        dim = config.embed_dim
        self.attn = nn.MultiheadAttention(dim, config.heads, batch_first=True, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(dim, eps=config.layer_norm_eps, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(dim, config.ffn_dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(config.ffn_dim, dim, dtype=DTYPE),
        )
        self.norm2 = nn.LayerNorm(dim, eps=config.layer_norm_eps, dtype=DTYPE)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attn(q[None], k[None], v[None], need_weights=False)
        z = self.norm1(q + attended[0])
        return self.norm2(z + self.ffn(z))


class ScorerNet(nn.Module):
    """All learned parameters of the matching path (desk-scale dimensions)."""

    def __init__(self, config: NetConfig):
        super().__init__()
        dim = config.embed_dim
        self.config = config
        self.mlp_geom = _mlp(BUD_GEOM_DIM, dim)
        self.mlp_branch = _mlp(BRANCH_GEOM_DIM, dim)
        self.mlp_curr = _mlp(MOTION_VEC_DIM, dim)
        self.mlp_prev = _mlp(MOTION_VEC_DIM, dim)
        self.mlp_time = _mlp(1, dim)
        self.r_curr = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.r_prev = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.norm_spatial = nn.LayerNorm(dim, eps=config.layer_norm_eps, dtype=DTYPE)
        self.norm_curr = nn.LayerNorm(dim, eps=config.layer_norm_eps, dtype=DTYPE)
        self.norm_prev = nn.LayerNorm(dim, eps=config.layer_norm_eps, dtype=DTYPE)
        self.spatial_block = CrossAttentionBlock(config)
        self.temporal_block = CrossAttentionBlock(config)
        with torch.no_grad():
            self.r_curr.normal_(0.0, 0.1)
            self.r_prev.normal_(0.0, 0.1)


def build_model(config: NetConfig, gate_params: GateParams) -> Tuple[ScorerNet, FusionGate]:
    """Seeded construction that leaves the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = ScorerNet(config)
        gate = FusionGate(gate_params, generator=torch.Generator().manual_seed(config.seed))
    return net, gate


@dataclass(frozen=True)
class Embeddings:
    bud: torch.Tensor       # spatial queries (M, E)
    branch: torch.Tensor    # spatial keys/values (K, E)
    curr: torch.Tensor      # temporal queries (M, E)
    prev: torch.Tensor      # temporal keys/values (N, E)


def embed_inputs(example: PairExample, net: ScorerNet) -> Embeddings:
    """Per-entity embeddings; role vectors and the time-interval embedding added per side."""
    t_emb = net.mlp_time(torch.tensor([[example.dt]], dtype=DTYPE))[0]
    return Embeddings(
        bud=net.mlp_geom(example.bud_geom),
        branch=net.mlp_branch(example.branch_geom),
        curr=net.mlp_curr(example.cur_vec) + net.r_curr + t_emb,
        prev=net.mlp_prev(example.prev_vec) + net.r_prev + t_emb,
    )


def cross_attention(
    block: CrossAttentionBlock, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """Refined query vectors (attention, residual, LayerNorm, FFN)."""
    if k.shape[0] == 0:
        return q
    return block(q, k, v)


def logits(refined: torch.Tensor, values: torch.Tensor, tau: float) -> torch.Tensor:
    """Scaled dot products <refined_i, values_k> / tau."""
    return refined @ values.T / tau


def forward_scores(
    example: PairExample, net: ScorerNet, temporal: TemporalParams, gate_params: GateParams
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Raw learned scores (M_spatial, M_temporal); temperatures are applied in fusion."""
    emb = embed_inputs(example, net)
    q_sp = net.norm_spatial(emb.bud)
    kv_sp = net.norm_spatial(emb.branch)
    m_spatial = logits(cross_attention(net.spatial_block, q_sp, kv_sp, kv_sp), kv_sp, 1.0)
    q_t = net.norm_curr(emb.curr)
    kv_t = net.norm_prev(emb.prev)
    m_temporal = logits(cross_attention(net.temporal_block, q_t, kv_t, kv_t), kv_t, 1.0)
    return m_spatial, m_temporal


def fused_logits(
    example: PairExample,
    net: ScorerNet,
    gate: FusionGate,
    temporal: TemporalParams,
    gate_params: GateParams,
) -> torch.Tensor:
    """Learned spatial + temporal evidence through aggregation, penalty and gating."""
    m_spatial, m_temporal = forward_scores(example, net, temporal, gate_params)
    m_tb = aggregate_by_order(m_temporal, example.groups, temporal.beta_absent)
    deviations = selected_deviations(m_temporal, example.dy, example.dy_global, example.groups)
    m_tb = gravitropism_penalty(m_tb, deviations, temporal.lambda_vert, temporal.eps_tol)
    h = gating_feature_tensor(m_spatial, m_tb, deviations, example.has_history)
    return fuse_tensors(
        m_spatial, m_tb, gate(h), gate_params.tau_spatial, gate_params.tau_temporal, gate.unmatched
    )


def example_loss(
    example: PairExample,
    net: ScorerNet,
    gate: FusionGate,
    temporal: TemporalParams,
    gate_params: GateParams,
) -> torch.Tensor:
    return fusion_loss(fused_logits(example, net, gate, temporal, gate_params), example.labels)


def backward(loss: torch.Tensor, modules: Sequence[nn.Module]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter, keyed '<module index>.<name>'."""
    for module in modules:
        module.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for i, module in enumerate(modules):
        for name, param in module.named_parameters():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            grads[f"{i}.{name}"] = grad.detach().clone()
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def sequence_examples(sequences: Sequence[PlantSequence], topk_global: int = 3) -> List[PairExample]:
    """Frame-pair examples with annotated orders and motion; frames without buds are skipped."""
    examples = []
    for seq in sequences:
        previous = None
        for frame in seq.frames:
            if frame.sequence_break:
                previous = None
            if frame.buds and frame.branch_points:
                examples.append(build_example(frame, previous, topk_global=topk_global))
            previous = frame
    return examples


def train(
    sequences: Sequence[PlantSequence],
    config: NetConfig,
    temporal: TemporalParams,
    gate_params: GateParams,
) -> Tuple[ScorerNet, FusionGate, List[float]]:
    """Stochastic gradient descent on the fusion loss.

    Args:
        sequences: Training split
        config: Network and optimizer settings
        temporal: Temporal constants used inside the differentiable pipeline
        gate_params: Gate constants and initialization

    Returns:
        (network, gate, per-epoch mean training loss)

    Raises:
        SequenceError: If the split yields no training frames
        TrainingDivergedError: If the loss becomes non-finite
    """
    examples = sequence_examples(sequences, temporal.topk_global)
    if not examples:
        raise SequenceError("training split has no frames with buds and branch points")
    net, gate = build_model(config, gate_params)
    gate_lr = config.gate_learning_rate if config.gate_learning_rate is not None else config.learning_rate
    optimizer = torch.optim.SGD(
        [
            {"params": net.parameters(), "lr": config.learning_rate},
            {"params": gate.parameters(), "lr": gate_lr},
        ],
        lr=config.learning_rate,
        momentum=config.momentum,
    )
    order_rng = torch.Generator().manual_seed(config.seed)
    batch_size = config.batch_size or len(examples)
    losses: List[float] = []

    for epoch in range(config.epochs):
        if batch_size < len(examples):
            order = torch.randperm(len(examples), generator=order_rng).tolist()
        else:
            order = list(range(len(examples)))
        epoch_total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start:start + batch_size]]
            optimizer.zero_grad(set_to_none=True)
            loss = sum(example_loss(ex, net, gate, temporal, gate_params) for ex in batch) / len(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"scorer loss diverged at epoch {epoch}", epoch=epoch, losses=losses + [value]
                )
            loss.backward()
            optimizer.step()
            epoch_total += value * len(batch)
        losses.append(epoch_total / len(examples))
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            logger.info(f"Scorer epoch {epoch}: loss {losses[-1]:.5f}")
    return net, gate, losses


def evaluate_loss(
    sequences: Sequence[PlantSequence],
    net: ScorerNet,
    gate: FusionGate,
    temporal: TemporalParams,
    gate_params: GateParams,
) -> float:
    """Mean fusion loss over a split without updating parameters."""
    examples = sequence_examples(sequences, temporal.topk_global)
    if not examples:
        return float("nan")
    with torch.no_grad():
        total = sum(float(example_loss(ex, net, gate, temporal, gate_params)) for ex in examples)
    return total / len(examples)


def score_frame(
    example: PairExample,
    net: ScorerNet,
    gate: FusionGate,
    temporal: TemporalParams,
    gate_params: GateParams,
) -> np.ndarray:
    """Fused logits for inference as a numpy array (last column unmatched)."""
    with torch.no_grad():
        return fused_logits(example, net, gate, temporal, gate_params).numpy().copy()
