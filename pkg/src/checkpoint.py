"""Checkpoint files for the learned gate and scorer.

Layout: ``{"kind", "config", "tensors": [{"name", "shape", "values"}]}`` with
values flattened row-major; the config echoes the sections used to build the
modules so a checkpoint restores without outside settings.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import torch
from pydantic import BaseModel, Field, ValidationError
from torch import nn

from .config import GateParams, NetConfig
from .core import BranchTrackError
from .fusion import FusionGate
from .scorer_net import ScorerNet, build_model

logger = logging.getLogger(__name__)

CheckpointKind = Literal["gate", "scorer"]


class CheckpointError(BranchTrackError):
    """Raised when a checkpoint is missing, malformed or of the wrong kind."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


class TensorRecord(BaseModel):
    name: str
    shape: List[int]
    values: List[float]


class Checkpoint(BaseModel):
    kind: CheckpointKind
    config: Dict[str, Any] = Field(default_factory=dict)
    tensors: List[TensorRecord] = Field(default_factory=list)


def _records(prefix: str, module: nn.Module) -> List[TensorRecord]:
    return [
        TensorRecord(
            name=f"{prefix}.{name}",
            shape=list(tensor.shape),
            values=tensor.detach().reshape(-1).tolist(),
        )
        for name, tensor in module.state_dict().items()
    ]


def save_checkpoint(
    path: Path,
    gate: FusionGate,
    gate_params: GateParams,
    net: Optional[ScorerNet] = None,
    net_config: Optional[NetConfig] = None,
) -> Checkpoint:
    """Write a gate checkpoint, or a scorer checkpoint when ``net`` is given."""
    config = {"gate": gate_params.model_dump(mode="json")}
    tensors = _records("gate", gate)
    kind = "gate"
    if net is not None:
        kind = "scorer"
        config["net"] = net_config.model_dump(mode="json")
        tensors = _records("net", net) + tensors
    checkpoint = Checkpoint(kind=kind, config=config, tensors=tensors)
    Path(path).write_text(checkpoint.model_dump_json(), encoding="utf-8")
    logger.info(f"Wrote {kind} checkpoint {path} ({len(tensors)} tensors)")
    return checkpoint


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and validate a checkpoint file.

    Raises:
        CheckpointError: If the file is unreadable or not a checkpoint
    """
    try:
        return Checkpoint.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}", path=str(path)) from e
    except (ValidationError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}", path=str(path)) from e


def _restore(module: nn.Module, prefix: str, checkpoint: Checkpoint) -> None:
    state = {}
    for record in checkpoint.tensors:
        if record.name.startswith(prefix + "."):
            state[record.name[len(prefix) + 1:]] = torch.tensor(
                record.values, dtype=torch.float64
            ).reshape(record.shape)
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{prefix} tensors do not fit the module: {e}") from e


def restore_modules(checkpoint: Checkpoint) -> Tuple[FusionGate, Optional[ScorerNet]]:
    """Rebuild the gate (and scorer network for scorer checkpoints) from a checkpoint.

    Returns:
        (gate, network or None)
    """
    try:
        gate_params = GateParams(**checkpoint.config["gate"])
        net_config = NetConfig(**checkpoint.config["net"]) if checkpoint.kind == "scorer" else None
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"checkpoint config incomplete: {e}") from e

    net = None
    if net_config is not None:
        net, gate = build_model(net_config, gate_params)
        _restore(net, "net", checkpoint)
    else:
        gate = FusionGate(gate_params)
    _restore(gate, "gate", checkpoint)
    return gate, net
