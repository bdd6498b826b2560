"""Tests for gate and scorer checkpoint files."""

import json

import pytest
import torch

from src.checkpoint import CheckpointError, load_checkpoint, restore_modules, save_checkpoint
from src.config import GateParams, NetConfig
from src.fusion import FusionGate
from src.scorer_net import build_model


def assert_same_state(a, b):
    left, right = a.state_dict(), b.state_dict()
    assert left.keys() == right.keys()
    for name in left:
        assert torch.equal(left[name], right[name]), name


class TestGateCheckpoint:
    def test_round_trip(self, tmp_path):
        params = GateParams(alpha_exist=0.4, seed=3)
        gate = FusionGate(params, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            gate.unmatched.fill_(-4.5)
        path = tmp_path / "gate.json"
        save_checkpoint(path, gate, params)

        checkpoint = load_checkpoint(path)
        restored, net = restore_modules(checkpoint)
        assert checkpoint.kind == "gate"
        assert net is None
        assert checkpoint.config["gate"]["alpha_exist"] == 0.4
        assert float(restored.unmatched) == -4.5
        assert_same_state(gate, restored)

    def test_restored_gate_uses_saved_bounds(self, tmp_path):
        params = GateParams(alpha_min=0.1, alpha_max=0.9)
        path = tmp_path / "gate.json"
        save_checkpoint(path, FusionGate(params), params)
        restored, _ = restore_modules(load_checkpoint(path))
        assert restored.alpha_min == 0.1
        assert restored.alpha_max == 0.9


class TestScorerCheckpoint:
    def test_round_trip(self, tmp_path):
        config = NetConfig(embed_dim=4, heads=2, ffn_dim=8, seed=7)
        net, gate = build_model(config, GateParams())
        path = tmp_path / "scorer.json"
        save_checkpoint(path, gate, GateParams(), net, config)

        restored_gate, restored_net = restore_modules(load_checkpoint(path))
        assert restored_net is not None
        assert restored_net.config == config
        assert_same_state(net, restored_net)
        assert_same_state(gate, restored_gate)

    def test_tensors_are_flattened_row_major(self, tmp_path):
        config = NetConfig(embed_dim=4, heads=2, ffn_dim=8)
        net, gate = build_model(config, GateParams())
        checkpoint = save_checkpoint(tmp_path / "scorer.json", gate, GateParams(), net, config)
        record = next(r for r in checkpoint.tensors if r.name == "gate.hidden.weight")
        assert record.shape == [8, 4]
        assert record.values == gate.hidden.weight.detach().reshape(-1).tolist()


class TestCheckpointErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError) as exc_info:
            load_checkpoint(tmp_path / "absent.json")
        assert exc_info.value.path.endswith("absent.json")

    def test_not_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CheckpointError, match="malformed"):
            load_checkpoint(path)

    def test_unknown_kind(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text(json.dumps({"kind": "detector", "config": {}, "tensors": []}), encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_gate_config(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text(json.dumps({"kind": "gate", "config": {}, "tensors": []}), encoding="utf-8")
        with pytest.raises(CheckpointError, match="incomplete"):
            restore_modules(load_checkpoint(path))

    def test_tensor_shape_mismatch(self, tmp_path):
        params = GateParams()
        path = tmp_path / "gate.json"
        save_checkpoint(path, FusionGate(params), params)
        data = json.loads(path.read_text(encoding="utf-8"))
        data["config"]["gate"]["hidden"] = 16
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(CheckpointError, match="do not fit"):
            restore_modules(load_checkpoint(path))
