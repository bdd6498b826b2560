"""Tests for the procedural plant-growth simulator and ablation perturbations."""

import itertools
import math

import numpy as np
import pytest
from scipy import ndimage

from src.config import SimConfig
from src.core import validate_sequence
from src.dataset import decode_rle, serialize_sequence
from src.evidence.temporal import estimate_global_uplift
from src.simulator import (
    SEPARATION_FLOOR,
    SimulationError,
    branch_length,
    branch_polyline,
    generate_dataset,
    generate_plant,
    growth_activity,
    perturb_for_ablation,
    render_sequence,
)


def min_bud_separation(frames):
    best = math.inf
    for frame in frames:
        for a, b in itertools.combinations(frame.buds, 2):
            best = min(best, math.dist(a.position, b.position))
    return best


# =============================================================================
# Plant generation
# =============================================================================


class TestGeneratePlant:
    def test_deterministic(self):
        config = SimConfig(seed=1)

        assert generate_plant(config, 123) == generate_plant(config, 123)

    def test_zero_branches_rejected(self):
        with pytest.raises(SimulationError):
            generate_plant(SimConfig(), 1, n_branches=0)

    def test_orders_follow_attach_height(self):
        model = generate_plant(SimConfig(), 7)

        orders = [b.order for b in model.branches]
        attach = [b.attach_y for b in model.branches]
        assert orders == sorted(orders)
        assert attach == sorted(attach, reverse=True)
        assert all(b.elongation_rate > 0 for b in model.branches)

    def test_first_branch_emerges_at_window_start(self):
        model = generate_plant(SimConfig(emergence_window=(1.0, 6.0)), 3)

        assert min(b.emergence_day for b in model.branches) == 1.0

    def test_length_is_logistic(self):
        spec = generate_plant(SimConfig(), 5).branches[0]
        ages = np.linspace(0.0, 20.0, 50) + spec.emergence_day
        lengths = [branch_length(spec, t) for t in ages]

        assert lengths[0] == 0.0
        assert all(b > a for a, b in zip(lengths, lengths[1:]))
        assert lengths[-1] < spec.max_length

    def test_no_entanglement_keeps_buds_apart(self):
        config = SimConfig(frames_per_plant=20, entanglement=0.0, sway_amplitude=0.0)
        for seed in range(5):
            seq = render_sequence(generate_plant(config, seed), config)
            assert min_bud_separation(seq.frames) >= SEPARATION_FLOOR

    def test_full_entanglement_crowds_late_buds(self):
        config = SimConfig(frames_per_plant=20, entanglement=1.0)
        for seed in range(5):
            seq = render_sequence(generate_plant(config, seed), config)
            assert min_bud_separation(seq.frames[-1:]) < 0.05

    def test_growth_activity_peaks_at_mid_age(self):
        spec = generate_plant(SimConfig(), 5).branches[0]
        ages = np.linspace(-1.0, 30.0, 80)
        activity = [growth_activity(spec, spec.emergence_day + a) for a in ages]

        assert activity[0] == 0.0
        assert all(0.0 <= a <= 1.0 for a in activity)
        assert growth_activity(spec, spec.emergence_day + spec.mid_age) == pytest.approx(1.0)


class TestBranchPolyline:
    def sway_offset(self, config, spec, t):
        still = config.model_copy(update={"sway_amplitude": 0.0})
        return branch_polyline(spec, t, 0.0, config, 20.0)[-1, 0] - branch_polyline(spec, t, 0.0, still, 20.0)[-1, 0]

    def test_constant_sway(self):
        config = SimConfig(entanglement=0.0, sway_amplitude=0.004, sway_frequency=0.3)
        spec = generate_plant(config, 2).branches[0]
        t = spec.emergence_day + 3.0

        expected = 0.004 * math.sin(2 * math.pi * 0.3 * t + spec.sway_phase)
        assert self.sway_offset(config, spec, t) == pytest.approx(expected, abs=1e-12)

    def test_growth_coupled_sway_follows_elongation(self):
        config = SimConfig(entanglement=0.0, sway_amplitude=0.004, sway_growth_coupling=1.0)
        spec = generate_plant(config, 2).branches[0]
        for t in (spec.emergence_day + 1.0, spec.emergence_day + spec.mid_age, spec.emergence_day + 25.0):
            expected = 0.004 * growth_activity(spec, t) * math.sin(
                2 * math.pi * config.sway_frequency * t + spec.sway_phase
            )
            assert self.sway_offset(config, spec, t) == pytest.approx(expected, abs=1e-12)

    def test_entanglement_waits_for_onset(self):
        config = SimConfig(entanglement=1.0, entanglement_onset=0.9, sway_amplitude=0.0)
        untangled = config.model_copy(update={"entanglement": 0.0})
        spec = generate_plant(config, 2).branches[0]

        early = branch_polyline(spec, 17.0, 0.0, config, 20.0)
        np.testing.assert_array_equal(early, branch_polyline(spec, 17.0, 0.0, untangled, 20.0))
        late = branch_polyline(spec, 20.0, 0.0, config, 20.0)
        assert late[-1, 0] == pytest.approx(spec.canopy_x)


# =============================================================================
# Rendering
# =============================================================================


class TestRenderSequence:
    def test_noise_free_tracks_are_complete_and_rising(self, noise_free_sim):
        model = generate_plant(noise_free_sim, 11)
        seq = render_sequence(model, noise_free_sim)

        for branch in model.branches:
            entries = seq.gt_tracks.tracks[branch.id]
            first = next(i for i, t in enumerate(model.frame_times) if t >= branch.emergence_day)
            assert [f for f, _ in entries] == list(range(first, len(model.frame_times)))
            ys = [seq.frames[f].bud_by_id(b).cy for f, b in entries]
            assert all(b < a for a, b in zip(ys, ys[1:]))

    def test_emergent_buds_have_no_history(self, noise_free_sim):
        model = generate_plant(noise_free_sim, 2)
        seq = render_sequence(model, noise_free_sim)

        for entries in seq.gt_tracks.tracks.values():
            f, bud_id = entries[0]
            assert seq.frames[f].bud_by_id(bud_id).motion.vy == 0.0

    def test_occlusion_coverage(self):
        config = SimConfig(frames_per_plant=10, occlusion_prob=0.2)
        coverage = []
        for seed in range(100):
            model = generate_plant(config, seed)
            seq = render_sequence(model, config)
            for branch in model.branches:
                alive = sum(t >= branch.emergence_day for t in model.frame_times)
                seen = len(seq.gt_tracks.tracks.get(branch.id, []))
                coverage.append(seen / alive)

        assert np.mean(coverage) == pytest.approx(0.8, abs=0.03)

    def test_masks_are_eight_connected(self):
        config = SimConfig(frames_per_plant=6, render_masks=True, raster_size=64)
        seq = render_sequence(generate_plant(config, 4), config)

        for frame in seq.frames:
            for rle in frame.masks.values():
                _, n = ndimage.label(decode_rle(rle), structure=np.ones((3, 3)))
                assert n == 1

    def test_gravitropism(self):
        config = SimConfig(seed=0, n_plants=3)
        for seq in generate_dataset(config):
            for entries in seq.gt_tracks.tracks.values():
                if len(entries) < 2:
                    continue
                ys = [seq.frames[f].bud_by_id(b).cy for f, b in entries]
                assert np.mean(np.diff(ys)) < 0


class TestGenerateDataset:
    def test_byte_identical(self):
        config = SimConfig(seed=9, n_plants=2, frames_per_plant=8, occlusion_prob=0.1)

        first = [serialize_sequence(s) for s in generate_dataset(config)]
        second = [serialize_sequence(s) for s in generate_dataset(config, threads=3)]
        assert first == second

    def test_one_sequence_per_view(self):
        config = SimConfig(n_plants=2, frames_per_plant=4, view_angles=[0.0, 90.0])

        stems = [s.stem for s in generate_dataset(config)]
        assert stems == [
            "plant_0000_view_000", "plant_0000_view_090",
            "plant_0001_view_000", "plant_0001_view_090",
        ]

    def test_output_validates(self):
        config = SimConfig(n_plants=3, frames_per_plant=10, dt_jitter=0.3, occlusion_prob=0.1)

        for seq in generate_dataset(config):
            assert validate_sequence(seq.frames) == []


# =============================================================================
# Ablation perturbations
# =============================================================================


class TestPerturbForAblation:
    def test_drop_history(self, noise_free_sim):
        frames = generate_dataset(noise_free_sim)[0].frames

        dropped = perturb_for_ablation(frames, "drop-history")
        assert all(f.sequence_break for f in dropped)
        assert all(b.motion.vx == b.motion.vy == b.motion.ax == 0.0 for f in dropped for b in f.buds)

    def test_swap_exchanges_positions(self):
        config = SimConfig(n_plants=1, frames_per_plant=12, occlusion_prob=0.0)
        frame = generate_dataset(config)[0].frames[-1]

        swapped = perturb_for_ablation([frame], "swap-adjacent-buds")[0]
        before = sorted(b.position for b in frame.buds)
        after = sorted(b.position for b in swapped.buds)
        assert before == after
        moved = sum(a.position != b.position for a, b in zip(frame.buds, swapped.buds))
        assert moved == 2 * (len(frame.buds) // 2)

    def test_freeze_growth_stops_uplift(self):
        config = SimConfig(n_plants=1, frames_per_plant=16, emergence_window=(0.0, 6.0))
        frames = perturb_for_ablation(generate_dataset(config)[0].frames, "freeze-growth")

        for previous, current in zip(frames[7:], frames[8:]):
            assert estimate_global_uplift(current, previous, 3) == pytest.approx(0.0, abs=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(SimulationError):
            perturb_for_ablation([], "rotate")
