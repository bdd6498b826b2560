"""Pytest configuration and fixtures for branch tracker tests."""

import math

import pytest

from src.config import SimConfig, load_settings
from src.schemas import BranchPoint, Bud, Frame, MotionState, PlantSequence, TrackSet


def make_bud(bud_id, cx, cy, w=0.02, h=0.02, frame=0, gt_order=None, motion=None):
    return Bud(
        id=bud_id, gt_order=gt_order, cx=cx, cy=cy, w=w, h=h, frame=frame,
        motion=motion or MotionState(),
    )


def make_branch(branch_id, order, x=0.5, y=0.8, theta=-math.pi / 2, first_seen=0):
    return BranchPoint(id=branch_id, order=order, x=x, y=y, theta=theta, first_seen=first_seen)


def make_frame(index, buds=(), branches=(), timestamp=None, sequence_break=False):
    return Frame(
        index=index,
        timestamp_days=float(index if timestamp is None else timestamp),
        branch_points=list(branches),
        buds=list(buds),
        sequence_break=sequence_break,
    )


def make_sequence(frames, gt_tracks=None, plant_id=0, view_angle=0.0):
    return PlantSequence(
        plant_id=plant_id,
        view_angle=view_angle,
        frames=list(frames),
        gt_tracks=gt_tracks if gt_tracks is not None else TrackSet(),
    )


@pytest.fixture
def settings():
    """Default settings (every constant at its reference value)."""
    return load_settings()


@pytest.fixture
def noise_free_sim():
    """Separable simulator output: two opposite branches, no entanglement, occlusion or sway."""
    return SimConfig(
        seed=3,
        n_plants=3,
        frames_per_plant=12,
        min_branches=2,
        max_branches=2,
        entanglement=0.0,
        occlusion_prob=0.0,
        sway_amplitude=0.0,
    )


@pytest.fixture
def two_branch_sequence():
    """Two branches on opposite sides growing upward over four frames."""
    left = make_branch(10, order=2, x=0.5, y=0.7, theta=-3 * math.pi / 4)
    right = make_branch(20, order=1, x=0.5, y=0.8, theta=-math.pi / 4)
    frames = []
    tracks = {10: [], 20: []}
    for t in range(4):
        buds = [
            make_bud(0, 0.40 - 0.01 * t, 0.60 - 0.03 * t, frame=t, gt_order=2),
            make_bud(1, 0.60 + 0.01 * t, 0.70 - 0.03 * t, frame=t, gt_order=1),
        ]
        tracks[10].append((t, 0))
        tracks[20].append((t, 1))
        frames.append(make_frame(t, buds, [right, left]))
    return make_sequence(frames, TrackSet(tracks=tracks))
