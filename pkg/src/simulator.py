"""Procedural plant-growth sequences with branch identities and bud annotations.

A plant is a vertical stem at x = 0.5 with primary branches attached at
increasing height (order 1 lowest). Each branch grows along a curve whose
direction relaxes toward vertical, with logistic length over time. Late in
the sequence the entanglement level pulls branch tips into a shared canopy
region, which is where spatial evidence becomes ambiguous.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import cumulative_trapezoid
from scipy.special import expit

from .config import SimConfig
from .core import BranchTrackError
from .dataset import encode_rle
from .evidence.temporal import estimate_motion
from .reconstruction import rasterize
from .schemas import BranchPoint, Bud, Frame, MotionState, PlantSequence, TrackSet

logger = logging.getLogger(__name__)

STEM_X = 0.5
CANOPY_CENTER = (0.5, 0.04)
CANOPY_JITTER = 0.014
# minimum late-frame bud separation guaranteed at entanglement 0
SEPARATION_FLOOR = 0.005
TIP_MARGIN = 0.08
POLYLINE_SAMPLES = 33
MAX_ATTEMPTS = 100
ABLATION_MODES = ("swap-adjacent-buds", "drop-history", "freeze-growth")


class SimulationError(BranchTrackError):
    """Raised when a plant cannot be generated or a perturbation is unknown."""


class BranchSpec(BaseModel):
    """Growth parameters of one primary branch."""

    model_config = ConfigDict(frozen=True)

    id: int
    order: int = Field(ge=1)
    emergence_day: float = Field(ge=0.0)
    attach_y: float = Field(gt=0.0, lt=1.0)
    azimuth: float = Field(description="Azimuth in radians; lateral offsets scale by cos(azimuth - view)")
    initial_tilt: float = Field(gt=0.0, description="Initial deviation from vertical (radians)")
    final_tilt: float = Field(ge=0.0, description="Asymptotic deviation from vertical (radians)")
    curl_length: float = Field(gt=0.0, description="Arc length over which the tilt relaxes")
    max_length: float = Field(gt=0.0)
    elongation_rate: float = Field(gt=0.0, description="Peak elongation (units/day)")
    mid_age: float = Field(gt=0.0, description="Age in days of fastest elongation")
    sway_phase: float = 0.0
    bud_size0: float = Field(gt=0.0)
    bud_growth: float = Field(ge=0.0, description="Bud width growth (units/day)")
    canopy_x: float
    canopy_y: float


class PlantModel(BaseModel):
    """Deterministic description of one simulated plant."""

    model_config = ConfigDict(frozen=True)

    plant_id: int
    seed: int
    frame_times: List[float]
    branches: List[BranchSpec]

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def horizon(self) -> float:
        return self.frame_times[-1]


@dataclass(frozen=True)
class SimulatedSequence:
    """Rendered frames, ground-truth identities and per-frame branch polylines."""

    frames: List[Frame]
    gt_tracks: TrackSet
    polylines: Dict[int, Dict[int, np.ndarray]]  # frame index -> branch id -> (n, 2)
    plant_id: int
    view_angle: float

    def to_sequence(self) -> PlantSequence:
        return PlantSequence(
            plant_id=self.plant_id,
            view_angle=self.view_angle,
            frames=self.frames,
            gt_tracks=self.gt_tracks,
        )


# ---------------------------------------------------------------------------
# Plant generation
# ---------------------------------------------------------------------------

def _frame_times(config: SimConfig, rng: np.random.Generator) -> List[float]:
    times = [0.0]
    for _ in range(config.frames_per_plant - 1):
        jitter = rng.uniform(-config.dt_jitter, config.dt_jitter) if config.dt_jitter else 0.0
        times.append(times[-1] + config.dt_days * (1.0 + jitter))
    return times


def _sample_branches(config: SimConfig, rng: np.random.Generator, n_branches: int) -> List[BranchSpec]:
    start, end = config.emergence_window
    emergence = np.sort(rng.uniform(start, end, size=n_branches))
    emergence[0] = start
    emergence = rng.permutation(emergence)
    ids = rng.permutation(n_branches) + 1

    attach = [rng.uniform(0.8, 0.9)]
    for _ in range(n_branches - 1):
        attach.append(attach[-1] - rng.uniform(0.06, 0.075))

    specs = []
    for j in range(n_branches):
        order = j + 1
        side_az = 0.0 if order % 2 else math.pi
        # lower branches leave the stem closer to horizontal
        rank = j / max(n_branches - 1, 1)
        initial_tilt = 1.1 - 0.45 * rank + rng.uniform(-0.05, 0.05)
        specs.append(BranchSpec(
            id=int(ids[j]),
            order=order,
            emergence_day=float(emergence[j]),
            attach_y=float(attach[j]),
            azimuth=float(side_az + rng.uniform(-0.3, 0.3)),
            initial_tilt=float(initial_tilt),
            final_tilt=float(rng.uniform(0.1, 0.25)),
            curl_length=float(rng.uniform(0.08, 0.15)),
            max_length=float(min(rng.uniform(0.2, 0.4), attach[j] - TIP_MARGIN)),
            elongation_rate=float(rng.uniform(0.03, 0.06)),
            mid_age=float(rng.uniform(4.0, 10.0)),
            sway_phase=float(rng.uniform(0.0, 2 * math.pi)),
            bud_size0=float(rng.uniform(0.01, 0.015)),
            bud_growth=float(rng.uniform(0.001, 0.002)),
            canopy_x=float(CANOPY_CENTER[0] + rng.uniform(-CANOPY_JITTER, CANOPY_JITTER)),
            canopy_y=float(CANOPY_CENTER[1] + rng.uniform(-CANOPY_JITTER, CANOPY_JITTER)),
        ))
    return specs


def generate_plant(
    config: SimConfig, plant_seed: int, plant_id: int = 0, n_branches: Optional[int] = None
) -> PlantModel:
    """Sample a plant deterministically from (config, plant_seed).

    At entanglement 0 candidates whose buds ever come closer than
    SEPARATION_FLOOR are resampled from the same generator.

    Args:
        config: Simulator settings
        plant_seed: Seed of this plant's generator
        plant_id: Identifier stored on the model
        n_branches: Branch count; sampled from [min_branches, max_branches] when None

    Returns:
        PlantModel

    Raises:
        SimulationError: If n_branches is not positive or no valid plant is found
    """
    rng = np.random.default_rng(plant_seed)
    if n_branches is None:
        n_branches = int(rng.integers(config.min_branches, config.max_branches + 1))
    if n_branches <= 0:
        raise SimulationError(f"plant {plant_id}: n_branches must be positive, got {n_branches}")
    times = _frame_times(config, rng)

    for attempt in range(MAX_ATTEMPTS):
        model = PlantModel(
            plant_id=plant_id,
            seed=plant_seed,
            frame_times=times,
            branches=_sample_branches(config, rng, n_branches),
        )
        if config.entanglement > 0 or _min_separation(model, config) >= SEPARATION_FLOOR:
            if attempt:
                logger.debug(f"Plant {plant_id}: accepted after {attempt + 1} samples")
            return model
    raise SimulationError(f"plant {plant_id}: no candidate kept buds {SEPARATION_FLOOR} apart")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def branch_length(spec: BranchSpec, t: float) -> float:
    """Logistic length at time t, zero at emergence and below max_length."""
    age = t - spec.emergence_day
    if age <= 0:
        return 0.0
    k = 4.0 * spec.elongation_rate / spec.max_length
    base = expit(-k * spec.mid_age)
    return float(spec.max_length * (expit(k * (age - spec.mid_age)) - base) / (1.0 - base))


def growth_activity(spec: BranchSpec, t: float) -> float:
    """Elongation rate relative to its peak, in [0, 1]; zero before emergence."""
    age = t - spec.emergence_day
    if age <= 0:
        return 0.0
    sigma = expit(4.0 * spec.elongation_rate / spec.max_length * (age - spec.mid_age))
    return float(4.0 * sigma * (1.0 - sigma))


def _late_weight(t: float, horizon: float, onset: float = 0.5) -> float:
    if horizon <= 0:
        return 0.0
    start = onset * horizon
    return float(np.clip((t - start) / (horizon - start), 0.0, 1.0) ** 2)


def branch_polyline(
    spec: BranchSpec,
    t: float,
    view_angle: float,
    config: SimConfig,
    horizon: float,
    samples: int = POLYLINE_SAMPLES,
) -> np.ndarray:
    """Projected branch centerline at time t, attach point first, bud tip last."""
    length = branch_length(spec, t)
    s = np.linspace(0.0, length, samples)
    tilt = spec.final_tilt + (spec.initial_tilt - spec.final_tilt) * np.exp(-s / spec.curl_length)
    projection = math.cos(spec.azimuth - math.radians(view_angle))
    x = STEM_X + projection * cumulative_trapezoid(np.sin(tilt), s, initial=0.0)
    y = spec.attach_y - cumulative_trapezoid(np.cos(tilt), s, initial=0.0)
    if length > 0:
        shape = s / length
        coupling = config.sway_growth_coupling
        activity = (1.0 - coupling) + coupling * growth_activity(spec, t)
        sway = config.sway_amplitude * activity * math.sin(
            2 * math.pi * config.sway_frequency * t + spec.sway_phase
        )
        x = x + sway * shape
        pull = config.entanglement * _late_weight(t, horizon, config.entanglement_onset) * shape**2
        x = x + pull * (spec.canopy_x - x[-1])
        y = y + pull * (spec.canopy_y - y[-1])
    return np.clip(np.column_stack([x, y]), 0.0, 1.0)


def initial_theta(spec: BranchSpec, view_angle: float) -> float:
    """Orientation of the branch at its attach point, in (-pi, 0)."""
    projection = math.cos(spec.azimuth - math.radians(view_angle))
    return math.atan2(-math.cos(spec.initial_tilt), projection * math.sin(spec.initial_tilt))


def _min_separation(model: PlantModel, config: SimConfig) -> float:
    best = math.inf
    for view in config.view_angles:
        for t in model.frame_times:
            tips = [
                branch_polyline(b, t, view, config, model.horizon, samples=POLYLINE_SAMPLES)[-1]
                for b in model.branches
                if t >= b.emergence_day
            ]
            for i in range(len(tips)):
                for j in range(i + 1, len(tips)):
                    best = min(best, float(np.hypot(*(tips[i] - tips[j]))))
    return best


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_sequence(model: PlantModel, config: SimConfig, view_angle: float = 0.0) -> SimulatedSequence:
    """Render frames, ground-truth tracks and polylines of one plant view.

    Buds are dropped independently with ``occlusion_prob`` and additionally
    with ``crossing_occlusion`` when another tip lies within 0.05. Dropped
    buds leave gaps in their tracks; branch points stay visible after emergence.
    """
    rng = np.random.default_rng([model.seed, int(round(view_angle * 1000)) % (2**32)])
    frames: List[Frame] = []
    polylines: Dict[int, Dict[int, np.ndarray]] = {}
    tracks: Dict[int, List[Tuple[int, int]]] = {}
    observed: Dict[int, List[Tuple[float, float, float]]] = {}

    for index, t in enumerate(model.frame_times):
        emerged = [b for b in model.branches if t >= b.emergence_day]
        lines = {b.id: branch_polyline(b, t, view_angle, config, model.horizon) for b in emerged}
        polylines[index] = lines
        tips = {b.id: lines[b.id][-1] for b in emerged}

        visible = []
        for b in emerged:
            crowded = any(
                other != b.id and float(np.hypot(*(tips[b.id] - tip))) < 0.05
                for other, tip in tips.items()
            )
            u_drop, u_cross = rng.random(), rng.random()
            if u_drop < config.occlusion_prob or (crowded and u_cross < config.crossing_occlusion):
                continue
            visible.append(b)

        bud_ids = rng.permutation(len(visible))
        buds = []
        for b, bud_id in zip(visible, bud_ids):
            cx, cy = (float(v) for v in tips[b.id])
            history = observed.setdefault(b.id, [])
            history.append((t, cx, cy))
            motion = estimate_motion(history, window=3) if len(history) > 1 else MotionState()
            width = min(b.bud_size0 + b.bud_growth * (t - b.emergence_day), 0.08)
            buds.append(Bud(
                id=int(bud_id), gt_order=b.order, cx=cx, cy=cy,
                w=float(width), h=float(0.8 * width), frame=index, motion=motion,
            ))
            tracks.setdefault(b.id, []).append((index, int(bud_id)))

        masks = None
        if config.render_masks:
            masks = {
                bid: encode_rle(rasterize(line, config.raster_size, config.stroke_px))
                for bid, line in lines.items()
            }
        frames.append(Frame(
            index=index,
            timestamp_days=float(t),
            branch_points=[
                BranchPoint(
                    id=b.id, order=b.order, x=STEM_X, y=b.attach_y,
                    theta=initial_theta(b, view_angle),
                    first_seen=next(i for i, ft in enumerate(model.frame_times) if ft >= b.emergence_day),
                )
                for b in sorted(emerged, key=lambda b: b.order)
            ],
            buds=sorted(buds, key=lambda bud: bud.id),
            masks=masks,
        ))

    return SimulatedSequence(
        frames=frames,
        gt_tracks=TrackSet(tracks=dict(sorted(tracks.items()))),
        polylines=polylines,
        plant_id=model.plant_id,
        view_angle=view_angle,
    )


def plant_seeds(config: SimConfig) -> List[int]:
    """Independent per-plant seeds spawned from the master seed."""
    children = np.random.SeedSequence(config.seed).spawn(config.n_plants)
    return [int(child.generate_state(1)[0]) for child in children]


def _simulate_plant(args: Tuple[int, int, SimConfig]) -> List[PlantSequence]:
    plant_id, seed, config = args
    model = generate_plant(config, seed, plant_id=plant_id)
    return [render_sequence(model, config, view).to_sequence() for view in config.view_angles]


def generate_dataset(config: SimConfig, threads: int = 1) -> List[PlantSequence]:
    """All plant-view sequences of a config, in (plant, view) order regardless of threads."""
    jobs = [(i, seed, config) for i, seed in enumerate(plant_seeds(config))]
    logger.info(f"Simulating {len(jobs)} plants x {len(config.view_angles)} views")
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(pool.map(_simulate_plant, jobs))
    return [seq for plant in results for seq in plant]


# ---------------------------------------------------------------------------
# Ablation perturbations
# ---------------------------------------------------------------------------

def _swap_adjacent(frame: Frame) -> Frame:
    ordered = sorted(frame.buds, key=lambda b: (b.cx, b.id))
    moved: Dict[int, Bud] = {}
    for left, right in zip(ordered[0::2], ordered[1::2]):
        moved[left.id] = left.model_copy(update={"cx": right.cx, "cy": right.cy})
        moved[right.id] = right.model_copy(update={"cx": left.cx, "cy": left.cy})
    return frame.model_copy(update={"buds": [moved.get(b.id, b) for b in frame.buds]})


def _freeze(frames: Sequence[Frame]) -> List[Frame]:
    first: Dict[Optional[int], Bud] = {}
    out = []
    for frame in frames:
        buds = []
        for bud in frame.buds:
            anchor = first.setdefault(bud.gt_order, bud)
            buds.append(bud.model_copy(update={
                "cx": anchor.cx, "cy": anchor.cy, "w": anchor.w, "h": anchor.h,
                "motion": MotionState(),
            }))
        out.append(frame.model_copy(update={"buds": buds}))
    return out


def perturb_for_ablation(frames: Sequence[Frame], mode: str) -> List[Frame]:
    """Controlled corruption of a sequence for stress tests.

    Modes:
        swap-adjacent-buds: exchange the positions of buds paired left to right by x
        drop-history: zero every MotionState and cut temporal links between all frames
        freeze-growth: hold each bud at its first-appearance geometry with zero motion

    Raises:
        SimulationError: If mode is unknown
    """
    if mode == "swap-adjacent-buds":
        return [_swap_adjacent(f) for f in frames]
    if mode == "drop-history":
        return [
            f.model_copy(update={
                "buds": [b.model_copy(update={"motion": MotionState()}) for b in f.buds],
                "sequence_break": True,
            })
            for f in frames
        ]
    if mode == "freeze-growth":
        return _freeze(frames)
    raise SimulationError(f"unknown ablation mode '{mode}'; expected one of {ABLATION_MODES}")
