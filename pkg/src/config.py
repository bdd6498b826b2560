"""Configuration management for the branch tracker."""

import hashlib
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class _Section(BaseModel):
    """Base for config sections: unknown keys are a configuration error."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class SimConfig(_Section):
    """Procedural plant-growth simulator settings."""

    seed: int = Field(default=0, description="Master seed; fully determines the dataset")
    n_plants: int = Field(default=10, ge=1, description="Number of simulated plants")
    frames_per_plant: int = Field(default=20, ge=1, description="Frames rendered per sequence")
    min_branches: int = Field(default=4, ge=1, description="Minimum primary branches per plant")
    max_branches: int = Field(default=7, ge=1, description="Maximum primary branches per plant")
    dt_days: float = Field(default=1.0, gt=0.0, description="Nominal interval between frames in days")
    dt_jitter: float = Field(
        default=0.0, ge=0.0, lt=1.0, description="Relative uniform jitter of the frame interval"
    )
    entanglement: float = Field(
        default=0.3, ge=0.0, le=1.0, description="Horizontal overlap of late-stage buds"
    )
    occlusion_prob: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Independent bud dropout per frame"
    )
    crossing_occlusion: float = Field(
        default=0.0, ge=0.0, le=1.0,
        description="Extra dropout for buds inside the ambiguity radius of another bud",
    )
    emergence_window: Tuple[float, float] = Field(
        default=(0.0, 8.0), description="Day window in which branches emerge"
    )
    sway_amplitude: float = Field(
        default=0.004, ge=0.0, description="Lateral tip sway amplitude (normalized units)"
    )
    sway_frequency: float = Field(default=0.3, ge=0.0, description="Sway cycles per day")
    sway_growth_coupling: float = Field(
        default=0.0, ge=0.0, le=1.0,
        description="Share of the sway that follows the relative elongation rate (0: constant sway)",
    )
    entanglement_onset: float = Field(
        default=0.5, ge=0.0, lt=1.0, description="Fraction of the sequence after which tips converge"
    )
    view_angles: List[float] = Field(
        default_factory=lambda: [0.0], min_length=1, description="Camera view angles in degrees"
    )
    render_masks: bool = Field(default=False, description="Attach rasterized branch masks")
    raster_size: int = Field(default=224, ge=16, description="Square mask raster size in pixels")
    stroke_px: int = Field(default=2, ge=1, description="Mask stroke width in pixels")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SimConfig":
        if self.min_branches > self.max_branches:
            raise ValueError("min_branches must not exceed max_branches")
        start, end = self.emergence_window
        if start < 0 or end < start:
            raise ValueError("emergence_window must satisfy 0 <= start <= end")
        return self


class SpatialParams(_Section):
    """Analytic spatial score parameters."""

    sigma_d: float = Field(default=0.15, gt=0.0, description="Distance scale")
    sigma_a: float = Field(default=math.pi / 4, gt=0.0, description="Angular scale in radians")
    ambiguity_radius: float = Field(
        default=0.05, gt=0.0, description="Bud separation below which spatial evidence is ambiguous"
    )


class TemporalParams(_Section):
    """Temporal evidence parameters; defaults are the reference constants."""

    tau_temporal: float = Field(
        default=1.2, gt=0.0, description="Temporal temperature; kept equal to gate.tau_temporal"
    )
    beta_absent: float = Field(default=-6.0, description="Log prior for branches without history")
    lambda_vert: float = Field(default=6.0, ge=0.0, description="Gravitropism penalty weight")
    eps_tol: float = Field(default=0.0, ge=0.0, description="Gravitropism tolerance")
    sigma_m: float = Field(default=0.02, gt=0.0, description="Motion-distance scale")
    topk_global: int = Field(default=3, ge=1, description="Topmost buds used for global uplift")
    motion_window: int = Field(default=3, ge=1, description="Finite-difference window in frames")


class GateParams(_Section):
    """Fusion gate constants."""

    alpha_new: float = Field(default=0.7, ge=0.0, le=1.0)
    alpha_exist: float = Field(default=0.35, ge=0.0, le=1.0)
    alpha_min: float = Field(default=0.05, ge=0.0, le=1.0)
    alpha_max: float = Field(default=0.95, ge=0.0, le=1.0)
    tau_spatial: float = Field(default=1.0, gt=0.0)
    tau_temporal: float = Field(default=1.2, gt=0.0)
    unmatched_logit: float = Field(default=-6.0, description="Constant logit of the unmatched column")
    hidden: int = Field(default=8, ge=1, description="Gate MLP hidden width")
    learning_rate: float = Field(default=1e-2, ge=0.0, description="Gate training learning rate")
    epochs: int = Field(default=30, ge=1)
    seed: int = Field(default=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "GateParams":
        if not (
            self.alpha_min <= min(self.alpha_exist, self.alpha_new)
            and max(self.alpha_exist, self.alpha_new) <= self.alpha_max
        ):
            raise ValueError("gate constants must satisfy alpha_min <= alpha_* <= alpha_max")
        return self


class NetConfig(_Section):
    """Learned scorer settings (desk-scale dimensions)."""

    embed_dim: int = Field(default=32, ge=1)
    heads: int = Field(default=4, ge=1)
    ffn_dim: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=5e-2, ge=0.0)
    gate_learning_rate: Optional[float] = Field(
        default=None, ge=0.0, description="Dedicated gate/unmatched learning rate (defaults to learning_rate)"
    )
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_size: Optional[int] = Field(default=None, ge=1, description="None means full batch")
    epochs: int = Field(default=50, ge=1)
    seed: int = Field(default=0)
    layer_norm_eps: float = Field(default=1e-5, gt=0.0)

    @model_validator(mode="after")
    def _check_heads(self) -> "NetConfig":
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        return self


class MetricsConfig(_Section):
    """Evaluation protocol settings."""

    match_radius: float = Field(default=0.03, gt=0.0, description="Detection match radius")
    mostly_tracked: float = Field(default=0.8, gt=0.0, le=1.0)
    mostly_lost: float = Field(default=0.2, ge=0.0, lt=1.0)
    phase_fractions: Tuple[float, float, float] = Field(
        default=(1 / 3, 1 / 3, 1 / 3), description="Early/mid/late share of each sequence"
    )
    raster_size: int = Field(default=224, ge=16)
    stroke_px: int = Field(default=2, ge=1)
    curve_samples: int = Field(default=1024, ge=2, description="Spline samples per branch")


class TrackingConfig(_Section):
    """Tracking run settings."""

    mode: Literal["spatial", "temporal", "fusion-fixed", "fusion-learned"] = Field(
        default="fusion-fixed"
    )
    split_ratios: Tuple[float, float, float] = Field(default=(0.70, 0.15, 0.15))


class Settings(BaseSettings):
    """Global settings for the branch tracker."""

    simulator: SimConfig = Field(default_factory=SimConfig)
    spatial: SpatialParams = Field(default_factory=SpatialParams)
    temporal: TemporalParams = Field(default_factory=TemporalParams)
    gate: GateParams = Field(default_factory=GateParams)
    net: NetConfig = Field(default_factory=NetConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="BRANCHTRACK_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    @model_validator(mode="after")
    def _sync_tau_temporal(self) -> "Settings":
        """One temporal temperature: whichever section sets it wins, both must agree."""
        in_temporal = "tau_temporal" in self.temporal.model_fields_set
        in_gate = "tau_temporal" in self.gate.model_fields_set
        if in_temporal and in_gate and self.temporal.tau_temporal != self.gate.tau_temporal:
            raise ValueError(
                f"temporal.tau_temporal={self.temporal.tau_temporal} conflicts with "
                f"gate.tau_temporal={self.gate.tau_temporal}"
            )
        if in_temporal:
            self.gate = self.gate.model_copy(update={"tau_temporal": self.temporal.tau_temporal})
        elif in_gate:
            self.temporal = self.temporal.model_copy(update={"tau_temporal": self.gate.tau_temporal})
        return self


def load_settings(path: Optional[Path] = None, **overrides) -> Settings:
    """Load settings from a TOML file with one table per module section.

    Args:
        path: Config file path; None uses defaults (plus environment)
        **overrides: Section dictionaries merged over the file contents

    Returns:
        Validated Settings

    Raises:
        pydantic.ValidationError: If any value violates its section's constraints
        OSError: If the file cannot be read
    """
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    for section, values in overrides.items():
        merged = dict(data.get(section, {}))
        merged.update(values)
        data[section] = merged
    return Settings(**data)


def config_hash(section: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a config section."""
    canonical = json.dumps(section.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
