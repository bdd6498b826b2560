"""Mode comparison and gravitropism ablation over simulated benchmarks."""

import logging
from typing import List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from .config import Settings
from .fusion import FusionGate
from .metrics import MetricError, bma, gt_labels, mot_metrics, predicted_labels
from .schemas import PlantSequence
from .scorer_net import ScorerNet
from .simulator import generate_dataset
from .tracker import TrackResult, track_dataset

logger = logging.getLogger(__name__)

ANALYTIC_MODES = ("spatial", "temporal", "fusion-fixed")
BENCHMARK_COLUMNS = ["experiment", "seed", "mode", "lambda_vert", "bma", "mota", "idf1", "idsw", "n_buds"]


class RunSummary(BaseModel):
    """Whole-dataset figures of one tracking run."""

    bma: Optional[float]
    mota: Optional[float]
    idf1: Optional[float]
    idsw: int
    n_buds: int


def summarize(sequences: Sequence[PlantSequence], results: Sequence[TrackResult], settings: Settings) -> RunSummary:
    """BMA over every bud, count-weighted MOTA/IDF1 and summed IDSW."""
    predicted: List[Optional[int]] = []
    truth: List[Optional[int]] = []
    idsw = 0
    mota_sum = idf1_sum = 0.0
    n_gt = 0
    cfg = settings.metrics
    for seq, result in zip(sequences, results):
        for frame in seq.frames:
            labels = gt_labels(frame)
            guesses = predicted_labels(result.tracks, frame)
            for bud in frame.buds:
                predicted.append(guesses[bud.id])
                truth.append(labels[bud.id])
        try:
            mot = mot_metrics(
                result.tracks, seq.gt_tracks, seq.frames,
                cfg.match_radius, cfg.mostly_tracked, cfg.mostly_lost,
            )
        except MetricError:
            continue
        idsw += mot.idsw
        mota_sum += mot.mota * mot.n_gt
        idf1_sum += mot.idf1 * mot.n_gt
        n_gt += mot.n_gt
    return RunSummary(
        bma=bma(predicted, truth),
        mota=mota_sum / n_gt if n_gt else None,
        idf1=idf1_sum / n_gt if n_gt else None,
        idsw=idsw,
        n_buds=len(truth),
    )


def _row(experiment: str, seed: int, mode: str, lambda_vert: float, summary: RunSummary) -> dict:
    return {
        "experiment": experiment, "seed": seed, "mode": mode, "lambda_vert": lambda_vert,
        **summary.model_dump(),
    }


def run_benchmark(
    settings: Settings,
    seeds: Sequence[int],
    threads: int = 1,
    gate: Optional[FusionGate] = None,
    scorer: Optional[ScorerNet] = None,
) -> pd.DataFrame:
    """Three-mode comparison plus the lambda_vert on/off ablation for each seed.

    The learned mode joins the comparison when a gate is given.

    Returns:
        One row per (experiment, seed, mode, lambda_vert)
    """
    modes = list(ANALYTIC_MODES) + (["fusion-learned"] if gate is not None else [])
    no_penalty = settings.model_copy(
        update={"temporal": settings.temporal.model_copy(update={"lambda_vert": 0.0})}
    )
    rows = []
    for seed in seeds:
        sim = settings.simulator.model_copy(update={"seed": seed})
        sequences = generate_dataset(sim, threads)
        summaries = {}
        for mode in modes:
            results = track_dataset(sequences, settings, mode, threads, gate, scorer)
            summaries[mode] = summarize(sequences, results, settings)
            rows.append(_row("modes", seed, mode, settings.temporal.lambda_vert, summaries[mode]))
            logger.info(f"Seed {seed} {mode}: BMA {summaries[mode].bma}, IDSW {summaries[mode].idsw}")
        # the penalised arm is the fusion-fixed run above
        if settings.temporal.lambda_vert == 0.0:
            without = summaries["fusion-fixed"]
        else:
            results = track_dataset(sequences, no_penalty, "fusion-fixed", threads)
            without = summarize(sequences, results, no_penalty)
        rows.append(_row(
            "gravitropism", seed, "fusion-fixed", settings.temporal.lambda_vert, summaries["fusion-fixed"]
        ))
        rows.append(_row("gravitropism", seed, "fusion-fixed", 0.0, without))
    return pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)


def ordering_gaps(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-seed BMA gaps fusion-fixed minus temporal and temporal minus spatial."""
    modes = frame[frame["experiment"] == "modes"].pivot(index="seed", columns="mode", values="bma")
    return pd.DataFrame({
        "fusion_minus_temporal": modes["fusion-fixed"] - modes["temporal"],
        "temporal_minus_spatial": modes["temporal"] - modes["spatial"],
    })


def idsw_reduction(frame: pd.DataFrame, lambda_on: float) -> float:
    """Relative reduction of summed IDSW when the gravitropism penalty is enabled."""
    ablation = frame[frame["experiment"] == "gravitropism"]
    with_penalty = ablation.loc[ablation["lambda_vert"] == lambda_on, "idsw"].sum()
    without = ablation.loc[ablation["lambda_vert"] == 0.0, "idsw"].sum()
    if without == 0:
        return 0.0
    return float((without - with_penalty) / without)
