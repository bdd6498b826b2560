"""CSV report tables and SVG polyline overlays."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd

from .metrics import MetricReport

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["plant", "view", "phase", "metric", "value", "count", "aggregate"]
# tab10-like palette; identities map onto it by id
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def report_frame(report: MetricReport) -> pd.DataFrame:
    """Stratum rows followed by one aggregate row per metric."""
    rows = [row.model_dump() for row in report.rows + report.aggregate_rows()]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def write_report_csv(report: MetricReport, path: Path) -> pd.DataFrame:
    frame = report_frame(report)
    frame.to_csv(path, index=False, float_format="%.6f")
    logger.info(f"Wrote {len(frame)} report rows to {path}")
    return frame


def write_loss_log(losses: Sequence[float], path: Path) -> None:
    """Training log with columns epoch, loss."""
    pd.DataFrame({"epoch": range(len(losses)), "loss": list(losses)}).to_csv(
        path, index=False, float_format="%.8f"
    )


def identity_color(identity: int) -> str:
    return PALETTE[identity % len(PALETTE)]


def svg_overlay(polylines_by_identity: Mapping[int, np.ndarray], size: int = 224) -> str:
    """SVG document drawing each identity's normalized polyline in its own colour."""
    parts: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for identity in sorted(polylines_by_identity):
        points = np.asarray(polylines_by_identity[identity], dtype=float).reshape(-1, 2) * (size - 1)
        if len(points) == 0:
            continue
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        color = identity_color(identity)
        parts.append(
            f'<polyline data-identity="{identity}" points="{coords}" fill="none" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        tip_x, tip_y = points[-1]
        parts.append(f'<circle cx="{tip_x:.2f}" cy="{tip_y:.2f}" r="3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg_overlay(
    path: Path, polylines_by_identity: Dict[int, np.ndarray], size: int = 224
) -> None:
    Path(path).write_text(svg_overlay(polylines_by_identity, size), encoding="utf-8")
    logger.info(f"Wrote overlay {path} ({len(polylines_by_identity)} identities)")
