"""Command-line entry point: generate | track | train | evaluate | report."""

import argparse
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from . import benchmark
from .checkpoint import CheckpointError, load_checkpoint, restore_modules, save_checkpoint
from .config import GateParams, SimConfig, Settings, config_hash, load_settings
from .core import BranchTrackError, SequenceError, split_sequences
from .dataset import ManifestMismatchError, read_dataset, write_dataset
from .fusion import train_gate
from .metrics import evaluate
from .reconstruction import fit_branch_curve
from .reports import write_loss_log, write_report_csv, write_svg_overlay
from .schemas import PlantSequence
from .scorer_net import evaluate_loss, train
from .simulator import generate_dataset
from .tracker import MODES, TrackingError, TrackResult, gate_examples, track_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_simulator_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("simulator")
    for name, field in SimConfig.model_fields.items():
        if name == "seed":
            continue
        group.add_argument(
            f"--{name.replace('_', '-')}",
            dest=f"sim_{name}",
            type=_flag_value,
            default=None,
            help=f"{field.description or name} (JSON value)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchtrack", description=__doc__)
    parser.add_argument("--config", type=Path, help="TOML config file with one table per section")
    parser.add_argument("--seed", type=int, help="Override simulator, gate and scorer seeds")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads")
    parser.add_argument("--strict-schema", action="store_true", help="Reject unknown dataset keys")
    parser.add_argument("-v", "--verbose", action="store_true", help="DEBUG logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="WARNING logging")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("generate", help="Simulate a dataset")
    gen.add_argument("--out", type=Path, required=True, help="Output directory")
    _add_simulator_flags(gen)

    trk = commands.add_parser("track", help="Track every sequence of a dataset")
    trk.add_argument("--data", type=Path, required=True)
    trk.add_argument("--mode", choices=MODES, help="Defaults to tracking.mode from the config")
    trk.add_argument("--checkpoint", type=Path, help="Gate or scorer checkpoint (fusion-learned)")
    trk.add_argument("--out", type=Path, required=True, help="Directory for <stem>.tracks.json")

    trn = commands.add_parser("train", help="Train the gate or the scorer on the training split")
    trn.add_argument("--data", type=Path, required=True)
    trn.add_argument("--target", choices=("gate", "scorer"), required=True)
    trn.add_argument("--out", type=Path, required=True, help="Checkpoint path")
    trn.add_argument("--log", type=Path, help="Loss log CSV (defaults next to the checkpoint)")

    ev = commands.add_parser("evaluate", help="Metric report for track files")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--tracks", type=Path, required=True, help="Directory of track files")
    ev.add_argument("--out", type=Path, required=True, help="Report CSV path")
    ev.add_argument("--svg", type=Path, help="Directory for per-sequence SVG overlays")

    rep = commands.add_parser("report", help="Mode comparison and gravitropism ablation")
    rep.add_argument("--out", type=Path, required=True, help="Benchmark CSV path")
    rep.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    rep.add_argument("--checkpoint", type=Path, help="Adds fusion-learned to the comparison")
    _add_simulator_flags(rep)
    return parser


def _settings(args: argparse.Namespace) -> Settings:
    overrides: Dict[str, Dict[str, Any]] = {}
    sim = {
        key[len("sim_"):]: value
        for key, value in vars(args).items()
        if key.startswith("sim_") and value is not None
    }
    if args.seed is not None:
        sim["seed"] = args.seed
        overrides["gate"] = {"seed": args.seed}
        overrides["net"] = {"seed": args.seed}
    if sim:
        overrides["simulator"] = sim
    return load_settings(args.config, **overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace, settings: Settings) -> int:
    sequences = generate_dataset(settings.simulator, args.threads)
    manifest = write_dataset(
        sequences, args.out, settings.simulator.seed, config_hash(settings.simulator)
    )
    logger.info(f"Dataset hash {manifest.dataset_hash}")
    return EXIT_OK


def _load_learned(path: Optional[Path]):
    if path is None:
        return None, None, None
    checkpoint = load_checkpoint(path)
    gate, net = restore_modules(checkpoint)
    return gate, net, GateParams(**checkpoint.config["gate"])


def cmd_track(args: argparse.Namespace, settings: Settings) -> int:
    mode = args.mode or settings.tracking.mode
    if mode == "fusion-learned" and args.checkpoint is None:
        raise TrackingError("fusion-learned mode requires --checkpoint")
    manifest, sequences = read_dataset(args.data, strict=args.strict_schema)
    gate, net, gate_params = _load_learned(args.checkpoint if mode == "fusion-learned" else None)
    results = track_dataset(sequences, settings, mode, args.threads, gate, net, gate_params)
    args.out.mkdir(parents=True, exist_ok=True)
    for result in results:
        result.dataset_hash = manifest.dataset_hash
        (args.out / f"{result.stem}.tracks.json").write_text(result.model_dump_json(), encoding="utf-8")
    logger.info(f"Tracked {len(results)} sequences in {mode} mode into {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    _, sequences = read_dataset(args.data, strict=args.strict_schema)
    train_split, val_split, _ = split_sequences(sequences, settings.tracking.split_ratios)
    log_path = args.log or args.out.with_suffix(".log.csv")
    if args.target == "gate":
        examples = gate_examples(train_split, settings)
        if not examples:
            raise SequenceError("training split has no usable frames")
        gate, losses = train_gate(examples, settings.gate)
        save_checkpoint(args.out, gate, settings.gate)
    else:
        net, gate, losses = train(train_split, settings.net, settings.temporal, settings.gate)
        val = evaluate_loss(val_split, net, gate, settings.temporal, settings.gate)
        logger.info(f"Validation loss {val:.5f}")
        save_checkpoint(args.out, gate, settings.gate, net, settings.net)
    write_loss_log(losses, log_path)
    logger.info(f"Final training loss {losses[-1] if losses else float('nan'):.5f}")
    return EXIT_OK


def _read_tracks(track_dir: Path, sequences: Sequence[PlantSequence], dataset_hash: str) -> Dict[str, TrackResult]:
    results = {}
    for seq in sequences:
        path = track_dir / f"{seq.stem}.tracks.json"
        result = TrackResult.model_validate_json(path.read_text(encoding="utf-8"))
        if result.dataset_hash != dataset_hash:
            raise ManifestMismatchError(
                f"{path.name} was produced for another dataset",
                expected=dataset_hash,
                actual=result.dataset_hash,
            )
        results[seq.stem] = result
    return results


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    manifest, sequences = read_dataset(args.data, strict=args.strict_schema)
    results = _read_tracks(args.tracks, sequences, manifest.dataset_hash)
    report = evaluate(sequences, {stem: r.tracks for stem, r in results.items()}, settings.metrics)
    write_report_csv(report, args.out)
    if args.svg is not None:
        args.svg.mkdir(parents=True, exist_ok=True)
        for seq in sequences:
            write_svg_overlay(
                args.svg / f"{seq.stem}.svg",
                overlay_polylines(seq, results[seq.stem]),
                settings.metrics.raster_size,
            )
    for name, value in report.aggregates.items():
        logger.info(f"{name}: {value}")
    return EXIT_OK


def overlay_polylines(seq: PlantSequence, result: TrackResult) -> Dict[int, Any]:
    """Fitted curve of every predicted identity over the whole sequence."""
    frames = {f.index: f for f in seq.frames}
    polylines = {}
    for identity, entries in result.tracks.tracks.items():
        origin = None
        for frame in seq.frames:
            for bp in frame.branch_points:
                if bp.id == identity:
                    origin = (bp.x, bp.y)
        if origin is None or not entries:
            continue
        buds = [frames[f].bud_by_id(b).position for f, b in entries]
        polylines[identity] = fit_branch_curve(origin, buds, samples=128).polyline
    return polylines


def cmd_report(args: argparse.Namespace, settings: Settings) -> int:
    gate, net, gate_params = _load_learned(args.checkpoint)
    if gate_params is not None:
        settings = settings.model_copy(update={"gate": gate_params})
    frame = benchmark.run_benchmark(settings, args.seeds, args.threads, gate, net)
    frame.to_csv(args.out, index=False, float_format="%.6f")
    gaps = benchmark.ordering_gaps(frame)
    logger.info(f"BMA gaps per seed:\n{gaps}")
    reduction = benchmark.idsw_reduction(frame, settings.temporal.lambda_vert)
    logger.info(f"IDSW reduction from the gravitropism penalty: {reduction:.3f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "track": cmd_track,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the branchtrack console script."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        settings = _settings(args)
        logger.info(f"Running {args.command}")
        code = COMMANDS[args.command](args, settings)
        logger.info(f"{args.command} finished")
        return code
    except (
        ValidationError, tomllib.TOMLDecodeError, SequenceError,
        ManifestMismatchError, CheckpointError, TrackingError,
    ) as e:
        print(f"branchtrack {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BranchTrackError, OSError) as e:
        print(f"branchtrack {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
