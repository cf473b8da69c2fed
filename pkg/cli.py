import argparse
import asyncio
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from models.state import ComplexAmplitude
from models.trace import BIN_DURATION, ONSET_FRACTION, DetectorCalibration, PulseKernel, QuantizationThresholds, packet_duration
from services import storage
from services.fitting import REFERENCE_OVERLAP, REFERENCE_R_SQUARED, fit_gaussian, table_report, theory_model
from services.pulse_pipeline import (
    MIN_CALIBRATION_EVENTS,
    calibrate_thresholds,
    estimate_noise,
    estimate_single_photon_height,
    find_events,
    height_histogram,
    photon_histogram,
    quantize_and_bin,
)
from services.tes_sim import sample_arrivals, synthesize_trace
from services.tomography import grid_from_counts, interpolate_grid, point_packet, run_scan, run_scan_async
from utils.cache import ResultCache
from utils.config import ExperimentConfig
from utils.errors import DomainError, WignerPNRError

logger = logging.getLogger("wignerpnr")


def _load_config(args) -> ExperimentConfig:
    """Configuration file with command-line overrides applied to both the
    built objects and the recorded values, so hash and manifest describe the run."""
    config = ExperimentConfig.from_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["run.mode"] = args.mode
    if getattr(args, "cutoff", None) is not None:
        overrides["run.cutoff"] = args.cutoff
    mode = replace(
        config.mode,
        kind=overrides.get("run.mode", config.mode.kind),
        seed=overrides.get("run.seed", config.mode.seed),
        cutoff=overrides.get("run.cutoff", config.mode.cutoff),
    )
    output_dir = Path(args.output_dir) if getattr(args, "output_dir", None) else config.output_dir
    values = {**config.values, **overrides, "run.output_dir": str(output_dir)}
    return replace(config, mode=mode, output_dir=output_dir, values=values)


def _packet_header(config: ExperimentConfig, arrivals, seed: int, **extra) -> dict:
    kernel = config.trace.kernel
    return {
        "baseline": config.trace.baseline,
        "noise_rms": config.trace.noise_rms,
        "seed": seed,
        "kernel": {
            "rise_time": kernel.rise_time,
            "decay_time": kernel.decay_time,
            "unit_height": kernel.unit_height,
        },
        "arrivals": arrivals.to_dict(),
        "config_hash": config.config_hash,
        **extra,
    }


def simulate_command(args) -> int:
    """Write TES packets for one scan point, every scan point, or a plain Poisson stream"""
    config = _load_config(args)
    out = config.output_dir
    probes = config.geometry.probes(config.model.eta)
    drift = np.zeros(len(probes))
    written = []

    if config.simulate.mean_per_bin is not None and not args.all_points:
        seed = config.mode.seed
        arrivals = sample_arrivals(
            poisson_rate=config.simulate.mean_per_bin / BIN_DURATION,
            duration=packet_duration(),
            seed=seed,
            cutoff=config.mode.cutoff,
        )
        packet = synthesize_trace(
            arrivals,
            config.trace.kernel,
            config.trace.noise_rms,
            config.trace.baseline,
            seed=seed + 1,
            background_rate=config.simulate.background_rate,
        )
        header = _packet_header(config, arrivals, seed, mean_per_bin=config.simulate.mean_per_bin)
        written.append(storage.write_packet(out / "packet.bin", packet, header))
    else:
        indices = range(len(probes)) if args.all_points else [config.simulate.point]
        for index in indices:
            if not 0 <= index < len(probes):
                raise DomainError(f"scan point {index} outside the {len(probes)}-point scan")
            packet, arrivals = point_packet(
                index, probes[index], drift[index], config.source, config.model, config.mode, config.trace
            )
            header = _packet_header(
                config, arrivals, config.mode.seed, point_index=index, n_bins=config.mode.bins
            )
            written.append(storage.write_packet(out / f"packet_{index:05d}.bin", packet, header))

    storage.write_json(out / "simulate_manifest.json", {**config.manifest(), "packets": [p.name for p in written]})
    print(f"Wrote {len(written)} packet(s) to {out}")
    return 0


def _calibration(packet, header: dict, single_photon_height: Optional[float]) -> DetectorCalibration:
    noise_mean, noise_rms = estimate_noise(packet)
    if "baseline" in header:
        noise_mean = float(header["baseline"])
    if "noise_rms" in header:
        noise_rms = float(header["noise_rms"])
    kernel = PulseKernel(**header["kernel"]) if "kernel" in header else PulseKernel()
    height = single_photon_height or header.get("kernel", {}).get("unit_height")
    if height is None:
        height = estimate_single_photon_height(packet, (noise_mean, noise_rms))
    return DetectorCalibration(noise_mean, noise_rms, float(height), kernel.crossing_time(ONSET_FRACTION))


def process_command(args) -> int:
    """Packets to events, counts and photon histograms with pooled thresholds"""
    source = Path(args.path)
    paths = sorted(source.glob("*.bin")) if source.is_dir() else [source]
    if not paths:
        raise DomainError(f"no packet files in {source}")
    out = Path(args.output_dir) if args.output_dir else (source if source.is_dir() else source.parent)

    loaded = []
    for path in paths:
        packet, header = storage.read_packet(path)
        calibration = _calibration(packet, header, args.single_photon_height)
        loaded.append((path, packet, header, calibration, find_events(packet, calibration)))

    pooled = np.concatenate([events.peak_heights for *_, events in loaded])
    unit = loaded[0][3].single_photon_height
    if args.manual_thresholds or pooled.size < MIN_CALIBRATION_EVENTS:
        if not args.manual_thresholds:
            logger.info("%d events are too few to calibrate; using nominal thresholds", pooled.size)
        thresholds = QuantizationThresholds.manual(unit, cutoff=args.cutoff)
    else:
        thresholds = calibrate_thresholds(pooled, cutoff=args.cutoff)

    config_hash = loaded[0][2].get("config_hash")
    for path, packet, header, _, events in loaded:
        duration = header["n_bins"] * BIN_DURATION if "n_bins" in header else packet.duration
        quantized = quantize_and_bin(events, thresholds, BIN_DURATION, duration)
        series = quantized.series
        stem = out / path.stem
        storage.write_csv(stem.with_name(f"{path.stem}_events.csv"), storage.events_frame(events, quantized.photons))
        storage.write_csv(stem.with_name(f"{path.stem}_counts.csv"), storage.counts_frame(series))
        storage.write_csv(
            stem.with_name(f"{path.stem}_histogram.csv"), storage.histogram_frame(photon_histogram(series))
        )
        print(f"{path.name}: {len(events)} events, {series.total_photons} photons in {len(series)} bins")

    counts, edges = height_histogram(pooled)
    storage.write_csv(out / "heights_histogram.csv", storage.height_histogram_frame(counts, edges))
    storage.write_json(
        out / "process_manifest.json",
        {
            "thresholds": thresholds.to_dict(),
            "packets": [path.name for path in paths],
            "config_hash": config_hash,
        },
    )
    return 0


def scan_command(args) -> int:
    config = _load_config(args)
    out = config.output_dir
    if args.counts_dir:
        files = sorted(Path(args.counts_dir).glob("*_counts.csv"))
        series = [storage.read_counts(f, BIN_DURATION, config.mode.cutoff) for f in files]
        grid = grid_from_counts(series, config.source, config.geometry, config.model, config.mode)
    else:
        cache = ResultCache(str(out / ".cache")) if config.use_cache else None
        arguments = (config.source, config.geometry, config.model, config.mode, config.trace, cache, config.config_hash)
        if args.sequential:
            grid = run_scan(*arguments)
        else:
            grid = asyncio.run(run_scan_async(*arguments, batch_size=config.batch_size))

    manifest = config.manifest()
    storage.write_grid(out / "grid.csv", grid, manifest)
    if config.geometry.n_amplitude >= 2:
        storage.write_csv(out / "surface.csv", storage.surface_frame(*interpolate_grid(grid)))
    flagged = int(grid.flagged.sum())
    print(f"Scanned {len(grid)} points ({config.mode.kind}), {flagged} flagged; grid written to {out / 'grid.csv'}")
    return 0


def fit_command(args) -> int:
    grid_path = Path(args.grid)
    grid, manifest = storage.read_grid(grid_path)
    source = manifest.get("source", {})
    if source.get("kind") == "phase_diffused":
        raise DomainError("phase-diffused grids are reported as raw grids and not fitted")
    alpha0 = ComplexAmplitude.from_complex(complex(*source.get("alpha0", [0.0, 0.0])))
    if source.get("kind") == "vacuum":
        alpha0 = ComplexAmplitude(0.0, 0.0)

    fit = fit_gaussian(grid, weighted=args.weighted)
    theory = theory_model(alpha0, grid.model)
    out = Path(args.output_dir) if args.output_dir else grid_path.parent
    report = {
        "fit": fit.to_dict(),
        "theory": theory.to_dict(),
        "table": table_report(fit, theory),
        "model": grid.model.to_dict(),
        "reference_overlap": REFERENCE_OVERLAP,
        "reference_r_squared": REFERENCE_R_SQUARED,
        "config_hash": manifest.get("config_hash"),
    }
    storage.write_json(out / "fit.json", report)
    storage.write_csv(out / "residuals.csv", storage.residual_frame(grid, fit))
    print(f"Fit written to {out / 'fit.json'} (R^2 = {fit.r_squared:.4f})")
    return 0


def _format(value, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def report_command(args) -> int:
    """Print the fit, theory and published reference side by side"""
    try:
        report = storage.read_json(Path(args.report))
        rows = report["table"]
    except (OSError, ValueError, KeyError) as e:
        raise DomainError(f"cannot read fit report {args.report}: {e}") from e

    print(f"{'parameter':>10} {'fit':>10} {'stderr':>10} {'theory':>10} {'ref fit':>10} {'ref theory':>10}")
    for row in rows:
        print(
            f"{row['parameter']:>10} {_format(row['fit']):>10} {_format(row['stderr']):>10} "
            f"{_format(row['theory']):>10} {_format(row['reference_fit'], 3):>10} "
            f"{_format(row['reference_theory'], 3):>10}"
        )
    model = report.get("model", {})
    print(f"\nR^2 = {report['fit']['r_squared']:.4f} (reference {report.get('reference_r_squared', REFERENCE_R_SQUARED)})")
    if "overlap" in model:
        print(f"overlap V = {model['overlap']:.5f} from v = {model['v']} (reference {report.get('reference_overlap', REFERENCE_OVERLAP)})")
    if report.get("config_hash"):
        print(f"config {report['config_hash'][:12]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Wigner tomography by photon-number-resolving detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    simulate_parser = subparsers.add_parser("simulate", help="Synthesize TES packet files")
    simulate_parser.add_argument("config", help="Experiment configuration file")
    simulate_parser.add_argument("--all-points", action="store_true", help="One packet per scan point")
    simulate_parser.add_argument("--seed", type=int)
    simulate_parser.add_argument("--cutoff", type=int)
    simulate_parser.add_argument("--output-dir")

    process_parser = subparsers.add_parser("process", help="Turn packets into photon counts")
    process_parser.add_argument("path", help="Packet file or directory of packets")
    process_parser.add_argument("--single-photon-height", type=float)
    process_parser.add_argument("--manual-thresholds", action="store_true")
    process_parser.add_argument("--cutoff", type=int, default=5)
    process_parser.add_argument("--output-dir")

    scan_parser = subparsers.add_parser("scan", help="Scan phase space and write the Wigner grid")
    scan_parser.add_argument("config", help="Experiment configuration file")
    scan_parser.add_argument("--mode", choices=["analytic", "montecarlo", "full_trace"])
    scan_parser.add_argument("--seed", type=int)
    scan_parser.add_argument("--cutoff", type=int)
    scan_parser.add_argument("--counts-dir", help="Assemble the grid from processed count files")
    scan_parser.add_argument("--sequential", action="store_true", help="Evaluate points in one thread")
    scan_parser.add_argument("--output-dir")

    fit_parser = subparsers.add_parser("fit", help="Fit the Gaussian model to a grid")
    fit_parser.add_argument("grid", help="Grid CSV written by scan")
    fit_parser.add_argument("--weighted", action="store_true", help="Weight points by parity variance")
    fit_parser.add_argument("--output-dir")

    report_parser = subparsers.add_parser("report", help="Print a fit report table")
    report_parser.add_argument("report", help="fit.json written by fit")
    return parser


COMMANDS = {
    "simulate": simulate_command,
    "process": process_command,
    "scan": scan_command,
    "fit": fit_command,
    "report": report_command,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)

    command = COMMANDS.get(args.command)
    if command is None:
        parser.print_help()
        return 0
    try:
        return command(args)
    except WignerPNRError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
