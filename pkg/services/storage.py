"""Files on disk: packet records with JSON sidecars, CSV tables and JSON
manifests. Every write goes to a temporary file that replaces the target."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from models.fit import FitResult
from models.scan import ExperimentModel, ScanGeometry, ScanPoint, WignerGrid
from models.state import ComplexAmplitude, PhotonDistribution
from models.trace import PACKET_SAMPLES, CountSeries, EventTable, TracePacket
from utils.errors import PacketFormatError

logger = logging.getLogger(__name__)

PACKET_SCHEMA_VERSION = 1
PACKET_DTYPE = "<u2"
REQUIRED_HEADER_KEYS = ("schema_version", "sample_rate", "baseline", "seed")
GRID_COLUMNS = ["amp_index", "phase_index", "q", "p", "W", "n_bins", "overflow_fraction", "flagged"]


def write_atomic(path: Path, write: Callable[[str], None]) -> Path:
    """Call write(tmp_path) and move the result onto path"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_json(path: Path, data: dict) -> Path:
    def dump(tmp: str) -> None:
        with open(tmp, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    return write_atomic(path, dump)


def read_json(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    return write_atomic(path, lambda tmp: frame.to_csv(tmp, index=False))


def sidecar_path(packet_path: Path) -> Path:
    return Path(packet_path).with_suffix(".json")


def write_packet(path: Path, packet: TracePacket, header: dict) -> Path:
    """Packet words as little-endian uint16 plus the JSON header next to it"""
    path = Path(path)
    header = {"schema_version": PACKET_SCHEMA_VERSION, "sample_rate": packet.sample_rate, **header}
    header["n_samples"] = len(packet)
    header["saturated"] = packet.saturated
    write_atomic(path, lambda tmp: packet.samples.astype(PACKET_DTYPE).tofile(tmp))
    write_json(sidecar_path(path), header)
    return path


def read_packet(path: Path) -> tuple[TracePacket, dict]:
    path = Path(path)
    header_path = sidecar_path(path)
    if not path.is_file():
        raise PacketFormatError(f"packet file not found: {path}")
    try:
        header = read_json(header_path)
    except FileNotFoundError as e:
        raise PacketFormatError(f"missing packet header {header_path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise PacketFormatError(f"corrupted packet header {header_path}: {e}") from e
    if not isinstance(header, dict):
        raise PacketFormatError(f"packet header {header_path} is not an object")
    missing = [key for key in REQUIRED_HEADER_KEYS if key not in header]
    if missing:
        raise PacketFormatError(f"packet header {header_path} lacks {', '.join(missing)}")
    if header["schema_version"] != PACKET_SCHEMA_VERSION:
        raise PacketFormatError(f"unsupported packet schema {header['schema_version']}")

    size = path.stat().st_size
    if size != PACKET_SAMPLES * 2:
        raise PacketFormatError(f"{path} holds {size} bytes, expected {PACKET_SAMPLES * 2}")
    samples = np.fromfile(path, dtype=PACKET_DTYPE)
    try:
        packet = TracePacket(samples, float(header["sample_rate"]), bool(header.get("saturated", False)))
    except (TypeError, ValueError) as e:
        raise PacketFormatError(f"bad sample rate in {header_path}: {e}") from e
    logger.debug("read %s (%d samples)", path.name, len(packet))
    return packet, header


def events_frame(events: EventTable, photons: Optional[np.ndarray] = None) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "time": events.times,
            "peak_height": events.peak_heights,
            "truncated": events.truncated,
        }
    )
    if photons is not None:
        frame["photons"] = photons
    return frame


def counts_frame(series: CountSeries) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "bin": np.arange(len(series)),
            "start_time": np.arange(len(series)) * series.tau,
            "count": series.counts,
            "overflow": series.overflow,
        }
    )


def read_counts(path: Path, tau: float, cutoff: int) -> CountSeries:
    frame = pd.read_csv(path)
    if "count" not in frame.columns:
        raise PacketFormatError(f"{path} has no 'count' column")
    return CountSeries(tau, frame["count"].to_numpy(dtype=np.int64), cutoff)


def histogram_frame(dist: PhotonDistribution) -> pd.DataFrame:
    n = list(range(dist.probs.size)) + ["overflow"]
    return pd.DataFrame({"n": n, "probability": list(dist.probs) + [dist.tail_mass]})


def height_histogram_frame(counts: np.ndarray, edges: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})


def grid_frame(grid: WignerGrid) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "amp_index": [pt.amp_index for pt in grid],
            "phase_index": [pt.phase_index for pt in grid],
            "q": grid.q,
            "p": grid.p,
            "W": grid.values,
            "n_bins": grid.n_bins,
            "overflow_fraction": grid.overflow_fraction,
            "flagged": grid.flagged,
        },
        columns=GRID_COLUMNS,
    )


def write_grid(path: Path, grid: WignerGrid, manifest: dict) -> Path:
    """Grid CSV plus a JSON manifest with geometry, model and run metadata"""
    path = Path(path)
    write_csv(path, grid_frame(grid))
    write_json(
        path.with_suffix(".json"),
        {
            **manifest,
            "geometry": grid.geometry.to_dict(),
            "model": grid.model.to_dict(),
            "metadata": grid.metadata,
        },
    )
    return path


def read_grid(path: Path) -> tuple[WignerGrid, dict]:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
        manifest = read_json(path.with_suffix(".json"))
    except (OSError, json.JSONDecodeError, pd.errors.ParserError) as e:
        raise PacketFormatError(f"cannot read grid {path}: {e}") from e
    missing = [c for c in GRID_COLUMNS if c not in frame.columns]
    if missing:
        raise PacketFormatError(f"grid {path} lacks columns {', '.join(missing)}")
    geometry = ScanGeometry(**manifest["geometry"])
    model_data = manifest["model"]
    model = ExperimentModel(model_data["eta"], model_data["v"], model_data["t2"])
    scale = np.sqrt(model.eta)
    points = []
    for row in frame.itertuples(index=False):
        beta = ComplexAmplitude.from_complex(complex(row.q, row.p))
        points.append(
            ScanPoint(
                int(row.amp_index),
                int(row.phase_index),
                beta.scaled(1.0 / scale),
                beta,
                float(row.W),
                int(row.n_bins),
                float(row.overflow_fraction),
                bool(row.flagged),
            )
        )
    return WignerGrid(tuple(points), geometry, model, manifest.get("metadata", {})), manifest


def surface_frame(radii: np.ndarray, phases: np.ndarray, values: np.ndarray) -> pd.DataFrame:
    rr, pp = np.meshgrid(radii, phases, indexing="ij")
    return pd.DataFrame({"amplitude": rr.ravel(), "phase": pp.ravel(), "W": values.ravel()})


def residual_frame(grid: WignerGrid, fit: FitResult) -> pd.DataFrame:
    frame = grid_frame(grid)[["amp_index", "phase_index", "q", "p", "W"]].copy()
    frame["residual"] = fit.residuals
    return frame
