import json

import numpy as np
import pandas as pd
import pytest

from models.scan import ExperimentModel
from models.trace import PACKET_SAMPLES, ArrivalRecord, CountSeries, EventTable, TracePacket
from services import storage
from services.fitting import fit_gaussian
from services.tomography import run_scan
from utils.errors import PacketFormatError


@pytest.fixture
def packet(rng):
    samples = rng.integers(900, 1100, PACKET_SAMPLES).astype("<u2")
    return TracePacket(samples)


@pytest.fixture
def header():
    return {"baseline": 1000.0, "seed": 3, "arrivals": ArrivalRecord.empty().to_dict()}


def test_packet_round_trip(tmp_path, packet, header):
    path = storage.write_packet(tmp_path / "packet_00000.bin", packet, header)
    loaded, loaded_header = storage.read_packet(path)

    assert path.stat().st_size == PACKET_SAMPLES * 2
    np.testing.assert_array_equal(loaded.samples, packet.samples)
    assert loaded_header["schema_version"] == storage.PACKET_SCHEMA_VERSION
    assert loaded_header["n_samples"] == PACKET_SAMPLES
    assert loaded_header["saturated"] is False
    assert storage.sidecar_path(path).name == "packet_00000.json"


def test_packet_missing_header(tmp_path, packet, header):
    path = storage.write_packet(tmp_path / "p.bin", packet, header)
    storage.sidecar_path(path).unlink()
    with pytest.raises(PacketFormatError, match="missing packet header"):
        storage.read_packet(path)


def test_packet_missing_file(tmp_path):
    with pytest.raises(PacketFormatError):
        storage.read_packet(tmp_path / "absent.bin")


@pytest.mark.parametrize(
    "contents, fragment",
    [
        ("{not json", "corrupted"),
        ("[1, 2]", "not an object"),
        (json.dumps({"schema_version": 1, "sample_rate": 5e6, "seed": 0}), "baseline"),
        (json.dumps({"schema_version": 9, "sample_rate": 5e6, "seed": 0, "baseline": 1000}), "schema"),
    ],
)
def test_packet_bad_header(tmp_path, packet, header, contents, fragment):
    path = storage.write_packet(tmp_path / "p.bin", packet, header)
    storage.sidecar_path(path).write_text(contents)
    with pytest.raises(PacketFormatError, match=fragment):
        storage.read_packet(path)


def test_packet_wrong_size(tmp_path, packet, header):
    path = storage.write_packet(tmp_path / "short.bin", packet, header)
    np.full(1000, 1000, dtype="<u2").tofile(path)
    with pytest.raises(PacketFormatError, match="2000 bytes") as excinfo:
        storage.read_packet(path)
    assert excinfo.value.exit_code == 4


def test_read_packet_yields_full_record(tmp_path, packet, header):
    loaded, _ = storage.read_packet(storage.write_packet(tmp_path / "p.bin", packet, header))
    assert len(loaded) == PACKET_SAMPLES
    assert loaded.duration == pytest.approx(0.8388608)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.json"

    def explode(tmp):
        with open(tmp, "w") as f:
            f.write("partial")
        raise RuntimeError("disk full")

    with pytest.raises(RuntimeError):
        storage.write_atomic(target, explode)
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_events_and_counts_frames(tmp_path):
    events = EventTable([1e-5, 2e-4], [1000.0, 2100.0], [False, True], 3e-4)
    frame = storage.events_frame(events, np.array([1, 2]))
    assert list(frame.columns) == ["time", "peak_height", "truncated", "photons"]

    series = CountSeries(1e-4, np.array([0, 3, 7]), cutoff=5)
    path = storage.write_csv(tmp_path / "counts.csv", storage.counts_frame(series))
    again = storage.read_counts(path, 1e-4, 5)
    np.testing.assert_array_equal(again.counts, series.counts)
    assert pd.read_csv(path)["overflow"].tolist() == [False, False, True]


def test_read_counts_needs_count_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("bin,value\n0,1\n")
    with pytest.raises(PacketFormatError):
        storage.read_counts(path, 1e-4, 5)


def test_grid_round_trip(tmp_path, reference_source, reference_model, small_geometry):
    grid = run_scan(reference_source, small_geometry, reference_model)
    path = storage.write_grid(tmp_path / "grid.csv", grid, {"config_hash": "abc"})
    loaded, manifest = storage.read_grid(path)

    assert manifest["config_hash"] == "abc"
    assert loaded.geometry == small_geometry
    assert loaded.model == reference_model
    np.testing.assert_allclose(loaded.values, grid.values)
    np.testing.assert_allclose(loaded.q, grid.q)
    np.testing.assert_allclose(loaded.p, grid.p)
    assert loaded.points[5].alpha.modulus == pytest.approx(grid.points[5].alpha.modulus)
    assert list(pd.read_csv(path).columns) == storage.GRID_COLUMNS


def test_grid_missing_columns(tmp_path, small_geometry):
    path = tmp_path / "grid.csv"
    path.write_text("q,p\n0,0\n")
    storage.write_json(path.with_suffix(".json"), {"geometry": small_geometry.to_dict(), "model": ExperimentModel().to_dict()})
    with pytest.raises(PacketFormatError, match="W"):
        storage.read_grid(path)


def test_residual_frame(small_geometry, ideal_source):
    grid = run_scan(ideal_source, small_geometry)
    frame = storage.residual_frame(grid, fit_gaussian(grid))
    assert len(frame) == len(grid)
    assert frame["residual"].abs().max() < 1e-4
