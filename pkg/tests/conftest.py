"""
Shared test data.

Reference experiment, the settings every acceptance test scales down from:

    detected mean photon number   eta |alpha0|^2 = 2.553
    detection efficiency          eta = 0.72
    visibility                    v = 0.98, so V = v / (2 - v) ~= 0.9608
    beamsplitter transmission     t^2 = 0.99

    measured Wigner peak          exp(-2 (1 - V) eta t^2 |alpha0|^2) ~= 0.820
    measured center               sqrt(V eta) t |alpha0| ~= 1.558

Small scans use the same source on coarse grids so each test stays fast.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from models.scan import ExperimentModel, ScanGeometry, ScanMode, SourceState
from models.state import ComplexAmplitude
from models.trace import PulseKernel, QuantizationThresholds
from services import storage
from services.tomography import TraceSettings

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

DETECTED_MEAN = 2.553
ETA = 0.72
VISIBILITY = 0.98
T2 = 0.99


@pytest.fixture
def reference_model():
    return ExperimentModel(eta=ETA, v=VISIBILITY, t2=T2)


@pytest.fixture
def reference_source():
    return SourceState.from_detected_mean(DETECTED_MEAN, ETA)


@pytest.fixture
def ideal_source():
    """Coherent state centered at alpha0 = 1.2 + 0.5i under ideal detection"""
    return SourceState.coherent(ComplexAmplitude.from_complex(1.2 + 0.5j))


@pytest.fixture
def small_geometry():
    return ScanGeometry(n_amplitude=8, n_phase=12, max_amplitude=3.0)


@pytest.fixture
def tiny_geometry():
    return ScanGeometry(n_amplitude=3, n_phase=4, max_amplitude=0.8)


@pytest.fixture
def short_trace():
    """Detector with manual thresholds, no calibration histogram needed"""
    kernel = PulseKernel()
    return TraceSettings(kernel, 100.0, 1000.0, QuantizationThresholds.manual(kernel.unit_height))


@pytest.fixture
def montecarlo_mode():
    return ScanMode.montecarlo(bins=2000, seed=11)


@pytest.fixture
def pileup_fixture():
    with (FIXTURES / "pileup_fixture.json").open() as f:
        return json.load(f)


@pytest.fixture
def pileup_recording(pileup_fixture):
    """The fixture arrivals as a recorded packet file and its header"""
    return storage.read_packet(FIXTURES / pileup_fixture["packet"])


@pytest.fixture
def write_config(tmp_path):
    """Write a key = value experiment file and return its path"""

    def write(values: dict, name: str = "experiment.env") -> Path:
        path = tmp_path / name
        lines = [f"{key} = {value}" for key, value in {"schema_version": 1, **values}.items()]
        path.write_text("\n".join(lines) + "\n")
        return path

    return write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
