from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from utils.errors import DomainError, PacketFormatError

PACKET_SAMPLES = 2**22
SAMPLE_RATE = 5e6
BIT_DEPTH = 14
MAX_SAMPLE = 2**BIT_DEPTH - 1
BIN_DURATION = 1e-4
PEAK_WINDOW = 1.2e-6
BINS_PER_PACKET = int(PACKET_SAMPLES / SAMPLE_RATE / BIN_DURATION)
PEAK_RISE_CONSTANTS = 2.0
ONSET_FRACTION = 0.5


def packet_duration(n_samples: int = PACKET_SAMPLES, sample_rate: float = SAMPLE_RATE) -> float:
    return n_samples / sample_rate


@dataclass(frozen=True)
class PulseKernel:
    """Single-photon TES response: saturating exponential rise whose 10-90 %
    rise equals rise_time, then exponential cooling decay from the peak.

    The rise follows 1 - exp(-t / rise_constant) normalized to reach the full
    height at peak_time = PEAK_RISE_CONSTANTS * rise_constant.
    """

    rise_time: float = 700e-9
    decay_time: float = 2e-6
    unit_height: float = 1000.0
    rise_constant: float = field(init=False)
    peak_time: float = field(init=False)

    def __post_init__(self):
        if self.rise_time <= 0 or self.decay_time <= 0:
            raise DomainError("kernel time constants must be positive")
        if self.unit_height <= 0:
            raise DomainError("unit height must be positive")
        norm = -np.expm1(-PEAK_RISE_CONSTANTS)
        tau_r = self.rise_time / float(np.log((1.0 - 0.1 * norm) / (1.0 - 0.9 * norm)))
        object.__setattr__(self, "rise_constant", tau_r)
        object.__setattr__(self, "peak_time", PEAK_RISE_CONSTANTS * tau_r)

    @property
    def _norm(self) -> float:
        return float(-np.expm1(-self.peak_time / self.rise_constant))

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        rising = -np.expm1(-np.clip(t, 0, None) / self.rise_constant) / self._norm
        decaying = np.exp(-np.clip(t - self.peak_time, 0, None) / self.decay_time)
        shape = np.where(t < self.peak_time, rising, decaying)
        return self.unit_height * np.where(t < 0, 0.0, shape)

    def support(self, decays: float = 12.0) -> float:
        """Time after onset beyond which the kernel is below unit_height * e^-decays"""
        return self.peak_time + decays * self.decay_time

    def support_samples(self, sample_rate: float = SAMPLE_RATE) -> int:
        return int(np.ceil(self.support() * sample_rate)) + 1

    @property
    def area(self) -> float:
        tau_r, t_p = self.rise_constant, self.peak_time
        rise_area = (t_p + tau_r * np.expm1(-t_p / tau_r)) / self._norm
        return self.unit_height * (rise_area + self.decay_time)

    def crossing_time(self, level: float) -> float:
        """Time after onset at which the rising branch reaches level * unit_height"""
        if not 0.0 <= level <= 1.0:
            raise DomainError(f"crossing level must lie in [0, 1], got {level}")
        return float(-self.rise_constant * np.log1p(-level * self._norm))

    def rise_10_90(self) -> float:
        return self.crossing_time(0.9) - self.crossing_time(0.1)


@dataclass(frozen=True)
class ArrivalRecord:
    """Ground-truth photon arrivals in one packet"""

    times: np.ndarray
    multiplicities: np.ndarray
    duration: float = field(default_factory=packet_duration)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        mult = np.asarray(self.multiplicities, dtype=np.int64)
        if times.shape != mult.shape or times.ndim != 1:
            raise DomainError("arrival times and multiplicities must be matching vectors")
        if times.size and (np.any(np.diff(times) <= 0)):
            raise DomainError("arrival times must be strictly increasing")
        if times.size and (times[0] < 0 or times[-1] >= self.duration):
            raise DomainError("arrival times must fall inside the packet")
        if np.any(mult < 1):
            raise DomainError("arrival multiplicities must be >= 1")
        times.setflags(write=False)
        mult.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "multiplicities", mult)

    def __len__(self) -> int:
        return self.times.size

    @property
    def total_photons(self) -> int:
        return int(self.multiplicities.sum())

    @classmethod
    def empty(cls, duration: float = packet_duration()) -> "ArrivalRecord":
        return cls(np.empty(0), np.empty(0, dtype=np.int64), duration)

    def binned(self, tau: float = BIN_DURATION) -> np.ndarray:
        """True photon counts per whole bin of duration tau"""
        n_bins = int(np.floor(self.duration / tau + 1e-9))
        index = np.floor(self.times / tau).astype(np.int64)
        keep = index < n_bins
        return np.bincount(index[keep], weights=self.multiplicities[keep], minlength=n_bins).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "multiplicities": self.multiplicities.tolist(),
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArrivalRecord":
        return cls(
            np.asarray(data["times"], dtype=float),
            np.asarray(data["multiplicities"], dtype=np.int64),
            float(data["duration"]),
        )


@dataclass(frozen=True)
class TracePacket:
    """One digitizer record of PACKET_SAMPLES samples, 14 useful bits stored in uint16 words"""

    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE
    saturated: bool = False

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise PacketFormatError("packet samples must be one-dimensional")
        if samples.size != PACKET_SAMPLES:
            raise PacketFormatError(f"packet holds {samples.size} samples, expected {PACKET_SAMPLES}")
        if (samples.min() < 0 or samples.max() > MAX_SAMPLE):
            raise PacketFormatError(f"packet samples must lie in [0, {MAX_SAMPLE}]")
        samples = samples.astype("<u2")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return packet_duration(self.samples.size, self.sample_rate)

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate


@dataclass(frozen=True)
class DetectorCalibration:
    noise_mean: float
    noise_rms: float
    single_photon_height: float
    # time from photon arrival to the half-height crossing of its rising edge
    onset_delay: float = field(default_factory=lambda: PulseKernel().crossing_time(ONSET_FRACTION))


@dataclass(frozen=True)
class EventRecord:
    time: float
    peak_height: float
    truncated: bool = False


@dataclass(frozen=True)
class EventTable:
    """Columnar event list for one packet: rising-edge start times and peak
    heights above the local pre-edge level."""

    times: np.ndarray
    peak_heights: np.ndarray
    truncated: np.ndarray
    duration: float = field(default_factory=packet_duration)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        heights = np.asarray(self.peak_heights, dtype=float)
        truncated = np.asarray(self.truncated, dtype=bool)
        if not times.shape == heights.shape == truncated.shape:
            raise DomainError("event columns must have equal length")
        if times.size and np.any(np.diff(times) < 0):
            raise DomainError("event times must be non-decreasing")
        for column, value in (("times", times), ("peak_heights", heights), ("truncated", truncated)):
            value.setflags(write=False)
            object.__setattr__(self, column, value)

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self) -> Iterator[EventRecord]:
        for time, height, truncated in zip(self.times, self.peak_heights, self.truncated):
            yield EventRecord(float(time), float(height), bool(truncated))

    @classmethod
    def from_records(cls, records: list[EventRecord], duration: float = packet_duration()) -> "EventTable":
        return cls(
            [r.time for r in records],
            [r.peak_height for r in records],
            [r.truncated for r in records],
            duration,
        )


@dataclass(frozen=True)
class QuantizationThresholds:
    """Peak-height boundaries between photon-number classes.

    Heights below ``floor`` are zero-photon background. Class n (n >= 1)
    spans [boundaries[n-2], boundaries[n-1]); above the last boundary the
    class index keeps growing in steps of ``unit``.
    """

    boundaries: tuple[float, ...]
    floor: float
    unit: float
    cutoff: int = 5

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.boundaries)
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise DomainError("quantization boundaries must be strictly increasing")
        if len(bounds) > self.cutoff:
            raise DomainError(f"{len(bounds)} boundaries exceed cutoff {self.cutoff}")
        if bounds and self.floor >= bounds[0]:
            raise DomainError("zero-photon floor must lie below the first boundary")
        if self.unit <= 0:
            raise DomainError("single-photon unit must be positive")
        object.__setattr__(self, "boundaries", bounds)

    @classmethod
    def manual(cls, single_photon_height: float, n_classes: int = 5, cutoff: int = 5) -> "QuantizationThresholds":
        """Boundaries halfway between integer multiples of a nominal single-photon height"""
        bounds = tuple((k + 0.5) * single_photon_height for k in range(1, n_classes))
        return cls(bounds, floor=0.5 * single_photon_height, unit=single_photon_height, cutoff=cutoff)

    def classify(self, heights) -> np.ndarray:
        heights = np.asarray(heights, dtype=float)
        photons = np.searchsorted(np.asarray(self.boundaries), heights, side="right") + 1
        top = len(self.boundaries) + 1
        last = self.boundaries[-1] if self.boundaries else self.floor
        beyond = np.floor((heights - last) / self.unit).astype(np.int64)
        photons = np.where(photons == top, top + np.clip(beyond, 0, None), photons)
        return np.where(heights < self.floor, 0, photons).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "floor": self.floor,
            "unit": self.unit,
            "cutoff": self.cutoff,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuantizationThresholds":
        return cls(tuple(data["boundaries"]), data["floor"], data["unit"], data["cutoff"])


@dataclass(frozen=True)
class CountSeries:
    """Photon counts per bin of duration tau, bins anchored at packet start"""

    tau: float
    counts: np.ndarray
    cutoff: int = 5

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise DomainError("counts must be a vector")
        if np.any(counts < 0):
            raise DomainError("counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return self.counts.size

    @property
    def overflow(self) -> np.ndarray:
        return self.counts > self.cutoff

    @property
    def overflow_fraction(self) -> float:
        return float(self.overflow.mean()) if self.counts.size else 0.0

    @property
    def total_photons(self) -> int:
        return int(self.counts.sum())
