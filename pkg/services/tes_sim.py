"""Synthetic TES acquisition: photon arrival streams and digitized traces."""

import logging
import warnings
from typing import Optional, Sequence, Union

import numpy as np

from models.state import PhotonDistribution
from models.trace import (
    BIN_DURATION,
    MAX_SAMPLE,
    PACKET_SAMPLES,
    PEAK_WINDOW,
    SAMPLE_RATE,
    ArrivalRecord,
    PulseKernel,
    TracePacket,
    packet_duration,
)
from utils.errors import DomainError, SaturationWarning

logger = logging.getLogger(__name__)

DEFAULT_BASELINE = 1000.0
DEFAULT_NOISE_RMS = 100.0


def arrivals_from_counts(
    counts: np.ndarray,
    rng: np.random.Generator,
    tau: float = BIN_DURATION,
    duration: Optional[float] = None,
) -> ArrivalRecord:
    """Spread per-bin photon counts uniformly in time inside their bins"""
    counts = np.asarray(counts, dtype=np.int64)
    duration = duration if duration is not None else packet_duration()
    if counts.size * tau > duration * (1 + 1e-12):
        raise DomainError("bins extend beyond the packet duration")
    starts = np.repeat(np.arange(counts.size) * tau, counts)
    times = np.sort(starts + rng.uniform(0.0, tau, size=starts.size))
    # coincident draws become one arrival with multiplicity
    times, multiplicities = np.unique(times, return_counts=True)
    return ArrivalRecord(times, multiplicities, duration)


def sample_arrivals(
    state_stream: Union[PhotonDistribution, Sequence[PhotonDistribution], None] = None,
    poisson_rate: Optional[float] = None,
    duration: float = packet_duration(),
    seed: int = 0,
    tau: float = BIN_DURATION,
    cutoff: int = 5,
) -> ArrivalRecord:
    """Ground-truth arrivals either from a homogeneous Poisson process
    (poisson_rate, photons per second) or from per-bin photon statistics.

    Distribution mass beyond the cutoff is drawn as cutoff + 1 photons.
    """
    if duration <= 0:
        raise DomainError("duration must be positive")
    rng = np.random.default_rng(seed)
    if poisson_rate is not None:
        if poisson_rate < 0:
            raise DomainError("Poisson rate must be non-negative")
        _check_pileup_budget(poisson_rate, cutoff)
        n = rng.poisson(poisson_rate * duration)
        times = np.sort(rng.uniform(0.0, duration, size=n))
        times, multiplicities = np.unique(times, return_counts=True)
        return ArrivalRecord(times, multiplicities, duration)
    if state_stream is None:
        raise DomainError("either state_stream or poisson_rate is required")

    n_bins = int(np.floor(duration / tau + 1e-9))
    streams = [state_stream] * n_bins if isinstance(state_stream, PhotonDistribution) else list(state_stream)
    if len(streams) != n_bins:
        raise DomainError(f"expected {n_bins} per-bin distributions, got {len(streams)}")
    _check_pileup_budget(max(d.mean for d in streams) / tau, cutoff)
    counts = np.array([_draw_count(d, rng) for d in streams], dtype=np.int64)
    return arrivals_from_counts(counts, rng, tau, duration)


def _draw_count(dist: PhotonDistribution, rng: np.random.Generator) -> int:
    probs = np.append(dist.probs, max(0.0, 1.0 - dist.total))
    return int(rng.choice(probs.size, p=probs / probs.sum()))


def _check_pileup_budget(rate: float, cutoff: int) -> None:
    per_window = rate * PEAK_WINDOW
    if per_window > cutoff:
        message = (
            f"{per_window:.2f} photons per {PEAK_WINDOW * 1e6:.1f} us response window "
            f"exceed the cutoff {cutoff}"
        )
        logger.warning(message)
        warnings.warn(message, SaturationWarning)


def render_signal(
    arrivals: ArrivalRecord,
    kernel: PulseKernel,
    n_samples: int = PACKET_SAMPLES,
    sample_rate: float = SAMPLE_RATE,
) -> np.ndarray:
    """Noiseless analog trace above baseline: kernels summed at the arrival times"""
    return _render(arrivals.times, arrivals.multiplicities.astype(float), kernel, n_samples, sample_rate)


def _render(times, weights, kernel: PulseKernel, n_samples: int, sample_rate: float) -> np.ndarray:
    if len(times) == 0:
        return np.zeros(n_samples)
    offsets = np.arange(kernel.support_samples(sample_rate))
    first = np.ceil(np.asarray(times) * sample_rate).astype(np.int64)
    index = first[:, None] + offsets[None, :]
    values = np.asarray(weights)[:, None] * kernel.evaluate(index / sample_rate - np.asarray(times)[:, None])
    inside = index < n_samples
    return np.bincount(index[inside], weights=values[inside], minlength=n_samples)


def synthesize_trace(
    arrivals: ArrivalRecord,
    kernel: PulseKernel = PulseKernel(),
    noise_rms: float = DEFAULT_NOISE_RMS,
    baseline: float = DEFAULT_BASELINE,
    seed: int = 0,
    sample_rate: float = SAMPLE_RATE,
    background_rate: float = 0.0,
    background_scale: float = 0.3,
) -> TracePacket:
    """Digitize kernels at the arrival times plus white Gaussian readout noise
    into one full packet.

    background_rate adds blackbody-like events of background_scale photon
    heights that never reach the single-photon classes.
    """
    if noise_rms < 0:
        raise DomainError("noise RMS must be non-negative")
    if baseline < 0 or baseline + kernel.unit_height >= MAX_SAMPLE:
        raise DomainError(
            f"baseline {baseline} plus one photon ({kernel.unit_height}) leaves no digitizer headroom"
        )
    n_samples = PACKET_SAMPLES
    if arrivals.duration > packet_duration(n_samples, sample_rate) * (1 + 1e-12):
        raise DomainError("arrival record is longer than the packet")
    rng = np.random.default_rng(seed)
    signal = baseline + render_signal(arrivals, kernel, n_samples, sample_rate)
    if background_rate > 0:
        n_background = rng.poisson(background_rate * n_samples / sample_rate)
        times = np.sort(rng.uniform(0.0, n_samples / sample_rate, size=n_background))
        signal += _render(times, np.full(times.size, background_scale), kernel, n_samples, sample_rate)
    if noise_rms > 0:
        signal += rng.normal(0.0, noise_rms, size=n_samples)
    samples = np.rint(signal)
    saturated = bool(samples.max(initial=0) > MAX_SAMPLE or samples.min(initial=0) < 0)
    if saturated:
        n_clipped = int(np.count_nonzero((samples > MAX_SAMPLE) | (samples < 0)))
        message = f"{n_clipped} samples clipped to the {MAX_SAMPLE} digitizer range"
        logger.warning(message)
        warnings.warn(message, SaturationWarning)
    samples = np.clip(samples, 0, MAX_SAMPLE).astype("<u2")
    return TracePacket(samples, sample_rate, saturated)
