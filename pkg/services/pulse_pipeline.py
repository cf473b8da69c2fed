"""Trace processing: edge detection, peak windows, height thresholds and
photon counts per time bin."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d, minimum_filter1d, uniform_filter1d
from scipy.signal import find_peaks

from models.state import PhotonDistribution
from models.trace import (
    BIN_DURATION,
    ONSET_FRACTION,
    PEAK_WINDOW,
    CountSeries,
    DetectorCalibration,
    EventTable,
    PulseKernel,
    QuantizationThresholds,
    TracePacket,
)
from utils.errors import CalibrationError, DomainError

logger = logging.getLogger(__name__)

EDGE_FRACTION = 0.4
EDGE_WINDOW = 5
SMOOTHING = 3
ONSET_LOOKBACK = 2
MIN_CALIBRATION_EVENTS = 200
PROMINENCE_FRACTION = 0.05
MAX_VALLEY_RATIO = 0.5
ZERO_PEAK_RATIO = 0.4
MAD_SCALE = 1.4826


@dataclass(frozen=True)
class QuantizedEvents:
    """Counts per bin and the photon number assigned to each event"""

    series: CountSeries
    photons: np.ndarray


@dataclass(frozen=True)
class ProcessedPacket:
    events: EventTable
    photons: np.ndarray
    counts: CountSeries
    thresholds: QuantizationThresholds


def estimate_noise(packet: TracePacket) -> tuple[float, float]:
    """Baseline level (median) and noise RMS (scaled MAD) of a packet"""
    samples = packet.samples.astype(float)
    if samples.size == 0:
        raise DomainError("cannot estimate noise on an empty packet")
    median = float(np.median(samples))
    rms = float(MAD_SCALE * np.median(np.abs(samples - median)))
    return median, rms


def _smoothed(packet: TracePacket, noise_mean: float) -> np.ndarray:
    return uniform_filter1d(packet.samples.astype(float) - noise_mean, size=SMOOTHING, mode="nearest")


def _pre_edge_levels(smoothed: np.ndarray) -> np.ndarray:
    """Minimum of the EDGE_WINDOW samples strictly before each sample"""
    centered = minimum_filter1d(smoothed, size=EDGE_WINDOW, mode="nearest")
    shift = EDGE_WINDOW // 2 + 1
    levels = np.empty_like(smoothed)
    levels[:shift] = smoothed[0]
    levels[shift:] = centered[:-shift]
    return levels


def detect_edges(
    packet: TracePacket,
    single_photon_height: float,
    noise_mean: float,
) -> np.ndarray:
    """Trigger times of rising edges.

    A sample triggers when the smoothed signal has risen by at least 40 % of
    the single-photon height over the preceding EDGE_WINDOW samples and sits
    that far above the mean noise level. The trigger re-arms once the local
    rise drops below half the threshold, so edges riding on a decaying tail
    are found as separate events.
    """
    if single_photon_height <= 0:
        raise DomainError("single-photon height must be positive")
    threshold = EDGE_FRACTION * single_photon_height
    smoothed = _smoothed(packet, noise_mean)
    rise = smoothed - _pre_edge_levels(smoothed)
    high = (rise >= threshold) & (smoothed >= threshold)
    starts = np.flatnonzero(high & ~np.r_[False, high[:-1]])
    rearm = np.flatnonzero(rise < threshold / 2)

    edges = []
    last = -1
    for k in starts:
        if last >= 0:
            j = np.searchsorted(rearm, last, side="right")
            if j >= rearm.size or rearm[j] >= k:
                continue
        edges.append(k)
        last = k
    logger.debug("%d edges from %d trigger candidates", len(edges), starts.size)
    return np.asarray(edges, dtype=np.int64) / packet.sample_rate


def _onset_times(smoothed, index, heights, levels, width, sample_rate, onset_delay) -> np.ndarray:
    """Where each smoothed rise first reaches ONSET_FRACTION of its peak
    height, interpolated between samples and moved back by onset_delay."""
    n = smoothed.size
    positions = index[:, None] + np.arange(-ONSET_LOOKBACK, width + 1)[None, :]
    values = smoothed[np.clip(positions, 0, n - 1)] - levels[:, None]
    target = ONSET_FRACTION * heights
    above = values >= target[:, None]
    first = np.argmax(above, axis=1)
    rows = np.arange(index.size)
    upper = values[rows, first]
    lower = values[rows, np.maximum(first - 1, 0)]
    step = np.ones(index.size)
    rising = (first > 0) & (upper > lower)
    step[rising] = (target[rising] - lower[rising]) / (upper[rising] - lower[rising])
    crossing = positions[rows, first] - 1 + np.clip(step, 0.0, 1.0)
    crossing = np.where(above.any(axis=1), crossing, index)
    onsets = np.clip(crossing / sample_rate - onset_delay, 0.0, None)
    # merged rises can cross out of trigger order
    return np.maximum.accumulate(onsets)


def extract_peaks(
    packet: TracePacket,
    edges: np.ndarray,
    noise_mean: Optional[float] = None,
    window: float = PEAK_WINDOW,
    min_height: float = 0.0,
    onset_delay: Optional[float] = None,
) -> EventTable:
    """Maximum sample in (t, t + window] above the local pre-edge level.

    Each window is evaluated on its own, so overlapping windows share
    samples. Windows cut by the packet end are flagged as truncated. Event
    times are rising-edge starts: the half-height crossing of each edge less
    the kernel's time to reach half height.
    """
    edges = np.asarray(edges, dtype=float)
    noise_mean = estimate_noise(packet)[0] if noise_mean is None else noise_mean
    if onset_delay is None:
        onset_delay = PulseKernel().crossing_time(ONSET_FRACTION)
    n = len(packet)
    if edges.size == 0:
        return EventTable(np.empty(0), np.empty(0), np.empty(0, dtype=bool), packet.duration)

    smoothed = _smoothed(packet, noise_mean)
    pre_edge = _pre_edge_levels(smoothed)
    index = np.rint(edges * packet.sample_rate).astype(np.int64)
    width = int(round(window * packet.sample_rate))
    offsets = np.arange(1, width + 1)
    positions = index[:, None] + offsets[None, :]
    truncated = positions[:, -1] >= n
    samples = packet.samples.astype(float)
    values = np.where(positions < n, samples[np.clip(positions, 0, n - 1)], -np.inf)
    levels = pre_edge[np.clip(index, 0, n - 1)]
    heights = values.max(axis=1) - levels - noise_mean
    # a window with no samples left has nothing to measure
    heights = np.where(np.isfinite(heights), heights, 0.0)
    times = _onset_times(smoothed, index, heights, levels, width, packet.sample_rate, onset_delay)

    keep = heights >= min_height
    if np.any(truncated):
        logger.debug("%d peak windows truncated at the packet end", int(truncated.sum()))
    return EventTable(times[keep], heights[keep], truncated[keep], packet.duration)


def height_histogram(heights: Sequence[float], bins="fd") -> tuple[np.ndarray, np.ndarray]:
    """Counts and bin edges of the peak-height distribution"""
    heights = np.asarray(heights, dtype=float)
    if heights.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(1)
    edges = np.histogram_bin_edges(heights, bins=bins)
    counts, edges = np.histogram(heights, bins=edges)
    return counts, edges


def calibrate_thresholds(
    heights: Sequence[float],
    cutoff: int = 5,
    min_events: int = MIN_CALIBRATION_EVENTS,
    prominence: float = PROMINENCE_FRACTION,
    max_valley_ratio: float = MAX_VALLEY_RATIO,
) -> QuantizationThresholds:
    """Thresholds at the histogram valleys between photon-number peaks.

    A lowest peak well below half the next one is treated as the zero-photon
    (background) population and sets the floor instead of a class.
    """
    heights = np.asarray(heights, dtype=float)
    if heights.size < min_events:
        raise CalibrationError(f"{heights.size} peak heights, at least {min_events} required")

    counts, edges = height_histogram(heights)
    centers = 0.5 * (edges[:-1] + edges[1:])
    smooth = gaussian_filter1d(counts.astype(float), sigma=1.0, mode="constant")
    floor_prominence = max(prominence * smooth.max(), 4.0 * np.sqrt(smooth.max()))
    peaks, _ = find_peaks(np.r_[0.0, smooth, 0.0], prominence=floor_prominence)
    peaks = peaks - 1
    if peaks.size == 0:
        raise CalibrationError("no peak found in the height histogram")

    def valley(left: int, right: int) -> int:
        segment = smooth[left : right + 1]
        lows = np.flatnonzero(segment == segment.min())
        # middle of a flat (empty) valley floor
        return left + int(lows[(lows.size - 1) // 2])

    floor = None
    if peaks.size >= 2 and centers[peaks[0]] < ZERO_PEAK_RATIO * centers[peaks[1]]:
        floor = float(centers[valley(peaks[0], peaks[1])])
        peaks = peaks[1:]

    valleys = [valley(a, b) for a, b in zip(peaks, peaks[1:])]
    ratios = [smooth[v] / min(smooth[a], smooth[b]) for v, a, b in zip(valleys, peaks, peaks[1:])]
    positions = centers[peaks]
    if any(ratio > max_valley_ratio for ratio in ratios):
        raise CalibrationError(
            "photon-number peaks are not resolved: "
            + ", ".join(f"{p:.0f}" for p in positions),
            peaks=positions,
            valley_ratios=ratios,
        )

    boundaries = tuple(float(centers[v]) for v in valleys[:cutoff])
    unit = float(np.mean(np.diff(positions))) if positions.size >= 2 else float(positions[0])
    if floor is None:
        floor = 0.5 * float(positions[0])
    logger.info(
        "calibrated %d photon classes from %d heights, unit %.1f",
        len(boundaries) + 1,
        heights.size,
        unit,
    )
    return QuantizationThresholds(boundaries, floor=floor, unit=unit, cutoff=cutoff)


def estimate_single_photon_height(packet: TracePacket, noise: Optional[tuple[float, float]] = None) -> float:
    """First histogram peak of a provisional detection pass"""
    noise_mean, noise_rms = noise or estimate_noise(packet)
    provisional = max(15.0 * noise_rms, 1.0)
    edges = detect_edges(packet, provisional, noise_mean)
    events = extract_peaks(packet, edges, noise_mean)
    if len(events) == 0:
        raise CalibrationError("no pulses found to estimate the single-photon height")
    counts, bin_edges = height_histogram(events.peak_heights)
    smooth = gaussian_filter1d(counts.astype(float), sigma=1.0, mode="constant")
    peaks, _ = find_peaks(np.r_[0.0, smooth, 0.0], prominence=PROMINENCE_FRACTION * smooth.max())
    first = peaks[0] - 1
    return float(0.5 * (bin_edges[first] + bin_edges[first + 1]))


def calibrate_detector(packet: TracePacket, single_photon_height: Optional[float] = None) -> DetectorCalibration:
    noise_mean, noise_rms = estimate_noise(packet)
    height = single_photon_height or estimate_single_photon_height(packet, (noise_mean, noise_rms))
    return DetectorCalibration(noise_mean, noise_rms, height)


def quantize_and_bin(
    events: EventTable,
    thr: QuantizationThresholds,
    tau: float = BIN_DURATION,
    packet_duration: Optional[float] = None,
) -> QuantizedEvents:
    """Photon counts per whole bin; each event counts in the bin of its start time"""
    duration = events.duration if packet_duration is None else packet_duration
    n_bins = int(np.floor(duration / tau + 1e-9))
    photons = thr.classify(events.peak_heights)
    index = np.floor(events.times / tau).astype(np.int64)
    keep = index < n_bins
    counts = np.bincount(index[keep], weights=photons[keep], minlength=n_bins).astype(np.int64)
    series = CountSeries(tau, counts, thr.cutoff)
    beyond = int(np.count_nonzero(photons > thr.cutoff))
    if beyond:
        logger.warning("%d events above the %d-photon cutoff", beyond, thr.cutoff)
    return QuantizedEvents(series, photons)


def photon_histogram(series: CountSeries) -> PhotonDistribution:
    """Empirical p(n) over bins; bins above the cutoff form the tail"""
    if len(series) == 0:
        raise DomainError("photon histogram needs at least one bin")
    tally = np.bincount(series.counts, minlength=series.cutoff + 2)
    probs = tally[: series.cutoff + 1] / len(series)
    return PhotonDistribution(probs, tail_mass=series.overflow_fraction)


def process_packet(
    packet: TracePacket,
    calibration: DetectorCalibration,
    thresholds: Optional[QuantizationThresholds] = None,
    tau: float = BIN_DURATION,
    cutoff: int = 5,
) -> ProcessedPacket:
    events = find_events(packet, calibration)
    if thresholds is None:
        thresholds = calibrate_thresholds(events.peak_heights, cutoff=cutoff)
    quantized = quantize_and_bin(events, thresholds, tau, packet.duration)
    return ProcessedPacket(events, quantized.photons, quantized.series, thresholds)


def find_events(packet: TracePacket, calibration: DetectorCalibration) -> EventTable:
    edges = detect_edges(packet, calibration.single_photon_height, calibration.noise_mean)
    return extract_peaks(
        packet,
        edges,
        calibration.noise_mean,
        min_height=EDGE_FRACTION * calibration.single_photon_height,
        onset_delay=calibration.onset_delay,
    )


def process_packets(
    packets: Sequence[TracePacket],
    calibration: Optional[DetectorCalibration] = None,
    thresholds: Optional[QuantizationThresholds] = None,
    tau: float = BIN_DURATION,
    cutoff: int = 5,
) -> list[ProcessedPacket]:
    """Pooled processing: one threshold calibration over all packets' heights,
    then shared read-only for the binning pass."""
    if not packets:
        return []
    calibration = calibration or calibrate_detector(packets[0])
    tables = [find_events(packet, calibration) for packet in packets]
    if thresholds is None:
        pooled = np.concatenate([table.peak_heights for table in tables])
        thresholds = calibrate_thresholds(pooled, cutoff=cutoff)
    results = []
    for packet, table in zip(packets, tables):
        quantized = quantize_and_bin(table, thresholds, tau, packet.duration)
        results.append(ProcessedPacket(table, quantized.photons, quantized.series, thresholds))
    return results
