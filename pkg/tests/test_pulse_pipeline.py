import numpy as np
import pytest

from models.trace import (
    BINS_PER_PACKET,
    ONSET_FRACTION,
    PACKET_SAMPLES,
    ArrivalRecord,
    CountSeries,
    DetectorCalibration,
    EventTable,
    PulseKernel,
    QuantizationThresholds,
    TracePacket,
)
from services.pulse_pipeline import (
    QuantizedEvents,
    calibrate_detector,
    calibrate_thresholds,
    detect_edges,
    estimate_noise,
    estimate_single_photon_height,
    extract_peaks,
    find_events,
    height_histogram,
    photon_histogram,
    process_packet,
    process_packets,
    quantize_and_bin,
)
from services.tes_sim import sample_arrivals, synthesize_trace
from utils.errors import CalibrationError, DomainError


def pileup_packet(fixture: dict, noise_rms: float) -> TracePacket:
    return synthesize_trace(
        ArrivalRecord.from_dict(fixture["arrivals"]),
        PulseKernel(**fixture["kernel"]),
        noise_rms=noise_rms,
        baseline=fixture["baseline"],
        seed=fixture["seed"],
        sample_rate=fixture["sample_rate"],
    )


@pytest.fixture
def fixture_calibration(pileup_fixture):
    return DetectorCalibration(pileup_fixture["baseline"], pileup_fixture["noise_rms"], 1000.0)


@pytest.fixture
def fixture_thresholds(pileup_fixture):
    return QuantizationThresholds.from_dict(pileup_fixture["manual_thresholds"])


@pytest.fixture(scope="module")
def flat_packet():
    return synthesize_trace(ArrivalRecord.empty(), noise_rms=100.0, baseline=1000.0, seed=3)


def assert_fixture_counts(counts: CountSeries, fixture: dict):
    expected = fixture["expected_counts"]
    assert len(counts) == BINS_PER_PACKET
    assert counts.counts[: len(expected)].tolist() == expected
    assert counts.total_photons == sum(expected)


@pytest.mark.parametrize("noise_rms", [0.0, 30.0])
def test_pileup_fixture_photon_numbers(pileup_fixture, fixture_calibration, fixture_thresholds, noise_rms):
    packet = pileup_packet(pileup_fixture, noise_rms)
    events = find_events(packet, fixture_calibration)

    assert len(events) == 5
    photons = fixture_thresholds.classify(events.peak_heights)
    assert photons.tolist() == pileup_fixture["expected_photons"]
    assert photons.sum() == ArrivalRecord.from_dict(pileup_fixture["arrivals"]).total_photons


def test_pileup_fixture_edge_times(pileup_fixture, fixture_calibration):
    packet = pileup_packet(pileup_fixture, 0.0)
    edges = detect_edges(packet, 1000.0, pileup_fixture["baseline"])
    truth = np.array(pileup_fixture["arrivals"]["times"])[[0, 1, 2, 4, 5]]

    # triggers land within a few samples after onset
    assert np.all(edges >= truth - 1e-9)
    assert np.all(edges - truth < 1e-6)


def test_event_times_are_rising_edge_starts(pileup_fixture, fixture_calibration):
    packet = pileup_packet(pileup_fixture, 0.0)
    times = find_events(packet, fixture_calibration).times
    arrivals = np.array(pileup_fixture["arrivals"]["times"])

    np.testing.assert_allclose(times[[0, 1, 3, 4]], arrivals[[0, 1, 4, 5]], atol=1e-7)
    # the merged pair starts between its two arrivals
    assert arrivals[2] - 1e-7 <= times[2] <= arrivals[3]


def test_onset_delay_comes_from_the_kernel():
    kernel = PulseKernel()
    assert DetectorCalibration(1000.0, 100.0, 1000.0).onset_delay == pytest.approx(kernel.crossing_time(ONSET_FRACTION))
    assert 0.0 < kernel.crossing_time(ONSET_FRACTION) < kernel.rise_time


def test_pileup_fixture_counts(pileup_fixture, fixture_calibration, fixture_thresholds):
    packet = pileup_packet(pileup_fixture, pileup_fixture["noise_rms"])
    result = process_packet(packet, fixture_calibration, fixture_thresholds, tau=pileup_fixture["tau"])

    assert_fixture_counts(result.counts, pileup_fixture)
    assert result.thresholds is fixture_thresholds


def test_recorded_pileup_packet(pileup_fixture, pileup_recording, fixture_thresholds):
    packet, header = pileup_recording
    calibration = DetectorCalibration(
        header["baseline"],
        header["noise_rms"],
        header["kernel"]["unit_height"],
        PulseKernel(**header["kernel"]).crossing_time(ONSET_FRACTION),
    )
    result = process_packet(packet, calibration, fixture_thresholds, tau=pileup_fixture["tau"])

    assert len(packet) == PACKET_SAMPLES
    assert header["seed"] == pileup_fixture["seed"]
    assert result.photons.tolist() == pileup_fixture["expected_photons"]
    assert_fixture_counts(result.counts, pileup_fixture)
    truth = np.array(pileup_fixture["arrivals"]["times"])[[0, 1, 4, 5]]
    np.testing.assert_allclose(result.events.times[[0, 1, 3, 4]], truth, atol=1.5e-7)


def test_estimate_noise(flat_packet):
    mean, rms = estimate_noise(flat_packet)
    assert mean == pytest.approx(1000.0, abs=1.0)
    assert rms == pytest.approx(100.0, rel=0.01)


def test_noise_alone_gives_no_edges(flat_packet):
    assert detect_edges(flat_packet, 1000.0, 1000.0).size == 0


def test_detect_edges_rejects_non_positive_height(flat_packet):
    with pytest.raises(DomainError):
        detect_edges(flat_packet, 0.0, 1000.0)


def test_peak_window_at_packet_end_is_truncated():
    samples = np.full(PACKET_SAMPLES, 1000, dtype="<u2")
    samples[-2:] = 2000
    packet = TracePacket(samples)
    table = extract_peaks(packet, np.array([(PACKET_SAMPLES - 3) / packet.sample_rate]), noise_mean=1000.0)

    assert table.truncated.tolist() == [True]
    assert table.peak_heights[0] == pytest.approx(1000.0)


def test_calibrate_two_resolved_peaks(rng):
    heights = np.concatenate([rng.normal(1000, 80, 5000), rng.normal(2000, 80, 3000)])
    thresholds = calibrate_thresholds(heights)

    assert len(thresholds.boundaries) == 1
    assert thresholds.boundaries[0] == pytest.approx(1500, abs=150)
    assert thresholds.unit == pytest.approx(1000, abs=100)
    assert thresholds.floor == pytest.approx(500, abs=50)
    assert thresholds.classify([1000, 2000]).tolist() == [1, 2]


def test_calibrate_three_classes_misclassifies_rarely(rng):
    means = np.array([1000.0, 2000.0, 3000.0])
    sizes = np.array([50_000, 35_000, 15_000])
    truth = np.repeat([1, 2, 3], sizes)
    heights = rng.normal(means[truth - 1], 100.0)
    thresholds = calibrate_thresholds(heights)

    assert len(thresholds.boundaries) == 2
    assert means[0] < thresholds.boundaries[0] < means[1]
    assert means[1] < thresholds.boundaries[1] < means[2]
    wrong = np.count_nonzero(thresholds.classify(heights) != truth)
    assert wrong / truth.size < 1e-4


def test_calibrate_with_zero_photon_population(rng):
    heights = np.concatenate(
        [rng.normal(300, 80, 3000), rng.normal(1000, 80, 5000), rng.normal(2000, 80, 3000)]
    )
    thresholds = calibrate_thresholds(heights)

    assert 400 < thresholds.floor < 900
    assert len(thresholds.boundaries) == 1
    assert thresholds.classify([300, 1000, 2000]).tolist() == [0, 1, 2]


def test_calibrate_merged_peaks_raises(rng):
    heights = np.concatenate([rng.normal(1000, 150, 10000), rng.normal(1450, 150, 10000)])
    with pytest.raises(CalibrationError) as excinfo:
        calibrate_thresholds(heights)
    assert max(excinfo.value.valley_ratios) > 0.5
    assert len(excinfo.value.peaks) == 2


def test_calibrate_needs_enough_events(rng):
    with pytest.raises(CalibrationError):
        calibrate_thresholds(rng.normal(1000, 30, 50))


def test_manual_thresholds_classify():
    thresholds = QuantizationThresholds.manual(1000.0)
    heights = [100, 600, 1499, 1500, 2600, 4600, 5600, 6700]
    assert thresholds.classify(heights).tolist() == [0, 1, 1, 2, 3, 5, 6, 7]


def test_thresholds_reject_unordered_boundaries():
    with pytest.raises(DomainError):
        QuantizationThresholds((2500.0, 1500.0), floor=500.0, unit=1000.0)
    with pytest.raises(DomainError):
        QuantizationThresholds((1500.0,), floor=1600.0, unit=1000.0)


def test_quantize_and_bin():
    events = EventTable([5e-5, 1.5e-4, 1.6e-4, 3.5e-4], [1000, 2100, 900, 1000], [False] * 4, 3e-4)
    quantized = quantize_and_bin(events, QuantizationThresholds.manual(1000.0), tau=1e-4)

    assert isinstance(quantized, QuantizedEvents)
    assert quantized.photons.tolist() == [1, 2, 1, 1]
    # the event past the last whole bin is dropped
    assert quantized.series.counts.tolist() == [1, 3, 0]
    with pytest.raises(AttributeError):
        quantized.photons = np.zeros(4)


def test_quantize_without_events_gives_empty_packet_bins():
    events = EventTable(np.empty(0), np.empty(0), np.empty(0, dtype=bool))
    series = quantize_and_bin(events, QuantizationThresholds.manual(1000.0)).series

    assert len(series) == 8388
    assert series.total_photons == 0


def test_photon_histogram_tail_is_overflow():
    series = CountSeries(1e-4, np.array([0, 1, 1, 2, 7]), cutoff=5)
    dist = photon_histogram(series)

    np.testing.assert_allclose(dist.probs, [0.2, 0.4, 0.2, 0.0, 0.0, 0.0])
    assert dist.tail_mass == pytest.approx(0.2)


def test_estimate_single_photon_height():
    arrivals = sample_arrivals(poisson_rate=2e4, duration=0.1, seed=12)
    packet = synthesize_trace(arrivals, noise_rms=100.0, seed=13)
    assert estimate_single_photon_height(packet) == pytest.approx(1000.0, rel=0.2)


def test_calibrate_detector_uses_given_height():
    packet = synthesize_trace(ArrivalRecord.empty(), noise_rms=50.0, seed=1)
    calibration = calibrate_detector(packet, single_photon_height=950.0)

    assert calibration.single_photon_height == 950.0
    assert calibration.noise_mean == pytest.approx(1000.0, abs=3.0)


def test_process_packets_shares_one_calibration(pileup_fixture, fixture_calibration, fixture_thresholds):
    packets = [pileup_packet(pileup_fixture, 30.0), pileup_packet(pileup_fixture, 0.0)]
    results = process_packets(packets, fixture_calibration, fixture_thresholds, tau=pileup_fixture["tau"])

    for result in results:
        assert_fixture_counts(result.counts, pileup_fixture)
    assert results[0].thresholds is results[1].thresholds


@pytest.mark.slow
def test_process_packets_pooled_calibration():
    packets = []
    for seed in range(2):
        arrivals = sample_arrivals(poisson_rate=2e4, duration=0.1, seed=20 + seed)
        packets.append(synthesize_trace(arrivals, noise_rms=100.0, seed=40 + seed))
    calibration = DetectorCalibration(1000.0, 100.0, 1000.0)
    results = process_packets(packets, calibration, tau=1e-4)

    assert results[0].thresholds.unit == pytest.approx(1000.0, rel=0.2)
    for result in results:
        assert len(result.counts) == 8388
        assert result.photons.sum() == pytest.approx(2000, rel=0.1)


def ambiguous_followers(arrivals: ArrivalRecord, low: float = 0.8e-6, high: float = 2.0e-6) -> int:
    """Arrivals close enough behind another to be partly inside its peak window"""
    gaps = np.diff(arrivals.times)
    return int(np.count_nonzero((gaps >= low) & (gaps <= high)))


@pytest.mark.slow
def test_poisson_packets_match_ground_truth():
    calibration = DetectorCalibration(1000.0, 100.0, 1000.0)
    # window maxima of noisy samples read about a tenth above the unit
    thresholds = QuantizationThresholds.manual(1100.0)
    matched = total = 0
    for seed in range(20):
        arrivals = sample_arrivals(poisson_rate=0.3 / 1e-4, seed=100 + seed)
        packet = synthesize_trace(arrivals, noise_rms=100.0, baseline=1000.0, seed=200 + seed)
        assert not packet.saturated
        result = process_packet(packet, calibration, thresholds)
        truth = arrivals.binned(1e-4)

        matched += int(np.count_nonzero(result.counts.counts == truth))
        total += truth.size
        # photons are lost only to followers landing at the end of a peak window
        assigned = result.counts.total_photons
        assert arrivals.total_photons - ambiguous_followers(arrivals) <= assigned <= arrivals.total_photons

    assert total == 20 * 8388
    assert matched / total >= 0.999


@pytest.mark.slow
def test_pileup_clusters_conserve_photons(rng):
    starts = np.arange(200) * 1e-4 + rng.uniform(1e-6, 5e-5, 200)
    multiplicities = np.tile([1, 2, 3, 4, 5], 30)
    singles = starts[:150]
    # the rest are pairs 0.3 us apart, merged into one window
    pairs = np.sort(np.concatenate([starts[150:], starts[150:] + 0.3e-6]))
    times = np.concatenate([singles, pairs])
    order = np.argsort(times)
    mult = np.concatenate([multiplicities, np.ones(pairs.size, dtype=int)])[order]
    arrivals = ArrivalRecord(times[order], mult)

    packet = synthesize_trace(arrivals, noise_rms=100.0, baseline=1000.0, seed=5)
    result = process_packet(packet, DetectorCalibration(1000.0, 100.0, 1000.0), QuantizationThresholds.manual(1000.0))

    assert len(result.events) == 200
    assert result.counts.total_photons == arrivals.total_photons
    np.testing.assert_array_equal(result.counts.counts, arrivals.binned(1e-4))


def test_height_histogram(rng):
    heights = rng.normal(1000, 80, 2000)
    counts, edges = height_histogram(heights)

    assert counts.sum() == 2000
    assert edges.size == counts.size + 1
    assert height_histogram([])[0].size == 0
