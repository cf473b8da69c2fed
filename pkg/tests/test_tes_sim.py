import numpy as np
import pytest

from models.state import PhotonDistribution
from models.trace import (
    BINS_PER_PACKET,
    MAX_SAMPLE,
    PACKET_SAMPLES,
    ArrivalRecord,
    PulseKernel,
    TracePacket,
    packet_duration,
)
from services.tes_sim import arrivals_from_counts, render_signal, sample_arrivals, synthesize_trace
from utils.errors import DomainError, PacketFormatError, SaturationWarning

SHORT = 2000
SHORT_DURATION = packet_duration(SHORT)


def test_kernel_shape():
    kernel = PulseKernel()
    assert kernel.evaluate(-1e-7) == 0.0
    assert kernel.evaluate(0.0) == pytest.approx(0.0)
    assert kernel.evaluate(kernel.peak_time) == pytest.approx(kernel.unit_height)
    assert kernel.evaluate(kernel.peak_time + kernel.decay_time) == pytest.approx(kernel.unit_height / np.e)
    assert kernel.rise_10_90() == pytest.approx(700e-9, rel=1e-3)
    assert kernel.rise_time < kernel.peak_time < 1.2e-6


@pytest.mark.parametrize("rise_time", [300e-9, 700e-9, 1.5e-6])
def test_kernel_rise_matches_configured_rise(rise_time):
    kernel = PulseKernel(rise_time=rise_time)
    assert kernel.rise_10_90() == pytest.approx(rise_time, rel=1e-9)

    # measured on the sampled shape, not the closed form
    t = np.linspace(0.0, kernel.peak_time, 200_001)
    shape = kernel.evaluate(t) / kernel.unit_height
    measured = t[np.searchsorted(shape, 0.9)] - t[np.searchsorted(shape, 0.1)]
    assert measured == pytest.approx(rise_time, rel=1e-3)


def test_kernel_crossing_times():
    kernel = PulseKernel()
    assert kernel.crossing_time(0.0) == 0.0
    assert kernel.crossing_time(1.0) == pytest.approx(kernel.peak_time)
    half = kernel.crossing_time(0.5)
    assert kernel.evaluate(half) == pytest.approx(0.5 * kernel.unit_height)
    with pytest.raises(DomainError):
        kernel.crossing_time(1.5)


def test_kernel_area_matches_numeric_integral():
    kernel = PulseKernel()
    t = np.linspace(0.0, kernel.support(), 400_001)
    assert np.trapezoid(kernel.evaluate(t), t) == pytest.approx(kernel.area, rel=1e-4)


def test_kernel_rejects_bad_constants():
    with pytest.raises(DomainError):
        PulseKernel(rise_time=0.0)
    with pytest.raises(DomainError):
        PulseKernel(unit_height=-1.0)


def test_packet_lasts_about_0_8389_seconds():
    assert packet_duration() == pytest.approx(0.8388608)
    assert round(packet_duration(), 4) == 0.8389
    assert BINS_PER_PACKET == 8388

    packet = synthesize_trace(ArrivalRecord.empty(), noise_rms=0.0)
    assert len(packet) == PACKET_SAMPLES
    assert packet.duration == pytest.approx(0.8388608)


def test_packet_must_hold_a_full_record():
    with pytest.raises(PacketFormatError, match="4194304"):
        TracePacket(np.full(1000, 1000, dtype="<u2"))
    with pytest.raises(PacketFormatError):
        TracePacket(np.full((2, PACKET_SAMPLES // 2), 1000, dtype="<u2"))


def test_arrivals_from_counts_keep_bin_totals(rng):
    counts = np.array([0, 3, 1, 0, 2])
    arrivals = arrivals_from_counts(counts, rng, tau=1e-4, duration=5e-4)

    assert arrivals.total_photons == 6
    np.testing.assert_array_equal(arrivals.binned(1e-4), counts)


def test_arrivals_from_counts_rejects_overlong_series(rng):
    with pytest.raises(DomainError):
        arrivals_from_counts(np.ones(10, dtype=int), rng, tau=1e-4, duration=5e-4)


def test_poisson_arrivals_are_reproducible():
    first = sample_arrivals(poisson_rate=1e4, seed=3)
    second = sample_arrivals(poisson_rate=1e4, seed=3)
    np.testing.assert_array_equal(first.times, second.times)
    assert not np.array_equal(sample_arrivals(poisson_rate=1e4, seed=4).times, first.times)


def test_poisson_arrivals_rate():
    arrivals = sample_arrivals(poisson_rate=1e4, seed=5)
    per_bin = arrivals.binned(1e-4)
    assert per_bin.size == 8388
    assert per_bin.mean() == pytest.approx(1.0, abs=0.05)
    assert per_bin.var() == pytest.approx(1.0, abs=0.1)


def test_arrivals_from_photon_statistics():
    dist = PhotonDistribution.poisson(0.5, 5)
    arrivals = sample_arrivals(dist, seed=9)
    per_bin = arrivals.binned(1e-4)
    assert per_bin.mean() == pytest.approx(0.5, abs=0.03)
    assert per_bin.max() <= 6


def test_arrivals_need_a_source():
    with pytest.raises(DomainError):
        sample_arrivals()


def test_pileup_budget_warning():
    with pytest.warns(SaturationWarning):
        sample_arrivals(poisson_rate=1e7, duration=1e-4, seed=1)


def test_render_single_arrival_peaks_after_rise():
    kernel = PulseKernel()
    arrivals = ArrivalRecord(np.array([1.3e-6]), np.array([1]), SHORT_DURATION)
    signal = render_signal(arrivals, kernel, n_samples=SHORT)

    # peak at 1.3 + 0.989 us falls between samples 11 and 12
    assert int(np.argmax(signal)) == 11
    assert signal.max() == pytest.approx(float(kernel.evaluate(2.2e-6 - 1.3e-6)), rel=1e-9)
    assert signal.max() > 0.95 * kernel.unit_height
    assert np.all(signal[:7] == 0.0)


def test_render_scales_with_multiplicity():
    one = render_signal(ArrivalRecord([5e-6], [1], SHORT_DURATION), PulseKernel(), SHORT)
    three = render_signal(ArrivalRecord([5e-6], [3], SHORT_DURATION), PulseKernel(), SHORT)
    np.testing.assert_allclose(three, 3.0 * one)


def test_signal_is_additive_over_arrival_sets():
    kernel = PulseKernel()
    first = ArrivalRecord([1e-5, 3e-5, 3.07e-4], [1, 2, 1], SHORT_DURATION)
    second = ArrivalRecord([1.05e-5, 2e-5, 3.0e-4], [1, 1, 3], SHORT_DURATION)
    union_times = np.concatenate([first.times, second.times])
    order = np.argsort(union_times)
    union = ArrivalRecord(
        union_times[order],
        np.concatenate([first.multiplicities, second.multiplicities])[order],
        SHORT_DURATION,
    )

    np.testing.assert_allclose(
        render_signal(union, kernel, SHORT),
        render_signal(first, kernel, SHORT) + render_signal(second, kernel, SHORT),
        atol=1e-9,
    )

    # digitized traces add up to rounding once the baseline is taken off
    packets = [synthesize_trace(r, kernel, noise_rms=0.0, baseline=1000.0) for r in (union, first, second)]
    union_trace, first_trace, second_trace = (p.samples.astype(float) - 1000.0 for p in packets)
    assert np.abs(union_trace - (first_trace + second_trace)).max() <= 1.0


def test_arrivals_half_a_microsecond_apart_pile_up():
    kernel = PulseKernel()
    arrivals = ArrivalRecord([1e-5, 1.05e-5], [1, 1], SHORT_DURATION)
    signal = render_signal(arrivals, kernel, SHORT)
    single = render_signal(ArrivalRecord([1e-5], [1], SHORT_DURATION), kernel, SHORT)

    top = int(np.argmax(signal))
    assert signal.max() > 1.5 * kernel.unit_height
    # the pile-up peak comes after the first pulse alone has started to decay
    assert top / 5e6 > 1e-5 + kernel.peak_time
    assert signal[top] > single[top] + 0.9 * kernel.unit_height
    # one rising edge, no dip between the two arrivals
    onset = int(np.ceil(1e-5 * 5e6))
    assert np.all(np.diff(signal[onset : top + 1]) > 0)


def test_noiseless_trace_is_rounded_signal():
    arrivals = ArrivalRecord([2e-5, 1e-4], [1, 2])
    packet = synthesize_trace(arrivals, noise_rms=0.0, baseline=1000.0)
    expected = np.rint(1000.0 + render_signal(arrivals, PulseKernel()))

    assert packet.samples.dtype == np.dtype("<u2")
    np.testing.assert_array_equal(packet.samples, expected)
    assert not packet.saturated


def test_trace_noise_level_and_seed():
    empty = ArrivalRecord.empty()
    packet = synthesize_trace(empty, noise_rms=100.0, seed=2)
    again = synthesize_trace(empty, noise_rms=100.0, seed=2)

    samples = packet.samples.astype(float)
    assert samples.mean() == pytest.approx(1000.0, abs=1.0)
    assert samples.std() == pytest.approx(100.0, rel=0.01)
    np.testing.assert_array_equal(packet.samples, again.samples)


def test_background_events_stay_below_single_photon():
    packet = synthesize_trace(ArrivalRecord.empty(), noise_rms=0.0, background_rate=2e3, seed=4)
    excess = packet.samples.astype(float) - 1000.0
    assert excess.max() > 0
    assert excess.max() < 1000.0


def test_saturation_is_flagged_and_clipped():
    arrivals = ArrivalRecord([1e-5], [20])
    with pytest.warns(SaturationWarning):
        packet = synthesize_trace(arrivals, noise_rms=0.0)
    assert packet.saturated
    assert packet.samples.max() == MAX_SAMPLE


def test_trace_rejects_bad_settings():
    with pytest.raises(DomainError):
        synthesize_trace(ArrivalRecord.empty(), baseline=15500.0)
    with pytest.raises(DomainError):
        synthesize_trace(ArrivalRecord.empty(), noise_rms=-1.0)
    with pytest.raises(DomainError):
        synthesize_trace(ArrivalRecord.empty(duration=1.0))
