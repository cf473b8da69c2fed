"""Phase-space scan: detected photon statistics of displaced sources, per-point
parity and the assembled Wigner surface.

The detected mode is the source after transmission t and efficiency eta. A
fraction V of it interferes with the probe; the rest reaches the detector as
a mode-mismatched background. For a coherent component alpha0 the detected
counts are Poisson with mean

    |sqrt(V eta) t alpha0 - beta|^2 + (1 - V) eta t^2 |alpha0|^2

which gives the measured Wigner function exp(-2 * mean).
"""

import asyncio
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import comb

from models.scan import (
    ExperimentModel,
    ScanGeometry,
    ScanMode,
    ScanPoint,
    SourceState,
    WignerGrid,
)
from models.state import ComplexAmplitude, PhotonDistribution
from models.trace import (
    BIN_DURATION,
    ONSET_FRACTION,
    ArrivalRecord,
    CountSeries,
    DetectorCalibration,
    EventTable,
    PulseKernel,
    QuantizationThresholds,
    TracePacket,
    packet_duration,
)
from services import fockspace
from services.pulse_pipeline import calibrate_thresholds, find_events, quantize_and_bin
from services.tes_sim import DEFAULT_BASELINE, DEFAULT_NOISE_RMS, arrivals_from_counts, synthesize_trace
from utils.cache import ResultCache
from utils.errors import DomainError, TruncationError, TruncationWarning

logger = logging.getLogger(__name__)

DRIFT_STREAM = 0x5EED
DEFAULT_BATCH_SIZE = 64


@dataclass(frozen=True)
class TraceSettings:
    """Detector used by full_trace scans"""

    kernel: PulseKernel = PulseKernel()
    noise_rms: float = DEFAULT_NOISE_RMS
    baseline: float = DEFAULT_BASELINE
    thresholds: Optional[QuantizationThresholds] = None


@dataclass(frozen=True)
class BeamsplitterReport:
    r: float
    t: float
    s_expected: float
    prefactor: float
    residual: float
    s_literal: float
    prefactor_literal: float
    residual_literal: float

    @property
    def transmission(self) -> float:
        return self.t**2


def point_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def _component_means(source: SourceState, beta: complex, model: ExperimentModel) -> tuple[np.ndarray, np.ndarray]:
    components = source.components()
    weights = np.array([w for w, _ in components])
    amplitudes = np.array([a.alpha for _, a in components])
    coupling = np.sqrt(model.overlap * model.eta) * model.t
    background = (1.0 - model.overlap) * model.eta * model.t2
    means = np.abs(coupling * amplitudes - beta) ** 2 + background * np.abs(amplitudes) ** 2
    return weights, means


def _raw_distribution(source: SourceState, beta: ComplexAmplitude, model: ExperimentModel, cutoff: Optional[int]) -> PhotonDistribution:
    """Detected statistics of an arbitrary state: loss, split into matched and
    mismatched parts, displacement of the matched part, summed photon numbers."""
    rho = fockspace.attenuate(source.rho, model.eta * model.t2)
    V = model.overlap
    n = np.arange(rho.dim)
    # amplitude for |n> to leave k photons in the matched mode
    split = np.sqrt(np.where(n[None, :] <= n[:, None], comb(n[:, None], n[None, :]), 0.0)
                    * V ** n[None, :] * (1.0 - V) ** np.clip(n[:, None] - n[None, :], 0, None))
    work = fockspace.working_cutoff(rho.cutoff, beta)
    d = fockspace.displacement_matrix(-beta, work)
    total = np.zeros(work + rho.dim + 1)
    for lost in range(rho.dim):
        keep = rho.dim - lost
        k = np.arange(keep)
        amp = split[k + lost, k]
        sigma = rho.elements[lost:, lost:] * amp[:, None] * amp[None, :]
        embedded = np.zeros((work + 1, work + 1), dtype=complex)
        embedded[:keep, :keep] = sigma
        probs = np.real(np.einsum("mi,ij,mj->m", d, embedded, d.conj()))
        total[lost : lost + work + 1] += np.clip(probs, 0.0, None)
    cutoff = total.size - 1 if cutoff is None else cutoff
    head = total[: cutoff + 1]
    return PhotonDistribution(head, tail_mass=max(0.0, 1.0 - float(head.sum())))


def displaced_distribution(
    source: SourceState,
    beta_target: ComplexAmplitude,
    model: ExperimentModel = ExperimentModel(),
    cutoff: int = fockspace.DEFAULT_CUTOFF,
    max_tail: float = fockspace.DEFAULT_MAX_TAIL,
) -> PhotonDistribution:
    """Photon statistics at the detector when the probe places the detected
    mode at beta_target."""
    if source.kind == "raw":
        dist = _raw_distribution(source, beta_target, model, cutoff)
    else:
        weights, means = _component_means(source, beta_target.alpha, model)
        probs = sum(w * PhotonDistribution.poisson(mu, cutoff).probs for w, mu in zip(weights, means))
        dist = PhotonDistribution(np.clip(probs, 0.0, 1.0), tail_mass=max(0.0, 1.0 - float(np.sum(probs))))
    if dist.tail_mass > max_tail:
        mean = float(np.max(means)) if source.kind != "raw" else dist.mean + dist.tail_mass * cutoff
        raise TruncationError(
            f"detected statistics lose {dist.tail_mass:.3e} beyond cutoff {cutoff}",
            tail_mass=dist.tail_mass,
            suggested_cutoff=fockspace.suggest_cutoff(mean, max_tail),
        )
    return dist


def displaced_parity(source: SourceState, beta: ComplexAmplitude, model: ExperimentModel = ExperimentModel()) -> float:
    """Untruncated parity of the detected statistics"""
    if source.kind == "raw":
        dist = _raw_distribution(source, beta, model, None)
        if dist.tail_mass > 1e-8:
            message = f"working space misses {dist.tail_mass:.2e} of the detected statistics"
            logger.warning(message)
            warnings.warn(message, TruncationWarning)
        return fockspace.parity(dist)
    weights, means = _component_means(source, beta.alpha, model)
    return float(np.dot(weights, np.exp(-2.0 * means)))


def measured_wigner_theory(beta: ComplexAmplitude, alpha0: ComplexAmplitude, model: ExperimentModel) -> float:
    """Measured Wigner value of a coherent source including loss and overlap"""
    V = model.overlap
    center = np.sqrt(V * model.eta) * model.t * alpha0.alpha
    return float(np.exp(-2.0 * abs(beta.alpha - center) ** 2 - 2.0 * (1.0 - V) * model.eta * model.t2 * alpha0.intensity))


def theory_center(alpha0: ComplexAmplitude, model: ExperimentModel) -> complex:
    return complex(np.sqrt(model.overlap * model.eta) * model.t * alpha0.alpha)


def theory_peak(alpha0: ComplexAmplitude, model: ExperimentModel) -> float:
    return float(np.exp(-2.0 * (1.0 - model.overlap) * model.eta * model.t2 * alpha0.intensity))


def phase_diffused_mixture(
    alpha0: ComplexAmplitude,
    modulation: str = "sinusoidal",
    depth: float = np.pi,
    n_components: int = 64,
    frequency: float = 100.0,
) -> SourceState:
    """Coherent states at the phases a modulated mirror visits in equal time
    steps over one period (arcsine law), or uniformly spread phases."""
    if n_components < 2:
        raise DomainError("a phase-diffused mixture needs at least 2 components")
    k = np.arange(n_components)
    if modulation == "sinusoidal":
        if depth < 0:
            raise DomainError(f"modulation depth must be non-negative, got {depth}")
        phases = depth * np.sin(2.0 * np.pi * (k + 0.5) / n_components)
        label = f"sinusoidal {frequency:g} Hz, depth {depth:.4g} rad"
    elif modulation == "uniform":
        phases = 2.0 * np.pi * k / n_components
        label = "uniform"
    else:
        raise DomainError(f"unknown modulation {modulation!r}")
    weights = np.full(n_components, 1.0 / n_components)
    weights[-1] = 1.0 - weights[:-1].sum()
    return SourceState("phase_diffused", alpha0, tuple(weights), tuple(phases), label=label)


def beamsplitter_finite_r_check(
    alpha0: ComplexAmplitude,
    r: float,
    s_expected: Optional[float] = None,
    offsets: Optional[np.ndarray] = None,
) -> BeamsplitterReport:
    """Compare output-origin parity of a finite-reflectivity beamsplitter with
    the s-ordered function of the input at (r/t) gamma, fitting one prefactor.

    The output mode carries t alpha0 - r gamma for a local oscillator gamma.
    Exact algebra gives s = -r^2/t^2 with prefactor 1/t^2; the report also
    carries the residual for s = -r/t.
    """
    if not 0.0 < r < 1.0:
        raise DomainError(f"reflectivity must lie in (0, 1), got {r}")
    t = float(np.sqrt(1.0 - r**2))
    s_expected = -(r**2) / t**2 if s_expected is None else s_expected
    if offsets is None:
        radii = np.linspace(0.0, 1.2, 7)
        angles = np.linspace(0.0, 2.0 * np.pi, 5, endpoint=False)
        offsets = (radii[:, None] * np.exp(1j * angles[None, :])).ravel()
    gammas = (t * alpha0.alpha + np.asarray(offsets)) / r

    exact = []
    for gamma in gammas:
        out = ComplexAmplitude.from_complex(t * alpha0.alpha - r * gamma)
        cutoff = fockspace.suggest_cutoff(out.intensity, 1e-16)
        state = fockspace.coherent_state(out, cutoff=cutoff, max_tail=1e-12)
        exact.append(fockspace.parity(state.photon_distribution()))
    exact = np.array(exact)

    def compare(s: float) -> tuple[float, float]:
        model = np.array([
            fockspace.s_ordered_coherent(ComplexAmplitude.from_complex(r / t * g), alpha0, s) for g in gammas
        ])
        prefactor = float(np.dot(exact, model) / np.dot(model, model))
        return prefactor, float(np.max(np.abs(exact - prefactor * model)))

    prefactor, residual = compare(s_expected)
    s_literal = -r / t
    prefactor_literal, residual_literal = compare(s_literal)
    logger.debug("beamsplitter r=%.3f: residual %.2e at s=%.4f, %.2e at s=%.4f", r, residual, s_expected, residual_literal, s_literal)
    return BeamsplitterReport(r, t, s_expected, prefactor, residual, s_literal, prefactor_literal, residual_literal)


def _drift_phases(n_points: int, mode: ScanMode) -> np.ndarray:
    if mode.drift_rms == 0:
        return np.zeros(n_points)
    rng = np.random.default_rng(np.random.SeedSequence(mode.seed, spawn_key=(DRIFT_STREAM,)))
    return np.cumsum(rng.normal(0.0, mode.drift_rms, size=n_points))


def _sample_counts(
    source: SourceState,
    beta: ComplexAmplitude,
    model: ExperimentModel,
    mode: ScanMode,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-bin photon counts; counts above the cutoff stay as drawn"""
    if source.kind == "raw":
        dist = _raw_distribution(source, beta, model, None)
        probs = np.append(dist.probs, dist.tail_mass)
        return rng.choice(probs.size, size=mode.bins, p=probs / probs.sum())
    weights, means = _component_means(source, beta.alpha, model)
    if means.size == 1:
        return rng.poisson(means[0], size=mode.bins)
    chosen = rng.choice(means.size, size=mode.bins, p=weights)
    return rng.poisson(means[chosen])


def parity_estimate(counts: np.ndarray, cutoff: int) -> tuple[float, float]:
    """Mean parity over bins inside the cutoff and the overflow fraction"""
    counts = np.asarray(counts)
    inside = counts <= cutoff
    overflow = 1.0 - float(inside.mean()) if counts.size else 0.0
    if not np.any(inside):
        return 0.0, overflow
    return float(np.mean(1 - 2 * (counts[inside] % 2))), overflow


def _make_point(index, probe, value, n_bins, overflow, mode: ScanMode) -> ScanPoint:
    i, j, alpha, beta = probe
    flagged = overflow > mode.overflow_limit
    if flagged:
        logger.debug("point (%d, %d) flagged: overflow %.2e", i, j, overflow)
    return ScanPoint(i, j, alpha, beta, float(np.clip(value, -1.0, 1.0)), n_bins, overflow, flagged)


def _rotated(beta: ComplexAmplitude, drift: float) -> ComplexAmplitude:
    return ComplexAmplitude.from_complex(beta.alpha * np.exp(-1j * drift)) if drift else beta


def _evaluate_point(index, probe, drift, source, model, mode: ScanMode) -> ScanPoint:
    beta = _rotated(probe[3], drift)
    if mode.kind == "analytic":
        return _make_point(index, probe, displaced_parity(source, beta, model), 0, 0.0, mode)
    rng = np.random.default_rng(point_seed(mode.seed, index))
    counts = _sample_counts(source, beta, model, mode, rng)
    value, overflow = parity_estimate(counts, mode.cutoff)
    return _make_point(index, probe, value, counts.size, overflow, mode)


def point_packet(index, probe, drift, source, model, mode: ScanMode, trace: TraceSettings) -> tuple[TracePacket, ArrivalRecord]:
    """Packet a full_trace scan renders for one point, with its ground truth"""
    beta = _rotated(probe[3], drift)
    rng = np.random.default_rng(point_seed(mode.seed, index))
    counts = _sample_counts(source, beta, model, mode, rng)
    arrivals = arrivals_from_counts(counts, rng, BIN_DURATION, packet_duration())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        packet = synthesize_trace(
            arrivals,
            trace.kernel,
            trace.noise_rms,
            trace.baseline,
            seed=int(rng.integers(2**63)),
        )
    if packet.saturated:
        logger.warning("packet for point %d clipped at the digitizer range", index)
    return packet, arrivals


def trace_calibration(trace: TraceSettings) -> DetectorCalibration:
    return DetectorCalibration(
        trace.baseline,
        trace.noise_rms,
        trace.kernel.unit_height,
        trace.kernel.crossing_time(ONSET_FRACTION),
    )


def _trace_events(index, probe, drift, source, model, mode: ScanMode, trace: TraceSettings) -> EventTable:
    packet, _ = point_packet(index, probe, drift, source, model, mode, trace)
    return find_events(packet, trace_calibration(trace))


def _cached_events(cache: Optional[ResultCache], key: str, compute) -> EventTable:
    if cache is None:
        return compute()
    cached = cache.get(key)
    if cached is not None:
        logger.debug("cache hit for %s", key)
        return EventTable(cached["times"], cached["heights"], cached["truncated"], cached["duration"])
    table = compute()
    cache.set(
        key,
        {
            "times": table.times.tolist(),
            "heights": table.peak_heights.tolist(),
            "truncated": table.truncated.tolist(),
            "duration": table.duration,
        },
    )
    return table


def _finish_trace_scan(tables, probes, mode: ScanMode, trace: TraceSettings) -> list[ScanPoint]:
    thresholds = trace.thresholds
    if thresholds is None:
        pooled = np.concatenate([t.peak_heights for t in tables]) if tables else np.empty(0)
        thresholds = calibrate_thresholds(pooled, cutoff=mode.cutoff)
    points = []
    for index, (probe, table) in enumerate(zip(probes, tables)):
        series = quantize_and_bin(table, thresholds, BIN_DURATION, mode.bins * BIN_DURATION).series
        value, overflow = parity_estimate(series.counts, mode.cutoff)
        points.append(_make_point(index, probe, value, len(series), overflow, mode))
    return points


def _assemble(points, source, geom, model, mode: ScanMode, drift: np.ndarray) -> WignerGrid:
    flagged = sum(pt.flagged for pt in points)
    if flagged:
        logger.info("%d of %d scan points flagged for overflow", flagged, len(points))
    metadata = {
        "source": source.to_dict(),
        "mode": mode.to_dict(),
        "flagged_points": int(flagged),
        "acquisition_time": geom.acquisition_time(mode.bins, BIN_DURATION),
        "max_drift": float(np.max(np.abs(drift))) if drift.size else 0.0,
    }
    return WignerGrid(tuple(points), geom, model, metadata)


def _cache_key(namespace: str, index: int) -> str:
    return f"{namespace}:point:{index}"


def run_scan(
    source: SourceState,
    geom: ScanGeometry = ScanGeometry(),
    model: ExperimentModel = ExperimentModel(),
    mode: ScanMode = ScanMode(),
    trace: TraceSettings = TraceSettings(),
    cache: Optional[ResultCache] = None,
    cache_namespace: str = "",
) -> WignerGrid:
    """Parity at every probe point, circle by circle"""
    probes = geom.probes(model.eta)
    drift = _drift_phases(len(probes), mode)
    logger.info("scanning %d points in %s mode", len(probes), mode.kind)
    if mode.kind == "full_trace":
        tables = [
            _cached_events(
                cache,
                _cache_key(cache_namespace, index),
                lambda index=index, probe=probe: _trace_events(index, probe, drift[index], source, model, mode, trace),
            )
            for index, probe in enumerate(probes)
        ]
        points = _finish_trace_scan(tables, probes, mode, trace)
    else:
        points = [
            _evaluate_point(index, probe, drift[index], source, model, mode)
            for index, probe in enumerate(probes)
        ]
    return _assemble(points, source, geom, model, mode, drift)


async def run_scan_async(
    source: SourceState,
    geom: ScanGeometry = ScanGeometry(),
    model: ExperimentModel = ExperimentModel(),
    mode: ScanMode = ScanMode(),
    trace: TraceSettings = TraceSettings(),
    cache: Optional[ResultCache] = None,
    cache_namespace: str = "",
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> WignerGrid:
    """Same grid as run_scan, with points evaluated in worker threads batch by batch"""
    probes = geom.probes(model.eta)
    drift = _drift_phases(len(probes), mode)
    results = []
    for start in range(0, len(probes), batch_size):
        batch = list(enumerate(probes))[start : start + batch_size]
        logger.info("processing points %d-%d of %d", start, start + len(batch) - 1, len(probes))
        if mode.kind == "full_trace":
            tasks = [
                asyncio.to_thread(
                    _cached_events,
                    cache,
                    _cache_key(cache_namespace, index),
                    lambda index=index, probe=probe: _trace_events(index, probe, drift[index], source, model, mode, trace),
                )
                for index, probe in batch
            ]
        else:
            tasks = [
                asyncio.to_thread(_evaluate_point, index, probe, drift[index], source, model, mode)
                for index, probe in batch
            ]
        results.extend(await asyncio.gather(*tasks))
    points = _finish_trace_scan(results, probes, mode, trace) if mode.kind == "full_trace" else results
    return _assemble(points, source, geom, model, mode, drift)


def grid_from_counts(
    series: list[CountSeries],
    source: SourceState,
    geom: ScanGeometry,
    model: ExperimentModel,
    mode: ScanMode,
) -> WignerGrid:
    """Grid from count series already binned per point, in scan order"""
    probes = geom.probes(model.eta)
    if len(series) != len(probes):
        raise DomainError(f"{len(series)} count series for {len(probes)} scan points")
    points = []
    for index, (probe, counts) in enumerate(zip(probes, series)):
        value, overflow = parity_estimate(counts.counts, mode.cutoff)
        points.append(_make_point(index, probe, value, len(counts), overflow, mode))
    return _assemble(points, source, geom, model, mode, np.zeros(len(probes)))


def interpolate_grid(grid: WignerGrid, n_amplitude: int = 22, n_phase: int = 40) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resample the polar surface on a coarser (|beta|, phase) lattice, periodic in phase"""
    geom = grid.geometry
    if geom.n_amplitude < 2:
        raise DomainError("interpolation needs at least two amplitude steps")
    radii = geom.probe_amplitudes(grid.model.eta) * np.sqrt(grid.model.eta)
    phases = np.append(geom.phases(), 2.0 * np.pi)
    surface = grid.surface()
    surface = np.concatenate([surface, surface[:, :1]], axis=1)
    interpolator = RegularGridInterpolator((radii, phases), surface)
    new_radii = np.linspace(radii[0], radii[-1], n_amplitude)
    new_phases = 2.0 * np.pi * np.arange(n_phase) / n_phase
    rr, pp = np.meshgrid(new_radii, new_phases, indexing="ij")
    values = interpolator(np.stack([rr.ravel(), pp.ravel()], axis=-1)).reshape(rr.shape)
    return new_radii, new_phases, values
