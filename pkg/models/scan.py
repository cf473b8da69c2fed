from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from models.state import ComplexAmplitude, DensityMatrix
from models.trace import BINS_PER_PACKET
from utils.errors import DomainError

SOURCE_KINDS = ("vacuum", "coherent", "phase_diffused", "raw")

# acquisition timing of the phase-space scan
EOM_SETTLING = 2.0
PHASE_SWITCHING = 10e-3


@dataclass(frozen=True)
class ExperimentModel:
    """Loss and mode-overlap parameters between source and detector"""

    eta: float = 1.0
    v: float = 1.0
    t2: float = 1.0

    def __post_init__(self):
        for name in ("eta", "v", "t2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")

    @property
    def overlap(self) -> float:
        """V = v / (2 - v)"""
        return self.v / (2.0 - self.v)

    @property
    def t(self) -> float:
        return float(np.sqrt(self.t2))

    @property
    def r(self) -> float:
        return float(np.sqrt(1.0 - self.t2))

    @classmethod
    def ideal(cls) -> "ExperimentModel":
        return cls()

    def to_dict(self) -> dict:
        return {"eta": self.eta, "v": self.v, "t2": self.t2, "overlap": self.overlap}


@dataclass(frozen=True)
class ScanGeometry:
    """Polar scan in beta: circles of increasing radius, phases uniform on [0, 2pi)"""

    n_amplitude: int = 40
    n_phase: int = 60
    max_amplitude: float = 3.0

    def __post_init__(self):
        if self.n_amplitude < 1 or self.n_phase < 1:
            raise DomainError("scan needs at least one amplitude and one phase step")
        if self.max_amplitude < 0:
            raise DomainError("maximum amplitude must be non-negative")

    @property
    def n_points(self) -> int:
        return self.n_amplitude * self.n_phase

    def phases(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_phase) / self.n_phase

    def probe_amplitudes(self, eta: float) -> np.ndarray:
        """Probe |alpha| values whose detected amplitudes sqrt(eta)|alpha| span [0, max_amplitude]"""
        if eta <= 0:
            raise DomainError("detection efficiency must be positive to scan")
        return np.linspace(0.0, self.max_amplitude / np.sqrt(eta), self.n_amplitude)

    def probes(self, eta: float) -> list[tuple[int, int, ComplexAmplitude, ComplexAmplitude]]:
        """(amp_index, phase_index, alpha, beta) in scan order"""
        scale = float(np.sqrt(eta))
        points = []
        for i, modulus in enumerate(self.probe_amplitudes(eta)):
            for j, phase in enumerate(self.phases()):
                alpha = ComplexAmplitude.from_polar(modulus, phase)
                points.append((i, j, alpha, alpha.scaled(scale)))
        return points

    def acquisition_time(self, bins_per_point: int, tau: float) -> float:
        """Wall time of the physical scan: EOM settling per circle, switching and counting per point"""
        return self.n_amplitude * EOM_SETTLING + self.n_points * (PHASE_SWITCHING + bins_per_point * tau)

    def to_dict(self) -> dict:
        return {
            "n_amplitude": self.n_amplitude,
            "n_phase": self.n_phase,
            "max_amplitude": self.max_amplitude,
        }


@dataclass(frozen=True)
class SourceState:
    """State entering the displacement beamsplitter.

    Coherent-type sources are a weighted set of coherent components; a raw
    source carries an arbitrary density matrix.
    """

    kind: str
    alpha0: ComplexAmplitude = ComplexAmplitude(0.0, 0.0)
    weights: tuple[float, ...] = (1.0,)
    phases: tuple[float, ...] = (0.0,)
    rho: Optional[DensityMatrix] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise DomainError(f"unknown source kind {self.kind!r}")
        if self.kind == "raw" and self.rho is None:
            raise DomainError("raw source requires a density matrix")
        if len(self.weights) != len(self.phases) or not self.weights:
            raise DomainError("mixture weights and phases must match")
        weights = np.asarray(self.weights, dtype=float)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise DomainError("mixture weights must be non-negative and sum to 1")

    @classmethod
    def vacuum(cls) -> "SourceState":
        return cls("vacuum")

    @classmethod
    def coherent(cls, alpha0: ComplexAmplitude) -> "SourceState":
        return cls("coherent", alpha0)

    @classmethod
    def from_detected_mean(cls, detected_mean: float, eta: float, phase: float = 0.0) -> "SourceState":
        """Coherent source with eta |alpha0|^2 = detected_mean"""
        if detected_mean < 0 or eta <= 0:
            raise DomainError("detected mean must be >= 0 and efficiency > 0")
        return cls.coherent(ComplexAmplitude.from_polar(np.sqrt(detected_mean / eta), phase))

    @classmethod
    def raw(cls, rho: DensityMatrix) -> "SourceState":
        return cls("raw", rho=rho)

    def components(self) -> list[tuple[float, ComplexAmplitude]]:
        """(weight, coherent amplitude) of each mixture component"""
        if self.kind == "raw":
            raise DomainError("raw sources have no coherent decomposition")
        if self.kind == "vacuum":
            return [(1.0, ComplexAmplitude(0.0, 0.0))]
        return [
            (w, ComplexAmplitude.from_polar(self.alpha0.modulus, self.alpha0.phase + phi))
            for w, phi in zip(self.weights, self.phases)
        ]

    def to_dict(self) -> dict:
        data = {"kind": self.kind, "label": self.label}
        if self.kind != "raw":
            data.update(
                alpha0=[self.alpha0.alpha.real, self.alpha0.alpha.imag],
                n_components=len(self.weights),
            )
        else:
            data["cutoff"] = self.rho.cutoff
        return data


@dataclass(frozen=True)
class ScanPoint:
    amp_index: int
    phase_index: int
    alpha: ComplexAmplitude
    beta: ComplexAmplitude
    value: float
    n_bins: int = 0
    overflow_fraction: float = 0.0
    flagged: bool = False

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.value <= 1.0 + 1e-12:
            raise DomainError(f"parity {self.value} outside [-1, 1]")


@dataclass(frozen=True)
class WignerGrid:
    """Per-point parity values in detected (beta) coordinates, circle by circle"""

    points: tuple[ScanPoint, ...]
    geometry: ScanGeometry = field(default_factory=ScanGeometry)
    model: ExperimentModel = field(default_factory=ExperimentModel)
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def q(self) -> np.ndarray:
        """Re beta of each point; fits and exports use (Re beta, Im beta) axes"""
        return np.array([pt.beta.alpha.real for pt in self.points])

    @property
    def p(self) -> np.ndarray:
        return np.array([pt.beta.alpha.imag for pt in self.points])

    @property
    def values(self) -> np.ndarray:
        return np.array([pt.value for pt in self.points])

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([pt.n_bins for pt in self.points], dtype=np.int64)

    @property
    def overflow_fraction(self) -> np.ndarray:
        return np.array([pt.overflow_fraction for pt in self.points])

    @property
    def flagged(self) -> np.ndarray:
        return np.array([pt.flagged for pt in self.points], dtype=bool)

    def surface(self) -> np.ndarray:
        """Values as an (n_amplitude, n_phase) array"""
        out = np.full((self.geometry.n_amplitude, self.geometry.n_phase), np.nan)
        for pt in self.points:
            out[pt.amp_index, pt.phase_index] = pt.value
        return out

    def with_values(self, values) -> "WignerGrid":
        points = tuple(
            ScanPoint(pt.amp_index, pt.phase_index, pt.alpha, pt.beta, float(v), pt.n_bins, pt.overflow_fraction, pt.flagged)
            for pt, v in zip(self.points, values)
        )
        return WignerGrid(points, self.geometry, self.model, dict(self.metadata))


SCAN_MODES = ("analytic", "montecarlo", "full_trace")


@dataclass(frozen=True)
class ScanMode:
    """How per-point parity is obtained.

    analytic evaluates it exactly; montecarlo samples photon counts for
    ``bins`` time bins; full_trace renders and processes one TES packet per
    point. drift_rms is the per-point step (radians) of an optional phase
    random walk along the scan order.
    """

    kind: str = "analytic"
    bins: int = BINS_PER_PACKET
    seed: int = 0
    cutoff: int = 5
    overflow_limit: float = 1e-3
    drift_rms: float = 0.0

    def __post_init__(self):
        if self.kind not in SCAN_MODES:
            raise DomainError(f"unknown scan mode {self.kind!r}")
        if self.bins < 1:
            raise DomainError("scans need at least one bin per point")
        if self.kind == "full_trace" and self.bins > BINS_PER_PACKET:
            raise DomainError(f"full_trace points hold at most {BINS_PER_PACKET} bins, one packet each")
        if self.cutoff < 1:
            raise DomainError("cutoff must be >= 1")
        if not 0.0 <= self.overflow_limit <= 1.0:
            raise DomainError("overflow limit must lie in [0, 1]")
        if self.drift_rms < 0:
            raise DomainError("phase drift step must be non-negative")

    @classmethod
    def analytic(cls, **kwargs) -> "ScanMode":
        return cls("analytic", **kwargs)

    @classmethod
    def montecarlo(cls, bins: int = BINS_PER_PACKET, seed: int = 0, **kwargs) -> "ScanMode":
        return cls("montecarlo", bins=bins, seed=seed, **kwargs)

    @classmethod
    def full_trace(cls, seed: int = 0, **kwargs) -> "ScanMode":
        return cls("full_trace", seed=seed, **kwargs)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "bins": self.bins,
            "seed": self.seed,
            "cutoff": self.cutoff,
            "overflow_limit": self.overflow_limit,
            "drift_rms": self.drift_rms,
        }
