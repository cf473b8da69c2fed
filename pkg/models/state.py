from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from utils.errors import DomainError

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
PSD_TOL = 1e-10


def _frozen_array(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ComplexAmplitude:
    """Phase-space point stored as quadratures, with alpha = (q + ip)/sqrt(2)"""

    q: float
    p: float

    @classmethod
    def from_complex(cls, alpha: complex) -> "ComplexAmplitude":
        alpha = complex(alpha)
        return cls(q=np.sqrt(2.0) * alpha.real, p=np.sqrt(2.0) * alpha.imag)

    @classmethod
    def from_polar(cls, modulus: float, phase: float) -> "ComplexAmplitude":
        return cls.from_complex(modulus * np.exp(1j * phase))

    @property
    def alpha(self) -> complex:
        return complex(self.q, self.p) / np.sqrt(2.0)

    @property
    def intensity(self) -> float:
        """|alpha|^2"""
        return (self.q**2 + self.p**2) / 2.0

    @property
    def modulus(self) -> float:
        return float(np.sqrt(self.intensity))

    @property
    def phase(self) -> float:
        return float(np.arctan2(self.p, self.q))

    def __neg__(self) -> "ComplexAmplitude":
        return ComplexAmplitude(q=-self.q, p=-self.p)

    def scaled(self, factor: float) -> "ComplexAmplitude":
        return ComplexAmplitude(q=factor * self.q, p=factor * self.p)


@dataclass(frozen=True)
class PhotonDistribution:
    """Photon-number probabilities p(0..N); mass beyond N is kept in tail_mass"""

    probs: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise DomainError("photon distribution must be a non-empty vector")
        if np.any(probs < -PSD_TOL) or np.any(probs > 1 + PSD_TOL):
            raise DomainError("photon probabilities must lie in [0, 1]")
        probs = np.clip(probs, 0.0, 1.0)
        if probs.sum() > 1 + TRACE_TOL:
            raise DomainError(f"photon probabilities sum to {probs.sum():.12f} > 1")
        object.__setattr__(self, "probs", _frozen_array(probs, float))
        object.__setattr__(self, "tail_mass", float(max(self.tail_mass, 0.0)))

    @property
    def cutoff(self) -> int:
        return self.probs.size - 1

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.probs.size), self.probs))

    @property
    def total(self) -> float:
        return float(self.probs.sum())

    def renormalized(self) -> "PhotonDistribution":
        total = self.total
        if total <= 0:
            raise DomainError("cannot renormalize an empty photon distribution")
        return PhotonDistribution(self.probs / total, tail_mass=0.0)

    @classmethod
    def poisson(cls, mean: float, cutoff: int) -> "PhotonDistribution":
        probs = poisson.pmf(np.arange(cutoff + 1), mean)
        return cls(probs, tail_mass=float(poisson.sf(cutoff, mean)))


@dataclass(frozen=True)
class DensityMatrix:
    """Fock-space density matrix truncated at cutoff = dim - 1.

    Truncation is explicit: trace(elements) + tail_mass == 1. A renormalized
    matrix has tail_mass 0.
    """

    elements: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        rho = np.asarray(self.elements, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1] or rho.shape[0] < 1:
            raise DomainError(f"density matrix must be square, got {rho.shape}")
        if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
            raise DomainError("density matrix is not Hermitian")
        rho = 0.5 * (rho + rho.conj().T)
        trace = float(np.trace(rho).real)
        if abs(trace + self.tail_mass - 1.0) > TRACE_TOL:
            raise DomainError(
                f"trace {trace:.12f} plus tail {self.tail_mass:.3e} is not 1"
            )
        if np.linalg.eigvalsh(rho)[0] < -PSD_TOL:
            raise DomainError("density matrix is not positive semidefinite")
        object.__setattr__(self, "elements", _frozen_array(rho, complex))
        object.__setattr__(self, "tail_mass", float(self.tail_mass))

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    @property
    def cutoff(self) -> int:
        return self.dim - 1

    def photon_distribution(self) -> PhotonDistribution:
        return PhotonDistribution(np.real(np.diag(self.elements)), self.tail_mass)

    def renormalized(self) -> "DensityMatrix":
        return DensityMatrix(self.elements / np.trace(self.elements).real)

    @classmethod
    def from_ket(cls, ket, tail_mass: float = 0.0) -> "DensityMatrix":
        ket = np.asarray(ket, dtype=complex)
        return cls(np.outer(ket, ket.conj()), tail_mass=tail_mass)
