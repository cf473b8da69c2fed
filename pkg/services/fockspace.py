"""Truncated Fock-space engine: states, displacement, photon statistics,
parity and analytic Wigner / s-ordered references.

Wigner values come in two conventions. The parity sum (peak value 1 for a
coherent state) is canonical; ``normalized=True`` divides by pi to give the
quadrature-density form W(q, p) of the integral definition.
"""

import logging
import warnings
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.special import comb, eval_genlaguerre, gammaln
from scipy.stats import poisson

from models.state import ComplexAmplitude, DensityMatrix, PhotonDistribution
from utils.errors import DomainError, IntegrationError, TruncationError

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 5
DEFAULT_MAX_TAIL = 0.05
HERMITE_LIMIT = 200


def suggest_cutoff(mean_photons: float, max_tail: float) -> int:
    """Smallest cutoff whose Poisson tail at this mean stays below max_tail"""
    cutoff = 1
    while poisson.sf(cutoff, mean_photons) > max_tail:
        cutoff += 1
    return cutoff


def coherent_state(
    alpha: ComplexAmplitude,
    cutoff: int = DEFAULT_CUTOFF,
    max_tail: float = DEFAULT_MAX_TAIL,
    renormalize: bool = False,
) -> DensityMatrix:
    """Coherent state |alpha><alpha| truncated at cutoff; the Poisson tail
    P(n > cutoff) is carried as tail_mass unless renormalize is set."""
    if cutoff < 1:
        raise DomainError(f"cutoff must be >= 1, got {cutoff}")
    a = alpha.alpha
    tail = float(poisson.sf(cutoff, alpha.intensity))
    if tail > max_tail:
        raise TruncationError(
            f"coherent state with |alpha|^2={alpha.intensity:.4g} loses "
            f"{tail:.3e} beyond cutoff {cutoff}",
            tail_mass=tail,
            suggested_cutoff=suggest_cutoff(alpha.intensity, max_tail),
        )
    ket = np.empty(cutoff + 1, dtype=complex)
    ket[0] = np.exp(-alpha.intensity / 2)
    for n in range(1, cutoff + 1):
        ket[n] = ket[n - 1] * a / np.sqrt(n)
    rho = np.outer(ket, ket.conj())
    if renormalize:
        return DensityMatrix(rho / np.trace(rho).real)
    # the summed Poisson head and the survival function differ by rounding only
    return DensityMatrix(rho, tail_mass=max(0.0, 1.0 - float(np.trace(rho).real)))


def fock_state(n: int, cutoff: int = DEFAULT_CUTOFF) -> DensityMatrix:
    if not 0 <= n <= cutoff:
        raise DomainError(f"Fock state {n} outside cutoff {cutoff}")
    ket = np.zeros(cutoff + 1)
    ket[n] = 1.0
    return DensityMatrix.from_ket(ket)


def thermal_state(mean_photons: float, cutoff: int = DEFAULT_CUTOFF) -> DensityMatrix:
    if mean_photons < 0:
        raise DomainError("thermal mean photon number must be non-negative")
    ratio = mean_photons / (1.0 + mean_photons)
    probs = (1.0 - ratio) * ratio ** np.arange(cutoff + 1)
    return DensityMatrix(np.diag(probs), tail_mass=max(0.0, 1.0 - probs.sum()))


def random_density_matrix(
    cutoff: int, rng: np.random.Generator, rank: Optional[int] = None
) -> DensityMatrix:
    """Ginibre-ensemble mixed state on the Fock space up to cutoff"""
    dim = cutoff + 1
    rank = rank or dim
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return DensityMatrix(rho / np.trace(rho).real)


def displacement_matrix(alpha: ComplexAmplitude, cutoff: int) -> np.ndarray:
    """Elements <m|D(alpha)|n> for m, n <= cutoff from the associated-Laguerre
    closed form; exact per element, so columns only lose the mass beyond cutoff."""
    if cutoff < 1:
        raise DomainError(f"cutoff must be >= 1, got {cutoff}")
    a = alpha.alpha
    x = abs(a) ** 2
    m = np.arange(cutoff + 1)[:, None]
    n = np.arange(cutoff + 1)[None, :]
    low = np.minimum(m, n)
    order = np.abs(m - n)
    base = np.where(m >= n, a, -np.conj(a))
    power = np.abs(base) ** order * np.exp(1j * order * np.angle(base))
    log_prefactor = 0.5 * (gammaln(low + 1) - gammaln(low + order + 1)) - x / 2
    return np.exp(log_prefactor) * power * eval_genlaguerre(low, order, x)


def working_cutoff(cutoff: int, alpha: ComplexAmplitude) -> int:
    """Cutoff of the enlarged space that holds a displaced cutoff-supported state"""
    x = alpha.intensity
    return int(cutoff + np.ceil(x + 10.0 * np.sqrt(x * (2 * cutoff + 1) + 1) + 15))


def displace(
    rho: DensityMatrix, alpha: ComplexAmplitude, cutoff: Optional[int] = None
) -> DensityMatrix:
    """D(alpha) rho D(alpha)^dagger on a space with the given cutoff
    (default: an enlarged working space)"""
    cutoff = cutoff or working_cutoff(rho.cutoff, alpha)
    dim = cutoff + 1
    embedded = np.zeros((max(dim, rho.dim),) * 2, dtype=complex)
    embedded[: rho.dim, : rho.dim] = rho.elements
    d = displacement_matrix(alpha, embedded.shape[0] - 1)
    out = (d @ embedded @ d.conj().T)[:dim, :dim]
    out = 0.5 * (out + out.conj().T)
    return DensityMatrix(out, tail_mass=max(0.0, 1.0 - float(np.trace(out).real)))


def displaced_photon_distribution(
    rho: DensityMatrix, alpha: ComplexAmplitude, cutoff: Optional[int] = None
) -> PhotonDistribution:
    """Photon statistics of D(alpha) rho D(alpha)^dagger, truncated at cutoff
    (default: the input cutoff) with everything else reported as tail."""
    cutoff = rho.cutoff if cutoff is None else cutoff
    work = max(working_cutoff(rho.cutoff, alpha), cutoff)
    embedded = np.zeros((work + 1, work + 1), dtype=complex)
    embedded[: rho.dim, : rho.dim] = rho.elements
    d = displacement_matrix(alpha, work)
    probs = np.real(np.einsum("mi,ij,mj->m", d, embedded, d.conj()))
    probs = np.clip(probs[: cutoff + 1], 0.0, None)
    tail = max(0.0, 1.0 - float(probs.sum()))
    return PhotonDistribution(probs, tail_mass=tail)


def parity(dist: PhotonDistribution) -> float:
    """Expectation of the photon-number parity operator over the available n"""
    signs = (-1.0) ** np.arange(dist.probs.size)
    return float(np.dot(signs, dist.probs))


def poisson_parity(mean_photons: float) -> float:
    """Untruncated parity of Poisson(mean) statistics"""
    return float(np.exp(-2.0 * mean_photons))


def wigner_from_parity(
    rho: DensityMatrix, alpha: ComplexAmplitude, normalized: bool = False
) -> float:
    """Wigner value at alpha as the parity of rho displaced by -alpha.

    Uses D(alpha) Pi D(alpha)^dagger = D(2 alpha) Pi, so the trace only needs
    matrix elements inside the cutoff of rho.
    """
    d2 = displacement_matrix(alpha.scaled(2.0), max(rho.cutoff, 1))[: rho.dim, : rho.dim]
    signs = (-1.0) ** np.arange(rho.dim)
    value = float(np.real(np.sum(rho.elements.T * d2 * signs[None, :])))
    return value / np.pi if normalized else value


def quadrature_fock_overlaps(q, n_max: int) -> np.ndarray:
    """<q|n> for n = 0..n_max via the three-term recursion of the weighted
    Hermite functions; shape (n_max + 1,) + shape(q)."""
    if n_max < 0:
        raise DomainError("Fock index must be non-negative")
    if n_max > HERMITE_LIMIT:
        raise DomainError(f"Fock index {n_max} exceeds the Hermite limit {HERMITE_LIMIT}")
    q = np.asarray(q, dtype=float)
    psi = np.empty((n_max + 1,) + q.shape)
    psi[0] = np.pi**-0.25 * np.exp(-(q**2) / 2)
    if n_max >= 1:
        psi[1] = np.sqrt(2.0) * q * psi[0]
    for n in range(2, n_max + 1):
        psi[n] = np.sqrt(2.0 / n) * q * psi[n - 1] - np.sqrt((n - 1) / n) * psi[n - 2]
    return psi


def quadrature_fock_overlap(q: float, n: int) -> float:
    return float(quadrature_fock_overlaps(q, n)[n])


def wigner_integral_oracle(
    rho: DensityMatrix, q: float, p: float, tolerance: float = 1e-7
) -> float:
    """W(q, p) (1/pi convention) by direct quadrature of the Wigner integral
    with the position-space density matrix built from Hermite functions."""
    n_max = rho.cutoff
    reach = np.sqrt(2 * n_max + 1) + 9.0
    limit = 2.0 * (abs(q) + reach)
    elements = rho.elements

    def integrand(y: float) -> float:
        left = quadrature_fock_overlaps(q - y / 2, n_max)
        right = quadrature_fock_overlaps(q + y / 2, n_max)
        kernel = left @ elements @ right
        return float(np.real(np.exp(1j * y * p) * kernel))

    # the integrand is even in y for Hermitian rho
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        value, residual = integrate.quad(
            integrand, 0.0, limit, limit=500, epsabs=tolerance / 10, epsrel=1e-9
        )
    for warning in caught:
        logger.debug("quadrature at (%.3f, %.3f): %s", q, p, warning.message)
    if residual > tolerance:
        raise IntegrationError(
            f"Wigner integral residual {residual:.2e} above {tolerance:.1e}", residual
        )
    return value / np.pi


def s_ordered_coherent(
    alpha: ComplexAmplitude,
    alpha0: ComplexAmplitude,
    s: float,
    normalized: bool = False,
) -> float:
    """s-ordered quasiprobability of the coherent state |alpha0> at alpha.

    Peak-1 convention gives 1/(1-s) exp(-2|alpha-alpha0|^2/(1-s)); s=0 is the
    Wigner function, s=-1 the Husimi function.
    """
    if s >= 1:
        raise DomainError(f"s-ordered distribution requires s < 1, got {s}")
    distance = abs(alpha.alpha - alpha0.alpha) ** 2
    value = np.exp(-2.0 * distance / (1.0 - s)) / (1.0 - s)
    return float(value / np.pi if normalized else value)


def apply_loss(dist: PhotonDistribution, eta: float) -> PhotonDistribution:
    """Binomial thinning p'(m) = sum_n p(n) C(n, m) eta^m (1-eta)^(n-m)"""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"efficiency must lie in [0, 1], got {eta}")
    n = np.arange(dist.probs.size)
    m = n[:, None]
    kernel = comb(n[None, :], m) * eta**m * (1.0 - eta) ** np.clip(n[None, :] - m, 0, None)
    kernel = np.where(m <= n[None, :], kernel, 0.0)
    return PhotonDistribution(kernel @ dist.probs, tail_mass=dist.tail_mass)


def attenuate(rho: DensityMatrix, eta: float) -> DensityMatrix:
    """Pure-loss channel with transmission eta in Kraus form"""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"efficiency must lie in [0, 1], got {eta}")
    dim = rho.dim
    n = np.arange(dim)
    out = np.zeros((dim, dim), dtype=complex)
    for k in range(dim):
        weights = np.sqrt(comb(n[k:], k) * eta ** (n[k:] - k) * (1.0 - eta) ** k)
        kraus = np.zeros((dim, dim))
        kraus[n[k:] - k, n[k:]] = weights
        out += kraus @ rho.elements @ kraus.T
    return DensityMatrix(out, tail_mass=rho.tail_mass)
