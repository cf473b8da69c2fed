from dataclasses import dataclass, field

import numpy as np

PARAMETER_NAMES = ("a", "b", "m", "q0", "p0")


@dataclass(frozen=True)
class GaussianModel:
    """W(q, p) = a + b exp(-m ((q - q0)^2 + (p - p0)^2))"""

    a: float
    b: float
    m: float
    q0: float
    p0: float

    @property
    def center_modulus(self) -> float:
        return float(np.hypot(self.q0, self.p0))

    def evaluate(self, q, p) -> np.ndarray:
        distance = (np.asarray(q) - self.q0) ** 2 + (np.asarray(p) - self.p0) ** 2
        return self.a + self.b * np.exp(-self.m * distance)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.m, self.q0, self.p0], dtype=float)

    @classmethod
    def from_array(cls, params) -> "GaussianModel":
        return cls(*(float(x) for x in params))

    def to_dict(self) -> dict:
        return dict(zip(PARAMETER_NAMES, self.as_array().tolist()))


@dataclass(frozen=True)
class FitResult:
    model: GaussianModel
    standard_errors: dict
    r_squared: float
    residuals: np.ndarray
    n_points: int
    cost: float
    iterations: int
    trace: list = field(default_factory=list, compare=False)

    @property
    def residual_mean(self) -> float:
        return float(np.nanmean(self.residuals)) if self.residuals.size else 0.0

    @property
    def center_modulus_error(self) -> float:
        """Standard error of sqrt(q0^2 + p0^2) from the (q0, p0) errors"""
        q0, p0 = self.model.q0, self.model.p0
        modulus = self.model.center_modulus
        if modulus == 0:
            return float(np.hypot(self.standard_errors["q0"], self.standard_errors["p0"]))
        return float(np.hypot(q0 * self.standard_errors["q0"], p0 * self.standard_errors["p0"]) / modulus)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "standard_errors": dict(self.standard_errors),
            "center_modulus": self.model.center_modulus,
            "center_modulus_error": self.center_modulus_error,
            "r_squared": self.r_squared,
            "residual_mean": self.residual_mean,
            "n_points": self.n_points,
            "cost": self.cost,
            "iterations": self.iterations,
        }
