"""Experiment configuration: a key = value file with dotted keys.

    schema_version = 1
    source.kind = coherent
    source.detected_mean = 2.553
    model.eta = 0.72
    run.mode = montecarlo
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from dotenv import dotenv_values, load_dotenv

from models.scan import ExperimentModel, ScanGeometry, ScanMode, SourceState
from models.state import ComplexAmplitude
from models.trace import PulseKernel, QuantizationThresholds
from services.tomography import TraceSettings, phase_diffused_mixture
from utils.errors import ConfigError, WignerPNRError
from utils.util import content_hash, parse_amplitude, parse_bool


SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "WIGNERPNR_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "output"


def _amplitude(text: str) -> complex:
    value = parse_amplitude(text)
    if value is None:
        raise ValueError(f"not a complex amplitude: {text!r}")
    return value


def _bool(text: str) -> bool:
    value = parse_bool(text)
    if value is None:
        raise ValueError(f"not a boolean: {text!r}")
    return value


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "schema_version": (int, None),
    "source.kind": (_choice("vacuum", "coherent", "phase_diffused"), "coherent"),
    "source.alpha0": (_amplitude, None),
    "source.detected_mean": (float, 2.553),
    "source.phase": (float, 0.0),
    "source.modulation": (_choice("sinusoidal", "uniform"), "sinusoidal"),
    "source.depth": (float, float(np.pi)),
    "source.n_components": (int, 64),
    "source.frequency": (float, 100.0),
    "model.eta": (float, 1.0),
    "model.v": (float, 1.0),
    "model.t2": (float, 1.0),
    "scan.n_amplitude": (int, 40),
    "scan.n_phase": (int, 60),
    "scan.max_amplitude": (float, 3.0),
    "run.mode": (_choice("analytic", "montecarlo", "full_trace"), "analytic"),
    "run.bins": (int, 8388),
    "run.seed": (int, 0),
    "run.cutoff": (int, 5),
    "run.overflow_limit": (float, 1e-3),
    "run.drift_rms": (float, 0.0),
    "run.batch_size": (int, 64),
    "run.cache": (_bool, False),
    "run.output_dir": (str, None),
    "detector.rise_time": (float, 700e-9),
    "detector.decay_time": (float, 2e-6),
    "detector.unit_height": (float, 1000.0),
    "detector.noise_rms": (float, 100.0),
    "detector.baseline": (float, 1000.0),
    "detector.manual_thresholds": (_bool, False),
    "simulate.mean_per_bin": (float, None),
    "simulate.point": (int, 0),
    "simulate.background_rate": (float, 0.0),
}

# output location is not part of the experiment identity
UNHASHED_KEYS = ("run.output_dir", "run.batch_size", "run.cache")


@dataclass(frozen=True)
class SimulateSettings:
    mean_per_bin: Optional[float] = None
    point: int = 0
    background_rate: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceState
    model: ExperimentModel
    geometry: ScanGeometry
    mode: ScanMode
    trace: TraceSettings
    simulate: SimulateSettings
    output_dir: Path
    batch_size: int = 64
    use_cache: bool = False
    values: dict = field(default_factory=dict, compare=False)

    @property
    def config_hash(self) -> str:
        return content_hash({k: v for k, v in self.values.items() if k not in UNHASHED_KEYS})

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": {k: _jsonable(self.values[k]) for k in sorted(self.values)},
            "config_hash": self.config_hash,
            "source": self.source.to_dict(),
            "model": self.model.to_dict(),
            "geometry": self.geometry.to_dict(),
            "mode": self.mode.to_dict(),
        }

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not Path(path).is_file():
            raise ConfigError(f"configuration file not found: {path}")
        raw = dotenv_values(path)
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in SCHEMA.items():
            if key not in raw:
                values[key] = default
                continue
            text = raw[key]
            if text is None:
                raise ConfigError(f"{key} has no value")
            try:
                values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from e
        if values["schema_version"] is None:
            raise ConfigError("schema_version is required")
        if values["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {values['schema_version']}, expected {SCHEMA_VERSION}")
        try:
            return cls._build(values)
        except WignerPNRError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def _build(cls, values: dict) -> "ExperimentConfig":
        model = ExperimentModel(values["model.eta"], values["model.v"], values["model.t2"])
        if values["source.alpha0"] is not None:
            alpha0 = ComplexAmplitude.from_complex(values["source.alpha0"])
        else:
            alpha0 = SourceState.from_detected_mean(
                values["source.detected_mean"], model.eta, values["source.phase"]
            ).alpha0

        kind = values["source.kind"]
        if kind == "vacuum":
            source = SourceState.vacuum()
        elif kind == "coherent":
            source = SourceState.coherent(alpha0)
        else:
            source = phase_diffused_mixture(
                alpha0,
                values["source.modulation"],
                values["source.depth"],
                values["source.n_components"],
                values["source.frequency"],
            )

        kernel = PulseKernel(
            rise_time=values["detector.rise_time"],
            decay_time=values["detector.decay_time"],
            unit_height=values["detector.unit_height"],
        )
        mode = ScanMode(
            values["run.mode"],
            bins=values["run.bins"],
            seed=values["run.seed"],
            cutoff=values["run.cutoff"],
            overflow_limit=values["run.overflow_limit"],
            drift_rms=values["run.drift_rms"],
        )
        thresholds = None
        if values["detector.manual_thresholds"]:
            thresholds = QuantizationThresholds.manual(kernel.unit_height, cutoff=mode.cutoff)
        trace = TraceSettings(kernel, values["detector.noise_rms"], values["detector.baseline"], thresholds)
        if values["run.batch_size"] < 1:
            raise ConfigError("run.batch_size must be >= 1")
        return cls(
            source=source,
            model=model,
            geometry=ScanGeometry(values["scan.n_amplitude"], values["scan.n_phase"], values["scan.max_amplitude"]),
            mode=mode,
            trace=trace,
            simulate=SimulateSettings(
                values["simulate.mean_per_bin"], values["simulate.point"], values["simulate.background_rate"]
            ),
            output_dir=Path(values["run.output_dir"] or default_output_dir()),
            batch_size=values["run.batch_size"],
            use_cache=values["run.cache"],
            values=values,
        )


def default_output_dir() -> str:
    load_dotenv()
    return os.getenv(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)


def _jsonable(value):
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value
