"""Time-domain record containers shared by the simulator and the analysis code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = ["TimeTrace", "QuadraturePair"]

SHOT_UNIT = "shot-noise"


@dataclass
class TimeTrace:
    """Uniformly sampled real record.

    Attributes
    ----------
    sample_rate : float
        Samples per second (Hz).
    samples : ndarray
        Finite float64 samples.
    unit : str
        Unit tag, e.g. ``"shot-noise"`` for optical quadratures (unit
        double-sided white PSD for vacuum) or ``"z_zpf"`` for position.
    label : str
        Channel label.
    metadata : dict
        Provenance, typically ``seed`` and ``config_hash``.
    """

    sample_rate: float
    samples: np.ndarray
    unit: str = SHOT_UNIT
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigError("samples must be one-dimensional")
        if not (self.sample_rate > 0):
            raise ConfigError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ConfigError(f"trace {self.label!r} contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate


@dataclass
class QuadraturePair:
    """Simultaneous amplitude (``x0``) and phase (``xpi2``) quadrature records."""

    x0: TimeTrace
    xpi2: TimeTrace

    def __post_init__(self):
        if len(self.x0) != len(self.xpi2):
            raise ConfigError("quadrature traces differ in length")
        if self.x0.sample_rate != self.xpi2.sample_rate:
            raise ConfigError("quadrature traces differ in sample rate")

    @classmethod
    def from_arrays(cls, x0, xpi2, sample_rate, unit=SHOT_UNIT, metadata=None):
        md = dict(metadata or {})
        return cls(TimeTrace(sample_rate, x0, unit, "x0", md),
                   TimeTrace(sample_rate, xpi2, unit, "xpi2", dict(md)))

    @property
    def sample_rate(self) -> float:
        return self.x0.sample_rate

    @property
    def unit(self) -> str:
        return self.x0.unit

    @property
    def metadata(self) -> dict:
        return self.x0.metadata

    @property
    def duration(self) -> float:
        return self.x0.duration

    def __len__(self):
        return len(self.x0)
