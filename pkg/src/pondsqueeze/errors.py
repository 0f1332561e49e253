"""Exception hierarchy.

The command-line front end maps these onto exit codes: configuration and
validation problems exit with 2, numerical or convergence failures with 3,
unreadable trace files with 4.
"""


class PondSqueezeError(Exception):
    """Base class for all package errors."""


class ConfigError(PondSqueezeError, ValueError):
    """Invalid or inconsistent configuration / input values."""


class DomainError(PondSqueezeError, ValueError):
    """Argument outside the mathematical domain of a formula."""


class NumericalError(PondSqueezeError, RuntimeError):
    """Base class for numerical failures (exit code 3)."""


class NoSqueezingError(NumericalError):
    """The quadrature spectrum never drops below shot noise."""


class AliasingError(ConfigError):
    """Sampling or band-limit precondition of the heterodyne chain violated."""


class CarrierNotFoundError(NumericalError):
    """No carrier line near the expected heterodyne frequency."""


class PhaseTrackingError(NumericalError):
    """Tracked carrier phase drifts faster than the tracker can follow."""


class FitConvergenceError(NumericalError):
    """Too many fits failed to converge."""


class InsufficientSignalError(NumericalError):
    """Spectral feature indistinguishable from the noise floor."""


class ShotNoiseNormalizationError(ConfigError):
    """Spectra are not shot-noise normalized and no reference was given."""


class InconsistentBudgetError(ConfigError):
    """Decoherence rates that cannot be simultaneously true."""


class TraceFormatError(PondSqueezeError, OSError):
    """Trace file is not in the expected binary format (exit code 4)."""
