"""Closed-form quadrature noise spectra of a continuously measured oscillator.

All spectra are double-sided and referenced to angular frequency: a spectral
density ``S(omega)`` integrates to a variance as ``int S domega / (2 pi)``
over the full real line. Optical spectra are expressed in shot-noise units,
so the vacuum level is exactly one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.constants import hbar

from .errors import ConfigError, DomainError, NoSqueezingError

__all__ = [
    "MechanicalParams",
    "DecoherenceBudget",
    "QuadratureAngle",
    "SpectrumCurve",
    "ExtremumPoint",
    "SqueezingExtrema",
    "normalize_angle",
    "sphere_mass",
    "reference_parameters",
    "mechanical_susceptibility",
    "motional_psd",
    "detected_quadrature_psd",
    "detected_quadrature_curve",
    "displacement_referred_psd",
    "cross_spectrum_model",
    "find_squeezing_extrema",
]

TWO_PI = 2.0 * np.pi
HIGH_Q_LIMIT = 1e-2


def sphere_mass(radius: float, density: float = 1850.0) -> float:
    """Mass of a homogeneous sphere in kg."""
    if radius <= 0 or density <= 0:
        raise ConfigError("radius and density must be positive")
    return density * 4.0 / 3.0 * np.pi * radius**3


@dataclass(frozen=True)
class MechanicalParams:
    """Harmonic oscillator along the measured axis.

    Parameters
    ----------
    mass : float
        Oscillator mass in kg.
    omega_q : float
        Resonance angular frequency in rad/s.
    gamma : float
        Total energy damping rate in rad/s (feedback dominated).
    """

    mass: float
    omega_q: float
    gamma: float

    def __post_init__(self):
        for name in ("mass", "omega_q", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be finite and positive, got {v!r}")

    @classmethod
    def from_sphere(cls, radius, omega_q, gamma, density=1850.0):
        return cls(sphere_mass(radius, density), omega_q, gamma)

    @property
    def z_zpf(self) -> float:
        return np.sqrt(hbar / (2.0 * self.mass * self.omega_q))

    @property
    def p_zpf(self) -> float:
        return np.sqrt(hbar * self.mass * self.omega_q / 2.0)

    @property
    def high_q(self) -> bool:
        """True when the analytic high-Q spectra are trustworthy."""
        return self.gamma / self.omega_q < HIGH_Q_LIMIT

    @property
    def quality_factor(self) -> float:
        return self.omega_q / self.gamma

    def to_dict(self) -> dict:
        return {"mass_kg": self.mass,
                "omega_q_hz": self.omega_q / TWO_PI,
                "gamma_hz": self.gamma / TWO_PI}


@dataclass(frozen=True)
class DecoherenceBudget:
    """Decoherence rates (rad/s) and per-quadrature detection efficiency."""

    gamma_th: float
    gamma_ba: float
    eta_d: float

    def __post_init__(self):
        for name in ("gamma_th", "gamma_ba"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v!r}")
        if not (0.0 <= self.eta_d <= 1.0):
            raise ConfigError(f"eta_d must lie in [0, 1], got {self.eta_d!r}")

    @classmethod
    def from_bath(cls, n_th, gamma_gas, gamma_ba, eta_d):
        """Build from a bath occupation and gas damping, Gamma_th = gamma_gas * n_th."""
        if n_th < 0 or gamma_gas < 0:
            raise ConfigError("n_th and gamma_gas must be >= 0")
        return cls(gamma_gas * n_th, gamma_ba, eta_d)

    @property
    def gamma_meas(self) -> float:
        return self.eta_d * self.gamma_ba

    @property
    def gamma_tot(self) -> float:
        return self.gamma_th + self.gamma_ba

    @property
    def c_q(self) -> float:
        if self.gamma_th == 0:
            return np.inf
        return self.gamma_ba / self.gamma_th

    def n_occ(self, params: MechanicalParams) -> float:
        """Steady-state occupation Gamma_tot / gamma."""
        return self.gamma_tot / params.gamma

    def to_dict(self) -> dict:
        return {"gamma_th_hz": self.gamma_th / TWO_PI,
                "gamma_ba_hz": self.gamma_ba / TWO_PI,
                "eta_d": self.eta_d}


def normalize_angle(theta):
    """Map a quadrature angle onto [-pi/2, pi/2] (quadratures are pi-periodic).

    The map is idempotent; +pi/2 and -pi/2 are both kept as they are.
    """
    theta = np.asarray(theta, dtype=float)
    out = theta - np.pi * np.round(theta / np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class QuadratureAngle:
    theta: float

    def normalized(self) -> "QuadratureAngle":
        return QuadratureAngle(normalize_angle(self.theta))

    def __float__(self):
        return float(self.theta)


@dataclass
class SpectrumCurve:
    """Model spectrum sampled on an angular-frequency grid."""

    frequencies: np.ndarray
    values: np.ndarray
    unit: str = "shot-noise"
    auto: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.frequencies.ndim != 1 or self.values.shape != self.frequencies.shape:
            raise ConfigError("frequencies and values must be 1-D and of equal length")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ConfigError("frequency grid must be strictly increasing")
        if self.auto and np.any(self.values.imag != 0):
            raise ConfigError("auto-spectrum with non-zero imaginary part")

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.frequencies / TWO_PI


def reference_parameters(gamma_hz: float = 89.7, eta_d: float | None = None):
    """Operating point of the levitated-sphere experiment.

    Returns ``(params, budget)`` for a 43 nm radius silica sphere at
    76.9 kHz with Gamma_tot/2pi = 7.6 kHz, Gamma_th/2pi = 2.7 kHz and
    Gamma_meas/2pi = 0.6 kHz.
    """
    params = MechanicalParams.from_sphere(43e-9, TWO_PI * 76.9e3, TWO_PI * gamma_hz)
    gamma_th = TWO_PI * 2.7e3
    gamma_ba = TWO_PI * 7.6e3 - gamma_th
    if eta_d is None:
        eta_d = 0.6e3 / (gamma_ba / TWO_PI)
    return params, DecoherenceBudget(gamma_th, gamma_ba, eta_d)


def _as_omega(omega):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise DomainError("angular frequency must be >= 0")
    return omega


def mechanical_susceptibility(params: MechanicalParams, omega):
    """chi(omega) = 1 / (m (Omega_q^2 - omega^2 - i gamma omega)) in m/N."""
    w = _as_omega(omega)
    return 1.0 / (params.mass * (params.omega_q**2 - w**2 - 1j * params.gamma * w))


def _lorentz_den(params, w):
    return (params.omega_q**2 - w**2) ** 2 + (params.gamma * w) ** 2


def motional_psd(params: MechanicalParams, budget: DecoherenceBudget, n_th=None, omega=0.0):
    """Double-sided displacement spectral density in m^2/Hz.

    Parameters
    ----------
    n_th : float or None
        Bath occupation such that gamma * n_th is the thermal decoherence
        rate. ``None`` uses ``budget.gamma_th`` directly.
    """
    w = _as_omega(omega)
    if n_th is None:
        rate_th = budget.gamma_th
    else:
        if n_th < 0:
            raise DomainError("n_th must be >= 0")
        rate_th = params.gamma * n_th
    num = params.z_zpf**2 * 4.0 * params.omega_q**2 * (rate_th + budget.gamma_ba)
    return num / _lorentz_den(params, w)


def detected_quadrature_psd(params: MechanicalParams, budget: DecoherenceBudget, theta, omega,
                            form: str = "rates"):
    """Detected quadrature spectrum in shot-noise units.

    ``theta`` and ``omega`` broadcast against each other.

    Parameters
    ----------
    form : {"rates", "cooperativity"}
        ``"rates"`` sums the thermal and backaction force spectra;
        ``"cooperativity"`` writes the same force noise as
        S_FF^ba (1 + 1/C_q). Both are algebraically identical.
    """
    w = _as_omega(omega)
    th = np.asarray(theta, dtype=float)
    chi = mechanical_susceptibility(params, w)
    p2 = params.p_zpf**2
    if form == "rates":
        s_ff = 4.0 * p2 * budget.gamma_ba + 4.0 * p2 * budget.gamma_th
    elif form == "cooperativity":
        if budget.gamma_ba == 0:
            s_ff = 4.0 * p2 * budget.gamma_th
        else:
            s_ff = 4.0 * p2 * budget.gamma_ba * (1.0 + 1.0 / budget.c_q)
    else:
        raise ConfigError(f"unknown form {form!r}")
    s_zz = s_ff * np.abs(chi) ** 2
    pref = 4.0 * budget.gamma_meas / params.z_zpf**2
    out = 1.0 + pref * (s_zz * np.sin(th) ** 2 + 0.5 * hbar * chi.real * np.sin(2.0 * th))
    return out if np.ndim(out) else float(out)


def detected_quadrature_curve(params, budget, theta, omega) -> SpectrumCurve:
    omega = np.asarray(omega, dtype=float)
    vals = detected_quadrature_psd(params, budget, float(theta), omega)
    return SpectrumCurve(omega, vals, unit="shot-noise",
                         metadata={"theta": float(theta), "high_q": params.high_q})


def displacement_referred_psd(params, budget, theta, omega, s_imp):
    """Quadrature spectrum expressed as displacement noise in m^2/Hz.

    Raises
    ------
    DomainError
        If any ``theta`` is exactly zero, where the cotangent of the
        correlation term is undefined.
    """
    w = _as_omega(omega)
    th = np.asarray(theta, dtype=float)
    if np.any(th == 0.0):
        raise DomainError("theta = 0 is singular in the displacement-referred form")
    chi = mechanical_susceptibility(params, w)
    p2 = params.p_zpf**2
    s_ff = 4.0 * p2 * (budget.gamma_ba + budget.gamma_th)
    s_qf = -0.5 * hbar / np.tan(th)
    out = s_imp + np.sin(th) ** 2 * (s_ff * np.abs(chi) ** 2 - 2.0 * (chi * s_qf).real)
    return out if np.ndim(out) else float(out)


def cross_spectrum_model(params, budget, n_occ, omega):
    """Cross spectrum of the pi/4 and 3pi/4 quadratures (shot-noise units).

    Real part 2 D (n + 1/2) Im chi, imaginary part D Im chi, with
    D = 4 Gamma_meas Omega_q m. The ratio Re/Im is 2 n + 1 everywhere.
    """
    if n_occ < 0:
        raise DomainError("n_occ must be >= 0")
    chi = mechanical_susceptibility(params, omega)
    d = 4.0 * budget.gamma_meas * params.omega_q * params.mass
    im = d * chi.imag
    out = 2.0 * (n_occ + 0.5) * im + 1j * im
    return out if np.ndim(out) else complex(out)


@dataclass(frozen=True)
class ExtremumPoint:
    omega: float
    theta: float
    value: float

    @property
    def squeezing(self) -> float:
        """Fractional noise reduction below shot noise, 1 - value."""
        return 1.0 - self.value


@dataclass(frozen=True)
class SqueezingExtrema:
    """The two local minima and the saddle of the quadrature spectrum.

    ``upper`` lies above resonance, ``lower`` below it.
    """

    upper: ExtremumPoint
    lower: ExtremumPoint
    saddle: tuple
    saddle_verified: bool
    hessian_det: float

    @property
    def best(self) -> ExtremumPoint:
        # tie-break by lower frequency
        if self.upper.value < self.lower.value:
            return self.upper
        return self.lower

    @property
    def min_value(self) -> float:
        return self.best.value

    @property
    def theta_sq(self) -> float:
        return abs(self.best.theta)


def find_squeezing_extrema(params: MechanicalParams, budget: DecoherenceBudget,
                           span: float = 50.0) -> SqueezingExtrema:
    """Locate the minima of the detected spectrum over detuning and angle.

    The search covers Omega_q +- ``span`` * gamma and theta in [-pi/2, pi/2].
    Each side of resonance is seeded from the best points of a coarse grid
    and refined with a bounded Nelder-Mead simplex.

    Raises
    ------
    NoSqueezingError
        If Gamma_meas is zero or the minimum does not fall below
        1 - 1e-6.
    """
    if budget.gamma_meas <= 0:
        raise NoSqueezingError("no measurement (Gamma_meas = 0): spectrum never below shot noise")
    g, w0 = params.gamma, params.omega_q

    def f(p):
        return detected_quadrature_psd(params, budget, p[1], w0 + g * p[0])

    xs = np.linspace(-span, span, 401)
    ths = np.linspace(-np.pi / 2, np.pi / 2, 181)
    grid = detected_quadrature_psd(params, budget, ths[None, :], w0 + g * xs[:, None])
    bounds = [(-span, span), (-np.pi / 2, np.pi / 2)]
    opts = {"xatol": 1e-11, "fatol": 1e-15, "maxiter": 20000, "maxfev": 40000}

    found = {}
    for side, mask in (("upper", xs > 0), ("lower", xs < 0)):
        sub = np.where(mask[:, None], grid, np.inf)
        seeds = np.argsort(sub, axis=None)[:3]
        best = None
        for s in seeds:
            i, j = np.unravel_index(s, grid.shape)
            res = optimize.minimize(f, [xs[i], ths[j]], method="Nelder-Mead",
                                    bounds=bounds, options=opts)
            if best is None or res.fun < best.fun:
                best = res
        found[side] = ExtremumPoint(w0 + g * best.x[0], float(best.x[1]), float(best.fun))

    # saddle at (Omega_q, 0): vanishing gradient, indefinite Hessian
    hx, ht = 1e-3, 1e-4
    fxx = (f([hx, 0]) - 2 * f([0, 0]) + f([-hx, 0])) / hx**2
    ftt = (f([0, ht]) - 2 * f([0, 0]) + f([0, -ht])) / ht**2
    fxt = (f([hx, ht]) - f([hx, -ht]) - f([-hx, ht]) + f([-hx, -ht])) / (4 * hx * ht)
    det = fxx * ftt - fxt**2
    grad = np.hypot((f([hx, 0]) - f([-hx, 0])) / (2 * hx), (f([0, ht]) - f([0, -ht])) / (2 * ht))
    verified = bool(det < 0 and grad < 1e-6 * max(1.0, abs(fxt)))

    out = SqueezingExtrema(found["upper"], found["lower"], (w0, 0.0), verified, float(det))
    if out.min_value >= 1.0 - 1e-6:
        raise NoSqueezingError(f"minimum spectrum value {out.min_value:.8f} is not below shot noise")
    return out
