"""Balanced-detector and dynamic-range design budget.

All noise densities and powers are returned as positive magnitudes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from scipy.constants import c as C_LIGHT
from scipy.constants import e as E_CHARGE
from scipy.constants import h as H_PLANCK

from .errors import ConfigError
from .model import MechanicalParams, sphere_mass

__all__ = [
    "DetectorSpec",
    "TrapSpec",
    "photon_energy",
    "saturation_power",
    "lo_power_limit",
    "noise_currents",
    "snr_shot_to_dark",
    "snr_bound",
    "lamb_dicke_dynamic_range",
    "adc_dynamic_range",
    "budget_report",
    "QUOTED_MAX_SNR_DB",
]

# shot-to-dark ratio quoted for the diode power limit, compared against in reports
QUOTED_MAX_SNR_DB = 15.0


@dataclass(frozen=True)
class DetectorSpec:
    """Balanced photodetector.

    Parameters
    ----------
    nep : float
        Noise-equivalent power (W/sqrt(Hz)).
    delta_v : float
        Output voltage swing magnitude (V).
    g_t : float
        Transimpedance gain (V/A).
    p_max : float
        Damage power per diode (W).
    eta_q : float
        Quantum efficiency in (0, 1].
    wavelength : float
        m.
    """

    nep: float = 8e-12
    delta_v: float = 3.6
    g_t: float = 1e4
    p_max: float = 5e-3
    eta_q: float = 0.85
    wavelength: float = 1064e-9

    def __post_init__(self):
        if self.nep < 0 or self.delta_v < 0 or self.g_t <= 0 or self.p_max <= 0 or self.wavelength <= 0:
            raise ConfigError("detector parameters must be positive")
        if not 0 < self.eta_q <= 1:
            raise ConfigError("eta_q must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrapSpec:
    """Trapped sphere and detection geometry (SI units, omega_z in rad/s)."""

    radius: float = 43e-9
    density: float = 1850.0
    wavelength: float = 1064e-9
    omega_z: float = 2 * math.pi * 76.9e3
    alpha_geom: float = 1.5
    eta_total: float = 0.3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ConfigError(f"trap parameter {k} must be positive")

    @property
    def mass(self) -> float:
        return float(sphere_mass(self.radius, self.density))

    @property
    def z_zpf(self) -> float:
        return float(MechanicalParams(self.mass, self.omega_z, 1.0).z_zpf)

    def to_dict(self):
        return asdict(self)


def photon_energy(wavelength: float) -> float:
    return H_PLANCK * C_LIGHT / wavelength


def saturation_power(spec: DetectorSpec) -> float:
    """Optical power imbalance that swings the output by ``delta_v`` (W)."""
    return photon_energy(spec.wavelength) / (E_CHARGE * spec.eta_q) * spec.delta_v / spec.g_t


def lo_power_limit(spec: DetectorSpec, p_sig: float) -> float:
    """min(2 P_max, dP_sat^2 / P_sig) in W."""
    if not p_sig > 0:
        raise ConfigError("p_sig must be positive")
    return min(2.0 * spec.p_max, saturation_power(spec) ** 2 / p_sig)


def noise_currents(spec: DetectorSpec, p_lo: float) -> tuple[float, float]:
    """(shot, dark) current noise densities in A/sqrt(Hz)."""
    if not p_lo > 0:
        raise ConfigError("p_lo must be positive")
    hv = photon_energy(spec.wavelength)
    shot = E_CHARGE * math.sqrt(2.0 * spec.eta_q * p_lo / hv)
    dark = spec.nep * spec.eta_q * E_CHARGE / hv
    return shot, dark


def _db(x):
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def snr_shot_to_dark(spec: DetectorSpec, p_lo: float) -> tuple[float, float]:
    """Shot-to-dark power ratio 2 h nu P_lo / (eta_q NEP^2) and its dB value.

    Returns ``(inf, inf)`` for a noiseless detector.
    """
    if not p_lo > 0:
        raise ConfigError("p_lo must be positive")
    if spec.nep == 0:
        return math.inf, math.inf
    r = 2.0 * photon_energy(spec.wavelength) * p_lo / (spec.eta_q * spec.nep**2)
    return r, _db(r)


def snr_bound(spec: DetectorSpec, p_sig: float) -> float:
    """Closed-form upper bound on the shot-to-dark ratio for signal power ``p_sig``.

    min{4 h nu P_max / (eta_q NEP^2), 2 (h nu)^3 dV^2 / (e^2 eta_q^3 g_t^2 NEP^2 P_sig)}.
    """
    if spec.nep == 0:
        return math.inf
    hv = photon_energy(spec.wavelength)
    a = 4.0 * hv * spec.p_max / (spec.eta_q * spec.nep**2)
    b = 2.0 * hv**3 * spec.delta_v**2 / (E_CHARGE**2 * spec.eta_q**3 * spec.g_t**2
                                          * spec.nep**2 * p_sig)
    return min(a, b)


def lamb_dicke_dynamic_range(trap: TrapSpec) -> tuple[float, float]:
    """(eta_LD, eta_total / eta_LD^2) with eta_LD = alpha k z_zpf."""
    eta_ld = trap.alpha_geom * (2.0 * math.pi / trap.wavelength) * trap.z_zpf
    return eta_ld, trap.eta_total / eta_ld**2


def adc_dynamic_range(bits: int = 16) -> float:
    """Power dynamic range (2^bits)^2 of an ideal ADC."""
    if bits <= 0:
        raise ConfigError("bits must be positive")
    return float((2**bits) ** 2)


def budget_report(spec: DetectorSpec, trap: TrapSpec, p_sig: float = 100e-9,
                  p_lo: float = 4e-3, adc_bits: int = 16) -> dict:
    """All budget quantities as a JSON-ready dict (SI units)."""
    p_lim = lo_power_limit(spec, p_sig)
    p_sat = saturation_power(spec)
    shot, dark = noise_currents(spec, p_lo)
    snr, snr_db = snr_shot_to_dark(spec, p_lo)
    snr_max, snr_max_db = snr_shot_to_dark(spec, p_lim)
    eta_ld, rng = lamb_dicke_dynamic_range(trap)
    adc = adc_dynamic_range(adc_bits)
    return {
        "detector": spec.to_dict(),
        "trap": trap.to_dict(),
        "p_sig_w": p_sig,
        "p_lo_w": p_lo,
        "photon_energy_j": photon_energy(spec.wavelength),
        "saturation_power_w": p_sat,
        "lo_power_limit_w": p_lim,
        "lo_limit_branch": "diode_damage" if 2 * spec.p_max <= p_sat**2 / p_sig else "saturation",
        "shot_noise_a_per_rthz": shot,
        "dark_noise_a_per_rthz": dark,
        "snr_shot_to_dark": snr,
        "snr_shot_to_dark_db": snr_db,
        "snr_at_lo_limit": snr_max,
        "snr_at_lo_limit_db": snr_max_db,
        "snr_quoted_max_db": QUOTED_MAX_SNR_DB,
        "snr_quoted_discrepancy_db": snr_max_db - QUOTED_MAX_SNR_DB,
        "mass_kg": trap.mass,
        "z_zpf_m": trap.z_zpf,
        "eta_ld": eta_ld,
        "required_dynamic_range": rng,
        "adc_bits": adc_bits,
        "adc_dynamic_range": adc,
        "adc_sufficient": bool(adc >= rng),
    }
