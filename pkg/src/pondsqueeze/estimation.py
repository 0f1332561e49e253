"""Calibration chain: damping, occupation, heating rate, measurement rate
and squeezing depth from a shot-noise normalized quadrature pair.

Spectral inputs follow the single-sided convention of :mod:`spectral`
(shot-noise floor 2.0). Rates are rad/s internally; reports are in Hz.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.ndimage import uniform_filter1d
from scipy.signal import get_window

from . import __version__
from .errors import (
    ConfigError,
    DomainError,
    FitConvergenceError,
    InconsistentBudgetError,
    InsufficientSignalError,
    NumericalError,
    ShotNoiseNormalizationError,
)
from .model import MechanicalParams
from .spectral import QuadratureSpectra, quadrature_spectra, shot_level, welch_psd
from .traces import SHOT_UNIT, QuadraturePair

__all__ = [
    "LorentzianFit",
    "DampingFit",
    "OccupationFit",
    "MeasurementRateFit",
    "DerivedBudget",
    "SqueezingMeasurement",
    "FitReport",
    "lorentzian",
    "fit_lorentzian_whittle",
    "fit_damping_segments",
    "estimate_occupation",
    "heating_rate",
    "fit_measurement_rate",
    "derive_budget",
    "measure_squeezing",
    "analyze",
]

TWO_PI = 2.0 * np.pi
_NM_OPTS = {"xatol": 1e-8, "fatol": 1e-8, "maxiter": 4000, "maxfev": 8000}
# single-segment fits: tolerances well below the per-segment statistical error
_NM_SEGMENT = {"xatol": 1e-5, "fatol": 1e-5, "maxiter": 4000, "maxfev": 8000}


# ------------------------------------------------------------ helpers

def lorentzian(f, f0, g, height, floor):
    """Floor plus a mechanical Lorentzian of peak ``height`` at ``f0``, FWHM ``g`` (Hz)."""
    return floor + height * (g * f0) ** 2 / ((f0**2 - f**2) ** 2 + (g * f) ** 2)


def _im_shape(f, f0, g):
    # Im chi normalized to unit peak at f0
    return (g * f0) * (g * f) / ((f0**2 - f**2) ** 2 + (g * f) ** 2)


def _peak_guess(f, p, hint_hz=None, rel_window=0.05, smooth=5, f_min=1e3):
    """Rough (f0, fwhm, height, floor) of the dominant peak."""
    sel = f >= f_min
    if hint_hz is not None:
        sel &= np.abs(f - hint_hz) <= rel_window * hint_hz
    idx = np.flatnonzero(sel)
    if idx.size < 5:
        raise InsufficientSignalError("no spectral bins around the expected resonance")
    fs_, ps = f[idx], uniform_filter1d(p[idx], max(1, smooth), mode="nearest")
    k = int(np.argmax(ps))
    floor = float(np.median(p[idx]))
    height = float(ps[k] - floor)
    if height <= 0:
        raise InsufficientSignalError("no peak above the floor")
    half = floor + 0.5 * height
    lo = k
    while lo > 0 and ps[lo] > half:
        lo -= 1
    hi = k
    while hi < ps.size - 1 and ps[hi] > half:
        hi += 1
    df = fs_[1] - fs_[0]
    width = max(fs_[hi] - fs_[lo], 2 * df)
    return float(fs_[k]), float(width), height, floor


def _num_hessian(fun, x, step=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / step**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = step
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej)
                                 - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * step**2)
    return H


def _safe_inv(H):
    try:
        C = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        C = np.linalg.pinv(H)
    return C


# ---------------------------------------------------- Lorentzian Whittle fit

@dataclass
class LorentzianFit:
    f0: float
    gamma_hz: float
    height: float
    floor: float
    f0_sigma: float
    gamma_hz_sigma: float
    nll: float
    success: bool


def fit_lorentzian_whittle(f, p, dof=2.0, guess=None, starts_bins=3, enbw_bins=1.0,
                           with_errors=True, options=None) -> LorentzianFit:
    """Whittle maximum-likelihood fit of :func:`lorentzian` to a spectrum.

    Each bin of ``p`` is modeled as the Lorentzian times chi2(dof)/dof.
    The simplex search is run in scaled log coordinates from the best of
    the starting points f0 + k df, |k| <= ``starts_bins``, then polished
    by a restart.

    Parameters
    ----------
    guess : (f0, fwhm, height, floor) or None
    enbw_bins : float
        Bin correlation factor applied to the parameter covariance.
    """
    f = np.asarray(f, dtype=float)
    p = np.asarray(p, dtype=float)
    if guess is None:
        guess = _peak_guess(f, p, f_min=f[0])
    f0g, gg, hg, flg = guess
    hg, flg = max(hg, 1e-12), max(flg, 1e-12)
    half_dof = 0.5 * dof

    def unpack(q):
        return f0g + gg * q[0], gg * np.exp(q[1]), hg * np.exp(q[2]), flg * np.exp(q[3])

    def nll(q):
        m = lorentzian(f, *unpack(q))
        return half_dof * float(np.sum(np.log(m) + p / m))

    span = (f[-1] - f[0]) / gg
    bounds = [(-0.5 * span, 0.5 * span), (np.log(0.05), np.log(20.0)), (-12, 12), (-6, 6)]
    df = f[1] - f[0]
    starts = [np.array([k * df / gg, 0.0, 0.0, 0.0]) for k in range(-starts_bins, starts_bins + 1)]
    q0 = min(starts, key=nll)
    opts = _NM_OPTS if options is None else options
    res = optimize.minimize(nll, q0, method="Nelder-Mead", bounds=bounds, options=opts)
    res = optimize.minimize(nll, res.x, method="Nelder-Mead", bounds=bounds, options=opts)
    f0, g, h, fl = unpack(res.x)
    pinned = (abs(res.x[1] - bounds[1][0]) < 1e-6 or abs(res.x[1] - bounds[1][1]) < 1e-6
              or abs(abs(res.x[0]) - 0.5 * span) < 1e-6)
    ok = bool(res.success and np.isfinite(res.fun) and not pinned)
    s_f0 = s_g = np.nan
    if with_errors and ok:
        C = _safe_inv(_num_hessian(nll, res.x)) * enbw_bins
        s_f0 = gg * math.sqrt(abs(C[0, 0]))
        s_g = g * math.sqrt(abs(C[1, 1]))
    return LorentzianFit(f0, g, h, fl, s_f0, s_g, float(res.fun), ok)


# ------------------------------------------------------------- damping

@dataclass
class DampingFit:
    """Pooled linewidth and resonance drift from segment-wise fits.

    ``gamma``, ``omega_q`` and sigmas in rad/s; series in Hz and s.
    """

    gamma: float
    gamma_sigma: float
    omega_q: float
    times: np.ndarray
    f0_series_hz: np.ndarray
    segment_gamma: np.ndarray
    drift_hz_per_s: float
    drift_sigma: float
    n_segments: int
    n_failed: int
    mean_nll: float
    gamma_avg: float
    gamma_avg_sigma: float
    floor: float


def _segment_periodograms(x, fs, nper, i0, i1, n_seg, batch=64):
    win = get_window("hann", nper)
    scale = 2.0 / (fs * np.sum(win**2))
    for s in range(0, n_seg, batch):
        e = min(n_seg, s + batch)
        seg = x[s * nper:e * nper].reshape(e - s, nper)
        seg = seg - seg.mean(axis=1, keepdims=True)
        X = np.fft.rfft(seg * win, axis=1)[:, i0:i1]
        yield s, (X.real**2 + X.imag**2) * scale


def fit_damping_segments(pair: QuadraturePair, segment_s: float = 0.5, band_halfwidth: float = 20.0,
                         omega_hint: float | None = None, trim: float = 0.1,
                         max_fail_fraction: float = 0.2) -> DampingFit:
    """Per-segment Whittle fits of the phase-quadrature resonance.

    Raises
    ------
    ConfigError
        Fewer than 10 segments.
    FitConvergenceError
        More than ``max_fail_fraction`` of segment fits failed.
    """
    fs = pair.sample_rate
    nper = int(round(segment_s * fs))
    n_seg = len(pair) // nper
    if n_seg < 10:
        raise ConfigError(f"need at least 10 segments of {segment_s} s, have {n_seg}")
    avg = welch_psd(pair.xpi2, segment_len=segment_s, ci_level=None)
    hint = None if omega_hint is None else omega_hint / TWO_PI
    f0g, wg, hg, flg = _peak_guess(avg.frequencies, avg.values, hint)
    lo, hi = f0g - band_halfwidth * wg, f0g + band_halfwidth * wg
    sel = (avg.frequencies >= lo) & (avg.frequencies <= hi)
    enbw_bins = avg.enbw / avg.resolution
    whole = fit_lorentzian_whittle(avg.frequencies[sel], avg.values[sel], 2 * avg.n_eff,
                                   (f0g, wg, hg, flg), enbw_bins=enbw_bins)
    if not whole.success:
        raise FitConvergenceError("averaged-spectrum Lorentzian fit failed")

    freqs = np.fft.rfftfreq(nper, 1.0 / fs)
    i0 = int(np.searchsorted(freqs, lo))
    i1 = int(np.searchsorted(freqs, hi, side="right"))
    f = freqs[i0:i1]
    df = f[1] - f[0]
    smooth = max(3, int(round(whole.gamma_hz / df)))
    f0s = np.full(n_seg, np.nan)
    gs = np.full(n_seg, np.nan)
    nlls = np.full(n_seg, np.nan)
    for s, block in _segment_periodograms(pair.xpi2.samples, fs, nper, i0, i1, n_seg):
        for j, p in enumerate(block):
            # centre the multi-start grid on this segment's own peak
            ps = uniform_filter1d(p, smooth, mode="nearest")
            near = np.abs(f - whole.f0) <= 5 * whole.gamma_hz
            k = np.flatnonzero(near)[np.argmax(ps[near])]
            guess = (f[k], whole.gamma_hz, whole.height, whole.floor)
            r = fit_lorentzian_whittle(f, p, 2.0, guess, with_errors=False, options=_NM_SEGMENT)
            if r.success:
                f0s[s + j], gs[s + j], nlls[s + j] = r.f0, r.gamma_hz, r.nll
    ok = np.isfinite(gs)
    n_fail = int(n_seg - ok.sum())
    if n_fail > max_fail_fraction * n_seg:
        raise FitConvergenceError(f"{n_fail} of {n_seg} segment fits failed")
    good = gs[ok]
    g_pool = float(stats.trim_mean(good, trim))
    w = np.asarray(stats.mstats.winsorize(good, limits=(trim, trim)))
    g_sig = float(np.std(w, ddof=1) / ((1 - 2 * trim) * math.sqrt(good.size)))
    t = (np.arange(n_seg) + 0.5) * segment_s
    coef, cov = np.polyfit(t[ok], f0s[ok], 1, cov=True)
    return DampingFit(
        gamma=TWO_PI * g_pool, gamma_sigma=TWO_PI * g_sig,
        omega_q=TWO_PI * float(np.mean(f0s[ok])),
        times=t, f0_series_hz=f0s, segment_gamma=TWO_PI * gs,
        drift_hz_per_s=float(coef[0]), drift_sigma=float(math.sqrt(cov[0, 0])),
        n_segments=n_seg, n_failed=n_fail, mean_nll=float(np.nanmean(nlls)),
        gamma_avg=TWO_PI * whole.gamma_hz, gamma_avg_sigma=TWO_PI * whole.gamma_hz_sigma,
        floor=whole.floor)


# ----------------------------------------------------------- occupation

@dataclass
class OccupationFit:
    n: float
    n_sigma: float
    ratio: float
    ratio_sigma: float
    re_height: float
    im_height: float
    im_height_sigma: float
    f0_hz: float
    gamma_hz: float
    chi2_red: float
    n_bins: int


def _band_spectra(pair, spectra, omega_hint, gamma_hint, band_halfwidth):
    if spectra is None:
        spectra = quadrature_spectra(pair)
    f = spectra.frequencies
    if omega_hint is None or gamma_hint is None:
        f0g, wg, _, _ = _peak_guess(f, spectra.s11.values,
                                    None if omega_hint is None else omega_hint / TWO_PI)
        f0g = f0g if omega_hint is None else omega_hint / TWO_PI
        wg = wg if gamma_hint is None else gamma_hint / TWO_PI
    else:
        f0g, wg = omega_hint / TWO_PI, gamma_hint / TWO_PI
    sel = (f >= f0g - band_halfwidth * wg) & (f <= f0g + band_halfwidth * wg)
    if sel.sum() < 10:
        raise InsufficientSignalError("analysis band holds fewer than 10 bins")
    return spectra, sel, f0g, wg


def estimate_occupation(pair: QuadraturePair | None = None, spectra: QuadratureSpectra | None = None,
                        omega_hint: float | None = None, gamma_hint: float | None = None,
                        band_halfwidth: float = 20.0) -> OccupationFit:
    """Occupation from the pi/4, 3pi/4 cross spectrum, n = (Re/Im - 1)/2.

    Re and Im parts are fitted jointly with shared centre and width and
    free heights, weighted by the per-bin variance of a cross-spectral
    estimate.

    Raises
    ------
    InsufficientSignalError
        The imaginary peak is below three standard errors.
    """
    spectra, sel, f0g, wg = _band_spectra(pair, spectra, omega_hint, gamma_hint, band_halfwidth)
    if pair is not None and pair.duration * TWO_PI * wg < 100:
        raise ConfigError("record shorter than 100 mechanical damping times")
    f = spectra.frequencies[sel]
    # conj(A) B under a forward e^{-i w t} transform is the complex conjugate
    # of the model cross spectrum, so flip Im to the model's sign
    sab = np.conj(spectra.cross(np.pi / 4, 3 * np.pi / 4).values[sel])
    saa = spectra.rotated(np.pi / 4).values[sel]
    sbb = spectra.rotated(3 * np.pi / 4).values[sel]
    n_eff = spectra.n_eff
    sm = lambda v: uniform_filter1d(v, 9, mode="nearest")
    prod, re2, im2 = sm(saa * sbb), sm(sab.real**2), sm(sab.imag**2)
    var_re = np.clip(prod + re2 - im2, 1e-300, None) / (2 * n_eff)
    var_im = np.clip(prod - re2 + im2, 1e-300, None) / (2 * n_eff)
    wr, wi = 1.0 / var_re, 1.0 / var_im
    yr, yi = sab.real, sab.imag

    def heights(f0, g):
        L = _im_shape(f, f0, g)
        return np.sum(wr * yr * L) / np.sum(wr * L * L), np.sum(wi * yi * L) / np.sum(wi * L * L), L

    def chi2_profile(q):
        f0, g = f0g + wg * q[0], wg * math.exp(q[1])
        hr, hi, L = heights(f0, g)
        return float(np.sum(wr * (yr - hr * L) ** 2) + np.sum(wi * (yi - hi * L) ** 2))

    df = f[1] - f[0]
    starts = [np.array([k * df / wg, 0.0]) for k in range(-3, 4)]
    bounds = [(-band_halfwidth / 2, band_halfwidth / 2), (np.log(0.05), np.log(20.0))]
    q0 = min(starts, key=chi2_profile)
    res = optimize.minimize(chi2_profile, q0, method="Nelder-Mead", bounds=bounds, options=_NM_OPTS)
    res = optimize.minimize(chi2_profile, res.x, method="Nelder-Mead", bounds=bounds, options=_NM_OPTS)
    if not res.success:
        raise FitConvergenceError("cross-spectrum fit did not converge")
    f0, g = f0g + wg * res.x[0], wg * math.exp(res.x[1])
    hr, hi, _ = heights(f0, g)

    def resid(x):
        L = _im_shape(f, x[0], x[1])
        return np.concatenate([(yr - x[2] * L) * np.sqrt(wr), (yi - x[3] * L) * np.sqrt(wi)])

    x = np.array([f0, g, hr, hi])
    J = np.empty((2 * f.size, 4))
    for i, st in enumerate((1e-3 * g, 1e-4 * g, 1e-6 * abs(hr) + 1e-30, 1e-6 * abs(hi) + 1e-30)):
        e = np.zeros(4)
        e[i] = st
        J[:, i] = (resid(x + e) - resid(x - e)) / (2 * st)
    r = resid(x)
    dof = max(1, r.size - 4)
    chi2_red = float(r @ r / dof)
    enbw_bins = spectra.s00.enbw / spectra.s00.resolution
    C = _safe_inv(J.T @ J) * enbw_bins * max(1.0, chi2_red)
    s_hr, s_hi, c_ri = math.sqrt(C[2, 2]), math.sqrt(C[3, 3]), C[2, 3]
    if abs(hi) < 3 * s_hi:
        raise InsufficientSignalError(
            f"imaginary cross-spectrum peak {hi:.3g} is below 3 sigma = {3 * s_hi:.3g}")
    ratio = hr / hi
    var_ratio = ratio**2 * ((s_hr / hr) ** 2 + (s_hi / hi) ** 2 - 2 * c_ri / (hr * hi))
    s_ratio = math.sqrt(max(var_ratio, 0.0))
    return OccupationFit(n=(ratio - 1) / 2, n_sigma=s_ratio / 2, ratio=ratio, ratio_sigma=s_ratio,
                         re_height=hr, im_height=hi, im_height_sigma=s_hi, f0_hz=f0, gamma_hz=g,
                         chi2_red=chi2_red, n_bins=int(f.size))


def heating_rate(n_occ: float, gamma: float, n_sigma: float = 0.0, gamma_sigma: float = 0.0):
    """Gamma_tot = n gamma with uncertainties added in quadrature; returns (value, sigma)."""
    if n_occ < 0 or gamma < 0:
        raise DomainError("occupation and damping must be non-negative")
    g_tot = n_occ * gamma
    return g_tot, math.hypot(gamma * n_sigma, n_occ * gamma_sigma)


# ------------------------------------------------------ measurement rate

@dataclass
class MeasurementRateFit:
    gamma_meas: float
    gamma_meas_sigma: float
    sigma_stat: float
    nll: float
    shot_level: float
    n_bins: int


def fit_measurement_rate(pair: QuadraturePair | None, gamma_tot: float, params: MechanicalParams,
                         shot_reference=None, spectra: QuadratureSpectra | None = None,
                         band_halfwidth: float = 20.0, gamma_tot_sigma: float = 0.0,
                         unit: str | None = None) -> MeasurementRateFit:
    """Whittle fit of the phase-quadrature PSD with Gamma_meas the only free parameter.

    Model: level (1 + 16 Gamma_meas Gamma_tot Omega^2 / ((Omega^2 - w^2)^2 + gamma^2 w^2))
    with Omega, gamma taken from ``params``.

    Raises
    ------
    ShotNoiseNormalizationError
        Data not in shot-noise units and no reference supplied.
    """
    unit = unit or (pair.unit if pair is not None else SHOT_UNIT)
    if unit != SHOT_UNIT and shot_reference is None:
        raise ShotNoiseNormalizationError("measurement-rate fit needs shot-noise units or a reference")
    spectra, sel, _, _ = _band_spectra(pair, spectra, params.omega_q, params.gamma, band_halfwidth)
    f = spectra.frequencies[sel]
    p = spectra.s11.values[sel]
    level = shot_level(shot_reference, band=(f[0], f[-1]), unit=unit)
    w = TWO_PI * f
    k = 16 * gamma_tot * params.omega_q**2 / ((params.omega_q**2 - w**2) ** 2 + (params.gamma * w) ** 2)
    half_dof = spectra.n_eff
    y = p / level - 1.0
    g0 = max(float(np.sum(y * k) / np.sum(k * k)), 1e-3 * params.gamma)

    def nll(q):
        m = level * (1.0 + g0 * q[0] * k)
        return half_dof * float(np.sum(np.log(m) + p / m))

    res = optimize.minimize(nll, [1.0], method="Nelder-Mead", bounds=[(0.0, 1e3)], options=_NM_OPTS)
    gm = g0 * float(res.x[0])
    m = level * (1.0 + gm * k)
    info = half_dof * np.sum((level * k / m) ** 2)
    enbw_bins = spectra.s11.enbw / spectra.s11.resolution
    s_stat = math.sqrt(enbw_bins / info)
    s_tot = math.hypot(s_stat, gm * gamma_tot_sigma / gamma_tot) if gamma_tot > 0 else s_stat
    return MeasurementRateFit(gm, s_tot, s_stat, float(res.fun), level, int(f.size))


@dataclass
class DerivedBudget:
    gamma_ba: float
    c_q: float
    eta_d: float
    gamma_ba_sigma: float = 0.0
    c_q_sigma: float = 0.0
    eta_d_sigma: float = 0.0


def derive_budget(gamma_tot: float, gamma_meas: float, gamma_th: float,
                  gamma_tot_sigma: float = 0.0, gamma_meas_sigma: float = 0.0) -> DerivedBudget:
    """Backaction rate, cooperativity and efficiency from the fitted rates and Gamma_th.

    Raises
    ------
    InconsistentBudgetError
        If ``gamma_th >= gamma_tot``.
    """
    if gamma_th >= gamma_tot:
        raise InconsistentBudgetError("thermal decoherence exceeds the total heating rate")
    if gamma_th <= 0:
        raise InconsistentBudgetError("thermal decoherence rate must be positive")
    g_ba = gamma_tot - gamma_th
    c_q = g_ba / gamma_th
    eta = gamma_meas / g_ba
    s_ba = gamma_tot_sigma
    return DerivedBudget(g_ba, c_q, eta, s_ba, s_ba / gamma_th,
                         eta * math.hypot(gamma_meas_sigma / gamma_meas if gamma_meas else 0.0,
                                          s_ba / g_ba))


# ------------------------------------------------------------- squeezing

@dataclass
class SqueezingMeasurement:
    """Smoothed minimum of the shot-normalized rotated spectra.

    ``depth = 1 - min_value``; ``null_depth`` is the same readout applied to
    the shot reference itself (the depth expected from noise alone).
    """

    depth: float
    sigma: float
    theta_opt: float
    omega_opt: float
    min_value: float
    null_depth: float | None
    smoothing_bins: int
    detected: bool

    @property
    def freq_opt_hz(self) -> float:
        return self.omega_opt / TWO_PI


def _min_readout(spectra, thetas, level, sel, nsm):
    vals = spectra.rotated_many(thetas)[:, sel] / level
    if nsm > 1:
        vals = uniform_filter1d(vals, nsm, axis=1, mode="nearest")
        cut = nsm // 2
        vals = vals[:, cut:vals.shape[1] - cut]
        offs = cut
    else:
        offs = 0
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return float(vals[i, j]), int(i), int(j + offs)


def measure_squeezing(pair: QuadraturePair | None, shot_reference, theta_grid=None,
                      omega_q: float | None = None, gamma: float | None = None,
                      spectra: QuadratureSpectra | None = None, band_halfwidth: float = 20.0,
                      smoothing: float = 1.0, segment_s: float = 0.5) -> SqueezingMeasurement:
    """Largest noise reduction below shot noise over the angle grid.

    PSDs are smoothed over ``smoothing * gamma`` before taking the minimum
    within Omega_q +- ``band_halfwidth`` gamma. No dark-noise subtraction.
    """
    thetas = (np.linspace(-np.pi / 2, np.pi / 2, 361) if theta_grid is None
              else np.atleast_1d(np.asarray(theta_grid, dtype=float)))
    spectra, sel, f0g, wg = _band_spectra(pair, spectra, omega_q, gamma, band_halfwidth)
    f = spectra.frequencies
    unit = pair.unit if pair is not None else spectra.s00.unit
    level = shot_level(shot_reference, band=(f[sel][0], f[sel][-1]), segment_len=segment_s, unit=unit)
    nsm = max(1, int(round(smoothing * wg / spectra.s00.resolution)))
    m, i, j = _min_readout(spectra, thetas, level, sel, nsm)
    enbw_bins = spectra.s00.enbw / spectra.s00.resolution
    dof = 2 * spectra.n_eff * max(1.0, nsm / enbw_bins)
    lo, hi = stats.chi2.ppf([0.025, 0.975], dof) / dof
    sigma = m * (hi - lo) / (2 * 1.959963984540054)
    null = None
    if isinstance(shot_reference, QuadraturePair):
        ref_spec = quadrature_spectra(shot_reference, segment_len=segment_s,
                                      band=(f[sel][0], f[sel][-1]))
        ref_sel = np.ones(ref_spec.frequencies.size, dtype=bool)
        ref_level = 0.5 * (ref_spec.s00.values.mean() + ref_spec.s11.values.mean())
        null = 1.0 - _min_readout(ref_spec, thetas, ref_level, ref_sel, nsm)[0]
    depth = 1.0 - m
    detected = depth - (null if null is not None else 0.0) > 2 * sigma and depth > 0
    return SqueezingMeasurement(depth, sigma, float(thetas[i]), TWO_PI * float(f[sel][j]), m, null,
                                nsm, bool(detected))


# --------------------------------------------------------------- report

@dataclass
class FitReport:
    """Result of the calibration chain. Rates in rad/s; ``to_dict`` gives Hz."""

    n_occ: float | None = None
    n_occ_sigma: float | None = None
    gamma: float | None = None
    gamma_sigma: float | None = None
    omega_q: float | None = None
    omega_drift_hz_per_s: float | None = None
    omega_drift_sigma: float | None = None
    drift_times: list = field(default_factory=list)
    drift_f0_hz: list = field(default_factory=list)
    gamma_tot: float | None = None
    gamma_tot_sigma: float | None = None
    gamma_meas: float | None = None
    gamma_meas_sigma: float | None = None
    gamma_th: float | None = None
    gamma_ba: float | None = None
    c_q: float | None = None
    eta_d: float | None = None
    squeeze_depth: float | None = None
    squeeze_depth_sigma: float | None = None
    squeeze_null_depth: float | None = None
    squeeze_theta: float | None = None
    squeeze_omega: float | None = None
    loglik: dict = field(default_factory=dict)
    n_segments: int | None = None
    n_failed_segments: int | None = None
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        hz = lambda v: None if v is None else v / TWO_PI
        gamma_hz = hz(self.gamma)
        gamma_tot_hz = (self.n_occ * gamma_hz if self.n_occ is not None and gamma_hz is not None
                        else hz(self.gamma_tot))
        return {
            "n_occ": self.n_occ,
            "n_occ_sigma": self.n_occ_sigma,
            "gamma_hz": gamma_hz,
            "gamma_hz_sigma": hz(self.gamma_sigma),
            "omega_q_hz": hz(self.omega_q),
            "omega_drift_hz_per_s": self.omega_drift_hz_per_s,
            "omega_drift_hz_per_s_sigma": self.omega_drift_sigma,
            "omega_drift_series": {"time_s": list(self.drift_times), "f0_hz": list(self.drift_f0_hz)},
            "gamma_tot_hz": gamma_tot_hz,
            "gamma_tot_hz_sigma": hz(self.gamma_tot_sigma),
            "gamma_meas_hz": hz(self.gamma_meas),
            "gamma_meas_hz_sigma": hz(self.gamma_meas_sigma),
            "gamma_th_hz": hz(self.gamma_th),
            "gamma_ba_hz": hz(self.gamma_ba),
            "c_q": self.c_q,
            "eta_d": self.eta_d,
            "squeeze_depth": self.squeeze_depth,
            "squeeze_depth_sigma": self.squeeze_depth_sigma,
            "squeeze_null_depth": self.squeeze_null_depth,
            "squeeze_theta_rad": self.squeeze_theta,
            "squeeze_freq_hz": hz(self.squeeze_omega),
            "loglik": self.loglik,
            "n_segments": self.n_segments,
            "n_failed_segments": self.n_failed_segments,
            "errors": self.errors,
            "version": __version__,
        }

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, (np.floating, np.integer)):
                return clean(v.item())
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True)


def analyze(pair: QuadraturePair, gamma_th: float, shot_reference=None,
            omega_hint: float | None = None, theta_grid=None, segment_s: float = 0.5,
            band_halfwidth: float = 20.0, gamma_hint: float | None = None,
            strict: bool = True) -> FitReport:
    """Run damping, occupation, heating rate, measurement rate, budget and squeezing.

    With ``strict=False`` failures of individual stages are recorded in
    ``report.errors`` and the chain continues with what it can compute.
    """
    rep = FitReport(gamma_th=gamma_th)

    def stage(name, fn):
        try:
            return fn()
        except NumericalError as exc:
            if strict:
                raise
            rep.errors[name] = f"{type(exc).__name__}: {exc}"
        except ConfigError as exc:
            if strict:
                raise
            rep.errors[name] = f"{type(exc).__name__}: {exc}"
        return None

    damp = stage("damping", lambda: fit_damping_segments(pair, segment_s, band_halfwidth, omega_hint))
    w0 = damp.omega_q if damp else omega_hint
    g = damp.gamma if damp else gamma_hint
    spectra = None
    if w0 is not None and g is not None:
        half = (band_halfwidth + 10) * g / TWO_PI
        spectra = quadrature_spectra(pair, segment_len=segment_s,
                                     band=(w0 / TWO_PI - half, w0 / TWO_PI + half))
    if damp:
        rep.gamma, rep.gamma_sigma, rep.omega_q = damp.gamma, damp.gamma_sigma, damp.omega_q
        rep.omega_drift_hz_per_s, rep.omega_drift_sigma = damp.drift_hz_per_s, damp.drift_sigma
        rep.drift_times = damp.times.tolist()
        rep.drift_f0_hz = damp.f0_series_hz.tolist()
        rep.n_segments, rep.n_failed_segments = damp.n_segments, damp.n_failed
        rep.loglik["damping_mean_segment_nll"] = damp.mean_nll
    occ = None
    if spectra is not None:
        occ = stage("occupation", lambda: estimate_occupation(pair, spectra, w0, g, band_halfwidth))
    if occ and damp:
        rep.n_occ, rep.n_occ_sigma = occ.n, occ.n_sigma
        rep.loglik["occupation_chi2_red"] = occ.chi2_red
        rep.gamma_tot, rep.gamma_tot_sigma = heating_rate(occ.n, damp.gamma, occ.n_sigma,
                                                          damp.gamma_sigma)
        pinned = MechanicalParams(1.0, w0, g)
        meas = stage("measurement_rate", lambda: fit_measurement_rate(
            pair, rep.gamma_tot, pinned, shot_reference, spectra, band_halfwidth,
            rep.gamma_tot_sigma))
        if meas:
            rep.gamma_meas, rep.gamma_meas_sigma = meas.gamma_meas, meas.gamma_meas_sigma
            rep.loglik["measurement_rate_nll"] = meas.nll
            bud = stage("budget", lambda: derive_budget(rep.gamma_tot, meas.gamma_meas, gamma_th,
                                                        rep.gamma_tot_sigma, meas.gamma_meas_sigma))
            if bud:
                rep.gamma_ba, rep.c_q, rep.eta_d = bud.gamma_ba, bud.c_q, bud.eta_d
    if spectra is not None:
        sq = stage("squeezing", lambda: measure_squeezing(
            pair, shot_reference, theta_grid, w0, g, spectra, band_halfwidth, segment_s=segment_s))
        if sq:
            rep.squeeze_depth, rep.squeeze_depth_sigma = sq.depth, sq.sigma
            rep.squeeze_null_depth = sq.null_depth
            rep.squeeze_theta, rep.squeeze_omega = sq.theta_opt, sq.omega_opt
    elif "squeezing" not in rep.errors:
        rep.errors["squeezing"] = "no resonance frequency/width available"
    return rep
