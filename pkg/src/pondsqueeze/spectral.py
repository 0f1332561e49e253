"""Averaged periodogram estimates with chi-squared confidence bands.

Conventions: single-sided densities in units^2/Hz, so a record with unit
double-sided white PSD (per-sample variance equal to the sample rate)
shows a flat level of 2.0. Cross spectra are ``conj(A) * B``.
Segments are mean-subtracted, windowed (Hann by default), 50% overlapped.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal, stats

from .errors import ConfigError, ShotNoiseNormalizationError
from .traces import SHOT_UNIT, QuadraturePair, TimeTrace

__all__ = [
    "SpectrumEstimate",
    "QuadratureSpectra",
    "AngleSpectrogram",
    "welch_psd",
    "welch_csd",
    "quadrature_spectra",
    "chi2_band",
    "effective_averages",
    "spectrogram_vs_angle",
    "shot_level",
    "spectrum_csv",
    "write_spectrum_csv",
]

SHOT_LEVEL_SINGLE_SIDED = 2.0
_BATCH_ELEMS = 1 << 22


@dataclass
class SpectrumEstimate:
    """Averaged (cross-)spectral density.

    ``ci_lo``/``ci_hi`` are multiplicative bounds: at level ``ci_level``
    the estimate lies within ``[lo, hi]`` times the true spectrum.
    """

    frequencies: np.ndarray
    values: np.ndarray
    n_avg: int
    n_eff: float
    window: str
    enbw: float
    sample_rate: float
    nperseg: int
    noverlap: int
    unit: str = SHOT_UNIT
    is_auto: bool = True
    ci_level: float | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_avg < 1:
            raise ConfigError("n_avg must be >= 1")
        if self.is_auto and np.iscomplexobj(self.values) and np.any(self.values.imag != 0):
            raise ConfigError("auto-spectrum with non-zero imaginary part")

    @property
    def dof(self) -> np.ndarray:
        """Chi-squared degrees of freedom per bin (2 n_eff; n_eff at DC/Nyquist)."""
        d = np.full(self.frequencies.shape, 2.0 * self.n_eff)
        edge = (self.frequencies == 0) | (
            (self.nperseg % 2 == 0) & np.isclose(self.frequencies, self.sample_rate / 2))
        d[edge] = self.n_eff
        return d

    @property
    def resolution(self) -> float:
        return self.sample_rate / self.nperseg

    def confidence_interval(self):
        """Interval on the true spectrum, (values/hi, values/lo), for auto spectra."""
        est = self if self.ci_lo is not None else chi2_band(self)
        mag = np.abs(est.values)
        return mag / est.ci_hi, mag / est.ci_lo

    def band(self, f_lo, f_hi) -> "SpectrumEstimate":
        sel = (self.frequencies >= f_lo) & (self.frequencies <= f_hi)
        kw = {"frequencies": self.frequencies[sel], "values": self.values[sel]}
        if self.ci_lo is not None:
            kw.update(ci_lo=self.ci_lo[sel], ci_hi=self.ci_hi[sel])
        return replace(self, **kw)


def effective_averages(window: np.ndarray, step: int, n_avg: int) -> float:
    """Number of independent averages equivalent to ``n_avg`` overlapped segments."""
    w2 = np.sum(window**2)
    acc = 0.0
    for j in range(1, n_avg):
        lag = j * step
        if lag >= window.size:
            break
        rho = (np.dot(window[:-lag], window[lag:]) / w2) ** 2
        acc += (1.0 - j / n_avg) * rho
    return n_avg / (1.0 + 2.0 * acc)


def _plan(n, fs, segment_len, overlap, nperseg):
    if n == 0:
        raise ConfigError("empty trace")
    if not (0.0 <= overlap <= 0.9):
        raise ConfigError("overlap must lie in [0, 0.9]")
    if nperseg is None:
        nperseg = int(round(segment_len * fs))
    if nperseg < 2 or nperseg > n:
        raise ConfigError(f"segment length {nperseg} samples incompatible with trace of {n}")
    noverlap = int(round(overlap * nperseg))
    step = nperseg - noverlap
    if step < 1:
        raise ConfigError("degenerate segmenting (zero step)")
    k = 1 + (n - nperseg) // step
    return nperseg, noverlap, step, k


def _welch_core(xs, pairs, fs, segment_len, overlap, window, band, nperseg=None):
    n = xs[0].size
    nperseg, noverlap, step, k = _plan(n, fs, segment_len, overlap, nperseg)
    win = signal.get_window(window, nperseg)
    freqs = np.fft.rfftfreq(nperseg, 1.0 / fs)
    if band is None:
        i0, i1 = 0, freqs.size
    else:
        i0 = int(np.searchsorted(freqs, band[0], side="left"))
        i1 = int(np.searchsorted(freqs, band[1], side="right"))
        if i1 <= i0:
            raise ConfigError("requested band contains no frequency bins")
    views = [sliding_window_view(x, nperseg)[::step] for x in xs]
    acc = {pq: np.zeros(i1 - i0, dtype=float if pq[0] == pq[1] else complex) for pq in pairs}
    need = sorted({i for pq in pairs for i in pq})
    batch = max(1, _BATCH_ELEMS // nperseg)
    for s in range(0, k, batch):
        e = min(k, s + batch)
        spec = {}
        for i in need:
            seg = views[i][s:e] - views[i][s:e].mean(axis=1, keepdims=True)
            spec[i] = np.fft.rfft(seg * win, axis=1)[:, i0:i1]
        for (a, b) in pairs:
            # explicit real arithmetic keeps conj symmetry bit-exact
            ar, ai = spec[a].real, spec[a].imag
            br, bi = spec[b].real, spec[b].imag
            re = (ar * br + ai * bi).sum(axis=0)
            if a == b:
                acc[(a, b)] += re
            else:
                acc[(a, b)] += re + 1j * (ar * bi - ai * br).sum(axis=0)
    scale = 1.0 / (fs * np.sum(win**2) * k)
    onesided = np.full(i1 - i0, 2.0)
    f = freqs[i0:i1]
    onesided[f == 0] = 1.0
    if nperseg % 2 == 0:
        onesided[f == fs / 2] = 1.0
    out = {pq: v * scale * onesided for pq, v in acc.items()}
    info = dict(frequencies=f, n_avg=k, n_eff=effective_averages(win, step, k),
                window=str(window), enbw=fs * np.sum(win**2) / np.sum(win) ** 2,
                sample_rate=fs, nperseg=nperseg, noverlap=noverlap)
    return out, info


def chi2_band(estimate: SpectrumEstimate, level: float = 0.95) -> SpectrumEstimate:
    """Attach per-bin multiplicative chi-squared bounds at ``level``."""
    if not (0 < level < 1):
        raise ConfigError("level must lie in (0, 1)")
    dof = estimate.dof
    lo = stats.chi2.ppf(0.5 * (1 - level), dof) / dof
    hi = stats.chi2.ppf(0.5 * (1 + level), dof) / dof
    return replace(estimate, ci_level=level, ci_lo=lo, ci_hi=hi)


def _check_trace(t: TimeTrace):
    if len(t) == 0:
        raise ConfigError("empty trace")


def welch_psd(trace: TimeTrace, segment_len: float = 0.5, overlap: float = 0.5,
              window="hann", band=None, ci_level: float | None = 0.95,
              nperseg: int | None = None) -> SpectrumEstimate:
    """Single-sided averaged power spectral density of ``trace``.

    Parameters
    ----------
    segment_len : float
        Segment duration in s (ignored if ``nperseg`` given).
    band : (f_lo, f_hi) or None
        Keep only bins inside this frequency range (Hz).
    """
    _check_trace(trace)
    out, info = _welch_core([trace.samples], [(0, 0)], trace.sample_rate, segment_len,
                            overlap, window, band, nperseg)
    est = SpectrumEstimate(values=out[(0, 0)], unit=trace.unit, is_auto=True, **info)
    return chi2_band(est, ci_level) if ci_level else est


def welch_csd(a: TimeTrace, b: TimeTrace, segment_len: float = 0.5, overlap: float = 0.5,
              window="hann", band=None, ci_level: float | None = 0.95,
              nperseg: int | None = None) -> SpectrumEstimate:
    """Averaged cross spectral density conj(A) B with the ``welch_psd`` scaling."""
    _check_trace(a)
    if len(a) != len(b) or a.sample_rate != b.sample_rate:
        raise ConfigError("cross spectrum needs traces of equal length and sample rate")
    out, info = _welch_core([a.samples, b.samples], [(0, 1)], a.sample_rate, segment_len,
                            overlap, window, band, nperseg)
    vals = out[(0, 1)]
    est = SpectrumEstimate(values=vals, unit=a.unit, is_auto=False, **info)
    return chi2_band(est, ci_level) if ci_level else est


def _cos_sin(theta):
    """cos and sin, exact at integer multiples of pi/2."""
    th = np.asarray(theta, dtype=float)
    k = np.round(th / (np.pi / 2))
    quarter = np.abs(th - k * (np.pi / 2)) <= 1e-15
    c, s = np.cos(th), np.sin(th)
    km = np.mod(k, 4).astype(int)
    c = np.where(quarter, np.choose(km, [1.0, 0.0, -1.0, 0.0]), c)
    s = np.where(quarter, np.choose(km, [0.0, 1.0, 0.0, -1.0]), s)
    return c, s


@dataclass
class QuadratureSpectra:
    """Auto and cross spectra of a quadrature pair; any rotated spectrum follows exactly."""

    s00: SpectrumEstimate
    s11: SpectrumEstimate
    s01: SpectrumEstimate

    @property
    def frequencies(self) -> np.ndarray:
        return self.s00.frequencies

    @property
    def n_eff(self) -> float:
        return self.s00.n_eff

    def _wrap(self, vals, auto, level=0.95):
        est = replace(self.s00, values=vals, is_auto=auto, ci_lo=None, ci_hi=None, ci_level=None)
        return chi2_band(est, level)

    def rotated(self, theta: float) -> SpectrumEstimate:
        """PSD of x0 cos(theta) + xpi2 sin(theta)."""
        c, s = _cos_sin(theta)
        vals = c * c * self.s00.values + s * s * self.s11.values + 2 * c * s * self.s01.values.real
        return self._wrap(vals, True)

    def rotated_many(self, thetas) -> np.ndarray:
        c, s = _cos_sin(np.asarray(thetas, dtype=float)[:, None])
        return c * c * self.s00.values + s * s * self.s11.values + 2 * c * s * self.s01.values.real

    def cross(self, theta_a: float, theta_b: float) -> SpectrumEstimate:
        """Cross spectrum conj(X_a) X_b of two rotated quadratures."""
        ca, sa = _cos_sin(theta_a)
        cb, sb = _cos_sin(theta_b)
        v = (ca * cb * self.s00.values + sa * sb * self.s11.values
             + ca * sb * self.s01.values + sa * cb * np.conj(self.s01.values))
        return self._wrap(v, False)


def quadrature_spectra(pair: QuadraturePair, segment_len: float = 0.5, overlap: float = 0.5,
                       window="hann", band=None, nperseg: int | None = None) -> QuadratureSpectra:
    """One pass over the pair computing S00, S11 and S01."""
    out, info = _welch_core([pair.x0.samples, pair.xpi2.samples], [(0, 0), (1, 1), (0, 1)],
                            pair.sample_rate, segment_len, overlap, window, band, nperseg)
    mk = lambda v, auto: chi2_band(SpectrumEstimate(values=v, unit=pair.unit, is_auto=auto, **info))
    return QuadratureSpectra(mk(out[(0, 0)], True), mk(out[(1, 1)], True), mk(out[(0, 1)], False))


def shot_level(reference, band=None, segment_len: float = 0.5, unit: str | None = None) -> float:
    """Single-sided shot-noise level used for normalization.

    ``reference`` may be a signal-blocked ``QuadraturePair`` (mean PSD of
    both channels over ``band``), a ``SpectrumEstimate``, a number, or
    ``None``; ``None`` is only allowed for shot-noise-unit data, where the
    nominal level 2.0 is returned.
    """
    if reference is None:
        if unit == SHOT_UNIT:
            return SHOT_LEVEL_SINGLE_SIDED
        raise ShotNoiseNormalizationError("data not in shot-noise units and no reference given")
    if isinstance(reference, (int, float, np.floating)):
        return float(reference)
    if isinstance(reference, SpectrumEstimate):
        est = reference if band is None else reference.band(*band)
        return float(np.mean(est.values.real))
    if isinstance(reference, QuadraturePair):
        qs = quadrature_spectra(reference, segment_len=segment_len, band=band)
        return float(0.5 * (qs.s00.values.mean() + qs.s11.values.mean()))
    if isinstance(reference, TimeTrace):
        return float(welch_psd(reference, segment_len, band=band).values.mean())
    raise ShotNoiseNormalizationError(f"unsupported shot reference {type(reference).__name__}")


@dataclass
class AngleSpectrogram:
    """Shot-noise normalized PSD on a (theta, frequency) grid."""

    thetas: np.ndarray
    frequencies: np.ndarray
    values: np.ndarray
    n_eff: float
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    shot_level: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta_rad", "frequency_hz", "value", "ci_lo", "ci_hi"])
        for i, th in enumerate(self.thetas):
            for j, f in enumerate(self.frequencies):
                v = self.values[i, j]
                w.writerow([repr(float(th)), repr(float(f)), repr(float(v)),
                             repr(float(v / self.ci_hi[j])), repr(float(v / self.ci_lo[j]))])
        return buf.getvalue()


def spectrogram_vs_angle(pair: QuadraturePair, theta_grid, shot_reference=None,
                         segment_len: float = 0.5, overlap: float = 0.5, window="hann",
                         band=None, spectra: QuadratureSpectra | None = None,
                         ci_level: float = 0.95) -> AngleSpectrogram:
    """Rotated PSDs for every angle in ``theta_grid``, divided by the shot level."""
    thetas = np.atleast_1d(np.asarray(theta_grid, dtype=float))
    if thetas.size == 0:
        raise ConfigError("theta grid is empty")
    if spectra is None:
        spectra = quadrature_spectra(pair, segment_len, overlap, window, band)
    f = spectra.frequencies
    level = shot_level(shot_reference, band=(f[0], f[-1]), segment_len=segment_len, unit=pair.unit)
    vals = spectra.rotated_many(thetas) / level
    ref = chi2_band(spectra.s00, ci_level)
    return AngleSpectrogram(thetas, f, vals, spectra.n_eff, ref.ci_lo, ref.ci_hi, level)


def spectrum_csv(est: SpectrumEstimate) -> str:
    """CSV text with columns frequency_hz, value_re, value_im, ci_lo, ci_hi.

    The CI columns bound the true spectrum (for cross spectra, its magnitude).
    """
    if est.ci_lo is None:
        est = chi2_band(est)
    lo, hi = est.confidence_interval()
    vals = np.asarray(est.values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frequency_hz", "value_re", "value_im", "ci_lo", "ci_hi"])
    for f, v, a, b in zip(est.frequencies, vals, lo, hi):
        w.writerow([repr(float(f)), repr(float(np.real(v))), repr(float(np.imag(v))),
                    repr(float(a)), repr(float(b))])
    return buf.getvalue()


def write_spectrum_csv(path, est: SpectrumEstimate):
    from .tracefile import atomic_write_text
    atomic_write_text(path, spectrum_csv(est))
