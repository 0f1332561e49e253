"""Heterodyne beat-note synthesis and IQ demodulation.

The beat note is the small-signal form

    i(t) = (A + x0(t)) cos(W t + phi(t)) - xpi2(t) sin(W t + phi(t)),

whose analytic signal is (A + x0 + i xpi2) exp(i (W t + phi)). Demodulation
inverts this: Hilbert transform, mix down by exp(-i W t), zero-phase
low-pass, resample to baseband, then divide out a moving-average estimate
of the carrier A exp(i phi) to remove slow phase drift.

Long records are processed in blocks with margins, so the output does not
depend on the block size beyond filter round-off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import fft as sp_fft
from scipy import signal
from scipy.ndimage import uniform_filter1d

from .errors import AliasingError, CarrierNotFoundError, ConfigError, PhaseTrackingError
from .simulator import PhaseDrift, phase_noise
from .traces import QuadraturePair, TimeTrace

__all__ = [
    "BeatNoteTrace",
    "synthesize_beatnote",
    "demodulate",
    "rotate_quadrature",
    "DEFAULT_HET_FREQ",
    "DEFAULT_BEAT_RATE",
]

TWO_PI = 2.0 * np.pi
DEFAULT_HET_FREQ = TWO_PI * 1.0e6
DEFAULT_BEAT_RATE = 5.0e6


@dataclass
class BeatNoteTrace:
    """Full-rate heterodyne photocurrent.

    Attributes
    ----------
    trace : TimeTrace
    het_freq : float
        Carrier (intermediate) frequency in rad/s.
    phase_ref : float
        Nominal carrier phase at t = 0 (rad).
    metadata : dict
        Synthesis settings, e.g. ``carrier_amplitude`` (absolute units).
    """

    trace: TimeTrace
    het_freq: float
    phase_ref: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        f_het = self.het_freq / TWO_PI
        if not self.trace.sample_rate > 4 * f_het:
            raise AliasingError(
                f"beat sample rate {self.trace.sample_rate:g} Hz must exceed 4 x {f_het:g} Hz")

    @property
    def sample_rate(self) -> float:
        return self.trace.sample_rate

    def check_mechanics(self, omega_q: float):
        if not self.het_freq > 10 * omega_q:
            raise AliasingError("heterodyne frequency must exceed 10 x the mechanical frequency")


def _ratio(fs_to, fs_from):
    fr = Fraction(fs_to / fs_from).limit_denominator(10000)
    if abs(fr.numerator / fr.denominator * fs_from - fs_to) > 1e-9 * fs_to:
        raise ConfigError("sample-rate ratio is not a simple rational number")
    return fr.numerator, fr.denominator


def _carrier_phase(start, n, f_het, fs):
    # phase of W t reduced modulo one cycle before scaling, to keep precision
    k = np.arange(start, start + n, dtype=np.float64)
    return TWO_PI * np.mod(k * (f_het / fs), 1.0)


def _carrier(start, n, f_het, fs):
    """exp(i W t) on samples start..start+n, via a one-period table when W/fs is rational."""
    fr = Fraction(f_het / fs).limit_denominator(1 << 16)
    if fr.numerator / fr.denominator == f_het / fs:
        q = fr.denominator
        table = np.exp(1j * TWO_PI * np.arange(q) / q)
        idx = (np.arange(start, start + n, dtype=np.int64) * fr.numerator) % q
        return table[idx]
    return np.exp(1j * _carrier_phase(start, n, f_het, fs))


def synthesize_beatnote(pair: QuadraturePair, het_freq: float = DEFAULT_HET_FREQ,
                        phase_drift: PhaseDrift | None = None, fs_out: float = DEFAULT_BEAT_RATE,
                        amplitude: float = 100.0, form: str = "linear", seed: int = 0,
                        omega_q: float | None = None, block: int = 1 << 16) -> BeatNoteTrace:
    """Upsample a baseband pair and modulate it onto a carrier.

    Parameters
    ----------
    amplitude : float
        Carrier amplitude A in units of the per-sample vacuum rms of the
        baseband pair, i.e. A sqrt(fs_pair) in absolute shot-noise units.
    form : {"linear", "pm"}
        ``"pm"`` uses the literal phase-modulated carrier
        (A + x0) cos(W t + phi + xpi2 / A).
    omega_q : float, optional
        Mechanical frequency for the slow-drift check (rad/s).

    Raises
    ------
    AliasingError
        Pair not band-limited below het/4 or ``fs_out`` too low.
    ConfigError
        Phase drift not slow compared with ``omega_q``.
    """
    f_het = het_freq / TWO_PI
    fs_in = pair.sample_rate
    if fs_in / 2 > f_het / 4:
        raise AliasingError(f"pair bandwidth {fs_in / 2:g} Hz exceeds het/4 = {f_het / 4:g} Hz")
    if not fs_out > 4 * f_het:
        raise AliasingError(f"fs_out {fs_out:g} Hz must exceed 4 x het {f_het:g} Hz")
    if form not in ("linear", "pm"):
        raise ConfigError(f"unknown beat-note form {form!r}")
    if phase_drift is not None and omega_q is not None:
        rate = abs(phase_drift.drift) + math.sqrt(phase_drift.diffusion * omega_q)
        if rate >= 0.1 * omega_q:
            raise ConfigError("phase drift is not slow compared with the mechanical frequency")
    up, down = _ratio(fs_out, fs_in)
    if down != 1:
        raise ConfigError("fs_out must be an integer multiple of the pair sample rate")
    a_abs = amplitude * math.sqrt(fs_in)
    n_in = len(pair)
    n = n_in * up
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed)).spawn(1)[0]))
    phi = phase_noise(phase_drift, n, fs_out, rng) if phase_drift is not None else None
    out = np.empty(n)
    margin = 64
    x0, x1 = pair.x0.samples, pair.xpi2.samples
    for s in range(0, n_in, block):
        e = min(n_in, s + block)
        lo, hi = max(0, s - margin), min(n_in, e + margin)
        u0 = signal.resample_poly(x0[lo:hi], up, 1)[(s - lo) * up:(e - lo) * up]
        u1 = signal.resample_poly(x1[lo:hi], up, 1)[(s - lo) * up:(e - lo) * up]
        c = _carrier(s * up, (e - s) * up, f_het, fs_out)
        if phase_drift is not None:
            c = c * np.exp(1j * phi[s * up:e * up])
        if form == "linear":
            out[s * up:e * up] = (a_abs + u0) * c.real - u1 * c.imag
        else:
            out[s * up:e * up] = (a_abs + u0) * (c * np.exp(1j * u1 / a_abs)).real
    md = {"carrier_amplitude": a_abs, "amplitude_shot_units": amplitude, "form": form,
          "baseband_rate_hz": fs_in, "het_freq_hz": f_het, "seed": int(seed),
          "phase_offset": 0.0 if phase_drift is None else phase_drift.offset}
    tr = TimeTrace(fs_out, out, pair.unit, "beat", dict(pair.metadata))
    return BeatNoteTrace(tr, het_freq, 0.0, md)


def _find_carrier(x, fs, f_het, n_probe=1 << 18):
    seg = x[:min(x.size, n_probe)]
    f, p = signal.periodogram(seg, fs, window="hann", detrend="constant")
    f_pk = f[np.argmax(p)]
    if abs(f_pk - f_het) > 0.01 * f_het:
        raise CarrierNotFoundError(
            f"strongest line at {f_pk:g} Hz, not within 1% of {f_het:g} Hz")
    return f_pk


def demodulate(beat: BeatNoteTrace, het_freq: float | None = None, fs_baseband: float = 200e3,
               cutoff: float | None = None, track_phase: bool = True,
               track_cycles: float = 2000.0, omega_q: float | None = None,
               block: int = 1 << 21, margin: int = 1 << 14, filter_order: int = 8) -> QuadraturePair:
    """Recover the quadrature pair from a beat note.

    Parameters
    ----------
    het_freq : float, optional
        Demodulation frequency (rad/s); defaults to ``beat.het_freq``.
    cutoff : float, optional
        Low-pass corner in Hz, default het/3.
    track_phase : bool
        Divide out the moving-average carrier over ``track_cycles`` carrier
        periods. If False the record is only referred to ``beat.phase_ref``
        and the carrier mean is subtracted, so a constant carrier phase
        phi0 leaves the pair rotated by -phi0.
    omega_q : float, optional
        Mechanical frequency (rad/s) for the tracking-rate check; when None
        the limit is the tracker bandwidth 2 pi / window.

    Raises
    ------
    CarrierNotFoundError
        No dominant line within 1% of the heterodyne frequency.
    PhaseTrackingError
        Tracked phase moves faster than ``omega_q / 10``.
    """
    w_het = beat.het_freq if het_freq is None else het_freq
    f_het = w_het / TWO_PI
    fs = beat.sample_rate
    x = beat.trace.samples
    _find_carrier(x, fs, f_het)
    up, down = _ratio(fs_baseband, fs)
    fc = f_het / 3 if cutoff is None else cutoff
    sos = signal.butter(filter_order, fc, fs=fs, output="sos")
    # keep block boundaries on the output grid
    block = max(down, (block // down) * down)
    margin = ((margin + down - 1) // down) * down
    n = x.size
    n_out = (n * up) // down
    z = np.empty(n_out, dtype=np.complex128)
    for s in range(0, n, block):
        e = min(n, s + block)
        lo, hi = max(0, s - margin), min(n, e + margin)
        a = signal.hilbert(x[lo:hi], sp_fft.next_fast_len(hi - lo))[:hi - lo]
        a *= np.conj(_carrier(lo, hi - lo, f_het, fs))
        if beat.phase_ref:
            a *= np.exp(-1j * beat.phase_ref)
        re = signal.sosfiltfilt(sos, a.real)
        im = signal.sosfiltfilt(sos, a.imag)
        re = signal.resample_poly(re, up, down)
        im = signal.resample_poly(im, up, down)
        o0 = ((s - lo) * up) // down
        o1 = o0 + ((e - s) * up) // down
        k0 = (s * up) // down
        z[k0:k0 + (o1 - o0)] = re[o0:o1] + 1j * im[o0:o1]

    win = max(1, int(round(track_cycles / f_het * fs_baseband)))
    if track_phase:
        zbar = uniform_filter1d(z.real, win, mode="nearest") + 1j * uniform_filter1d(
            z.imag, win, mode="nearest")
        phi = np.unwrap(np.angle(zbar))
        if phi.size > win:
            rate = np.max(np.abs(phi[win:] - phi[:-win])) * fs_baseband / win
        else:
            rate = 0.0
        limit = 0.1 * omega_q if omega_q is not None else TWO_PI * fs_baseband / win
        if rate > limit:
            raise PhaseTrackingError(f"tracked phase rate {rate:.3g} rad/s exceeds {limit:.3g} rad/s")
        scale = float(np.median(np.abs(zbar)))
        out = scale * (z / zbar - 1.0)
        global_phase = float(np.angle(np.mean(zbar)))
    else:
        mean = z.mean()
        out = z - mean
        scale = float(abs(mean))
        global_phase = float(np.angle(mean))
    md = dict(beat.trace.metadata)
    md.update({"demod_het_freq_hz": f_het, "demod_cutoff_hz": fc, "demod_filter_order": filter_order,
               "demod_filter": "butterworth sosfiltfilt (zero phase)",
               "track_phase": bool(track_phase), "track_window_samples": win,
               "carrier_estimate": scale, "global_phase": global_phase})
    return QuadraturePair.from_arrays(out.real.copy(), out.imag.copy(), fs_baseband,
                                      beat.trace.unit, md)


def rotate_quadrature(pair: QuadraturePair, theta: float) -> TimeTrace:
    """x0 cos(theta) + xpi2 sin(theta); exact at multiples of pi/2."""
    k = int(np.round(theta / (np.pi / 2)))
    if math.isclose(theta, k * np.pi / 2, rel_tol=0.0, abs_tol=1e-15):
        k %= 4
        src = pair.x0.samples if k in (0, 2) else pair.xpi2.samples
        vals = src.copy() if k in (0, 1) else -src
    else:
        vals = pair.x0.samples * np.cos(theta) + pair.xpi2.samples * np.sin(theta)
    return TimeTrace(pair.sample_rate, vals, pair.unit, f"x_theta={theta:.6g}", dict(pair.metadata))
