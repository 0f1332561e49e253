"""Stochastic time-domain simulation of the measured oscillator.

Position is carried in zero-point units, u = q / z_zpf. In these units the
thermal and backaction forces are white with double-sided intensity
4 Omega_q^2 Gamma, and the phase quadrature picks up -2 sqrt(Gamma_ba) u.
Optical records are in shot-noise units: vacuum is white with unit
double-sided PSD, i.e. per-sample variance equal to the sample rate.

The oscillator is advanced with the exact one-step solution of the linear
SDE for the augmented state (u, du/dt, int u dt), so the detected phase
quadrature uses the bin average of u over each step. The backaction white
noise of the same step is drawn jointly with the state increment, which
makes the amplitude quadrature and the motion exactly correlated. Records
are optionally decimated with a streaming FIR cascade; vacuum terms that
do not touch the oscillator are generated directly at the output rate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy import linalg, signal

from .errors import ConfigError
from .model import DecoherenceBudget, MechanicalParams
from .traces import QuadraturePair, TimeTrace

__all__ = [
    "SpectatorMode",
    "PhaseDrift",
    "SimConfig",
    "SimulationResult",
    "simulate",
    "simulate_oscillator",
    "simulate_detected_quadratures",
    "simulate_shot_reference",
    "add_spectator_modes",
    "phase_noise",
    "stationary_position_variance",
]

TWO_PI = 2.0 * np.pi
_STREAMS = ("oscillator", "vacuum", "spectators", "phase", "reference")


@dataclass(frozen=True)
class SpectatorMode:
    """Extra mechanical mode seen only in the phase quadrature.

    ``transduction_weight`` is the peak height of its double-sided PSD in
    shot-noise units.
    """

    omega: float
    gamma: float
    transduction_weight: float


@dataclass(frozen=True)
class PhaseDrift:
    """Slow heterodyne phase: random walk (rad^2/s), linear drift (rad/s), offset (rad)."""

    diffusion: float = 0.0
    drift: float = 0.0
    offset: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Parameters
    ----------
    duration : float
        Record length in s.
    sample_rate : float
        Integration rate in Hz; output rate is ``sample_rate / decimation``.
    seed : int
        Unsigned 64-bit seed; all random streams derive from it.
    decimation : int
        Integer output decimation through an anti-alias FIR cascade.
    spectator_modes : tuple of SpectatorMode
    phase_drift : PhaseDrift or None
        Consumed by the beat-note synthesizer.
    omega_drift : float
        Linear drift of the resonance, rad/s per s.
    max_samples : int
        Cap on output samples per channel (memory guard).
    chunk_size : int
        Integration steps per chunk.
    """

    duration: float
    sample_rate: float = 2e6
    seed: int = 0
    decimation: int = 1
    spectator_modes: tuple = ()
    phase_drift: PhaseDrift | None = None
    omega_drift: float = 0.0
    max_samples: int = 200_000_000
    chunk_size: int = 1 << 20

    def __post_init__(self):
        object.__setattr__(self, "spectator_modes", tuple(
            m if isinstance(m, SpectatorMode)
            else SpectatorMode(**m) if isinstance(m, dict) else SpectatorMode(*m)
            for m in self.spectator_modes))
        if isinstance(self.phase_drift, dict):
            object.__setattr__(self, "phase_drift", PhaseDrift(**self.phase_drift))
        if not (self.duration > 0):
            raise ConfigError("duration must be positive")
        if not (self.sample_rate > 0):
            raise ConfigError("sample_rate must be positive")
        if not (0 <= int(self.seed) < 2**64) or int(self.seed) != self.seed:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if int(self.decimation) != self.decimation or self.decimation < 1:
            raise ConfigError("decimation must be a positive integer")
        if self.n_output > self.max_samples:
            raise ConfigError(f"{self.n_output} output samples exceed the cap of {self.max_samples}")

    @property
    def output_rate(self) -> float:
        return self.sample_rate / self.decimation

    @property
    def n_output(self) -> int:
        return int(round(self.duration * self.output_rate))

    def validate(self, params: MechanicalParams):
        f_q = params.omega_q / TWO_PI
        if self.sample_rate <= 20 * f_q:
            raise ConfigError(f"sample_rate must exceed 20 f_q = {20 * f_q:.6g} Hz")
        f_top = f_q + 25 * params.gamma / TWO_PI + abs(self.omega_drift) * self.duration / TWO_PI
        if self.decimation > 1 and 0.4 * self.output_rate < f_top:
            raise ConfigError("decimated output band does not cover the resonance; lower decimation")
        for m in self.spectator_modes:
            if m.omega / TWO_PI >= 0.45 * self.output_rate:
                raise ConfigError(f"spectator at {m.omega / TWO_PI:.6g} Hz above 0.45 x output rate")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spectator_modes"] = [asdict(m) for m in self.spectator_modes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


def stationary_position_variance(params: MechanicalParams, budget: DecoherenceBudget) -> float:
    """Variance of u = q/z_zpf in steady state, from the Lyapunov equation (= 2 n)."""
    s = 4.0 * params.omega_q**2 * budget.gamma_tot
    return s / (2.0 * params.gamma * params.omega_q**2)


# ----------------------------------------------------------------- kernels

def _scaled_cholesky(cov):
    d = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    idx = np.flatnonzero(d > 0)
    L = np.zeros_like(cov)
    if idx.size:
        c = cov[np.ix_(idx, idx)] / np.outer(d[idx], d[idx])
        try:
            lc = np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            lc = np.linalg.cholesky(c + 1e-13 * np.eye(idx.size))
        L[np.ix_(idx, idx)] = d[idx, None] * lc
    return L


def _step_matrices(omega, gamma, h, s_tot, a_ba):
    """Exact one-step propagator and noise factor for (u, du/dt, int u).

    Computed in step-scaled time (s = t/h) for conditioning, then mapped
    back. Returns ``phi`` (3x3) and a lower-triangular ``L`` (4x4) such
    that ``L @ z`` with standard normal ``z`` gives the joint increment
    (xi_u, xi_v, xi_Y, w) where w is the step-averaged backaction white
    noise that drives the force with coefficient ``a_ba``.
    """
    a, g = omega * h, gamma * h
    A = np.array([[0.0, 1.0, 0.0], [-a * a, -g, 0.0], [1.0, 0.0, 0.0]])
    b = np.array([0.0, 1.0, 0.0])
    M = np.zeros((6, 6))
    M[:3, :3] = -A
    M[:3, 3:] = np.outer(b, b)
    M[3:, 3:] = A.T
    E = linalg.expm(M)
    phi_s = E[3:, 3:].T
    G = phi_s @ E[:3, 3:]
    G = 0.5 * (G + G.T)
    M2 = np.zeros((4, 4))
    M2[:3, :3] = A
    M2[:3, 3] = b
    c = linalg.expm(M2)[:3, 3]
    T = np.array([1.0, 1.0 / h, h])
    phi = phi_s * T[:, None] / T[None, :]
    cov = np.empty((4, 4))
    cov[:3, :3] = s_tot * h**3 * G * np.outer(T, T)
    cov[:3, 3] = cov[3, :3] = h * a_ba * T * c
    cov[3, 3] = 1.0 / h
    return phi, _scaled_cholesky(cov)


@njit(cache=True)
def _advance(z, phi, L, inv_h, state, u_out, ubar_out, w_out):
    u = state[0]
    v = state[1]
    for k in range(z.shape[0]):
        z0 = z[k, 0]
        z1 = z[k, 1]
        z2 = z[k, 2]
        z3 = z[k, 3]
        eu = L[0, 0] * z0
        ev = L[1, 0] * z0 + L[1, 1] * z1
        ey = L[2, 0] * z0 + L[2, 1] * z1 + L[2, 2] * z2
        ew = L[3, 0] * z0 + L[3, 1] * z1 + L[3, 2] * z2 + L[3, 3] * z3
        u_out[k] = u
        ubar_out[k] = (phi[2, 0] * u + phi[2, 1] * v + ey) * inv_h
        w_out[k] = ew
        un = phi[0, 0] * u + phi[0, 1] * v + eu
        v = phi[1, 0] * u + phi[1, 1] * v + ev
        u = un
    state[0] = u
    state[1] = v


# --------------------------------------------------------------- decimator

def _prime_factors(n):
    out, p = [], 2
    while n > 1:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    return sorted(out, reverse=True)


class _FirStage:
    def __init__(self, taps, factor, nch):
        L = len(taps)
        pad = (-(L - 1)) % factor
        self.h = np.concatenate([taps, np.zeros(pad)])
        self.d = factor
        self.buf = np.zeros((nch, len(self.h) - 1))

    def __call__(self, x):
        ext = np.concatenate([self.buf, x], axis=1)
        y = signal.upfirdn(self.h, ext, up=1, down=self.d, axis=1)
        j0 = self.buf.shape[1] // self.d
        out = y[:, j0:j0 + x.shape[1] // self.d]
        self.buf = ext[:, ext.shape[1] - self.buf.shape[1]:]
        return out


class _Decimator:
    """Streaming anti-alias decimation, passband to 0.4 and stopband from
    0.6 of the output rate, 90 dB Kaiser design per stage."""

    def __init__(self, factor, fs_in, nch, passband=0.4, atten_db=90.0):
        self.stages = []
        f_pass = passband * fs_in / factor
        fs = fs_in
        warm = 0.0
        for d in _prime_factors(factor):
            fs_out = fs / d
            f_stop = fs_out - f_pass
            ntaps, beta = signal.kaiserord(atten_db, (f_stop - f_pass) / (fs / 2))
            ntaps |= 1
            taps = signal.firwin(ntaps, 0.5 * (f_pass + f_stop), window=("kaiser", beta), fs=fs)
            self.stages.append(_FirStage(taps, d, nch))
            warm += len(taps) * (fs_in / factor) / fs
            fs = fs_out
        self.warmup = int(math.ceil(warm)) + 2

    def __call__(self, x):
        for st in self.stages:
            x = st(x)
        return x


# --------------------------------------------------------------- simulation

@dataclass
class SimulationResult:
    pair: QuadraturePair | None = None
    position: TimeTrace | None = None
    ba_record: TimeTrace | None = None
    metadata: dict = field(default_factory=dict)


def _streams(seed):
    kids = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(k)) for name, k in zip(_STREAMS, kids)}


def _provenance(params, budget, cfg):
    from .tracefile import config_hash
    cfgd = {"mechanics": params.to_dict(), "budget": budget.to_dict(), "simulation": cfg.to_dict()}
    return {"seed": int(cfg.seed), "config_hash": config_hash(cfgd)}


def simulate(params: MechanicalParams, budget: DecoherenceBudget, cfg: SimConfig,
             quadratures: bool = True, position: bool = False) -> SimulationResult:
    """Run one realization and return the requested records.

    Calls with the same inputs produce bit-identical output; the
    oscillator, vacuum and spectator streams are independent children of
    ``cfg.seed``, so the quadratures and the position from separate calls
    with one config belong to the same realization.
    """
    cfg.validate(params)
    rngs = _streams(cfg.seed)
    fs, D = cfg.sample_rate, int(cfg.decimation)
    fs_out = cfg.output_rate
    n_out = cfg.n_output
    h = 1.0 / fs
    eta = budget.eta_d
    md = _provenance(params, budget, cfg)
    res = SimulationResult(metadata=md)

    fast_only_white = budget.gamma_ba == 0 and not position
    x0 = np.empty(n_out) if quadratures else None
    x1 = np.empty(n_out) if quadratures else None
    u_rec = np.empty(n_out) if position else None
    w_rec = np.empty(n_out)

    if fast_only_white:
        # no backaction: the force is identically zero and the amplitude
        # record is plain white noise at the output rate
        rng = rngs["oscillator"]
        for s in range(0, n_out, cfg.chunk_size):
            e = min(n_out, s + cfg.chunk_size)
            w_rec[s:e] = rng.standard_normal(e - s) * math.sqrt(fs_out)
        ubar_rec = np.zeros(n_out)
    else:
        ubar_rec = np.empty(n_out)
        rng = rngs["oscillator"]
        dec = _Decimator(D, fs, 3) if D > 1 else None
        n_warm = dec.warmup if dec else 0
        chunk = max(D, (cfg.chunk_size // D) * D)
        n_fast = (n_out + n_warm) * D
        t0 = -n_warm / fs_out
        s_tot = 4.0 * params.omega_q**2 * budget.gamma_tot
        var_u = s_tot / (2.0 * params.gamma * params.omega_q**2)
        state = np.array([math.sqrt(var_u) * rng.standard_normal(),
                          math.sqrt(var_u) * params.omega_q * rng.standard_normal()])
        mats = None
        written, skipped = 0, 0
        for s in range(0, n_fast, chunk):
            m = min(chunk, n_fast - s)
            if mats is None or cfg.omega_drift != 0.0:
                om = params.omega_q + cfg.omega_drift * (t0 + (s + 0.5 * m) * h)
                s_tot = 4.0 * om**2 * budget.gamma_tot
                a_ba = -2.0 * om * math.sqrt(budget.gamma_ba)
                mats = _step_matrices(om, params.gamma, h, s_tot, a_ba)
            z = rng.standard_normal((m, 4))
            u_pt, ub, w = np.empty(m), np.empty(m), np.empty(m)
            _advance(z, mats[0], mats[1], fs, state, u_pt, ub, w)
            del z
            blk = np.stack([ub, w, u_pt])
            if dec is not None:
                blk = dec(blk)
            k = blk.shape[1]
            drop = min(k, n_warm - skipped)
            skipped += drop
            k -= drop
            if k <= 0:
                continue
            ubar_rec[written:written + k] = blk[0, drop:]
            w_rec[written:written + k] = blk[1, drop:]
            if position:
                u_rec[written:written + k] = blk[2, drop:]
            written += k
        assert written == n_out

    if quadratures:
        rng = rngs["vacuum"]
        sq = math.sqrt(fs_out)
        g_ba = 2.0 * math.sqrt(budget.gamma_ba)
        se, sv = math.sqrt(eta), math.sqrt(1.0 - eta)
        for s in range(0, n_out, cfg.chunk_size):
            e = min(n_out, s + cfg.chunk_size)
            v = rng.standard_normal((3, e - s)) * sq
            x0[s:e] = se * w_rec[s:e] + sv * v[0]
            x1[s:e] = se * (v[2] - g_ba * ubar_rec[s:e]) + sv * v[1]
        pair = QuadraturePair.from_arrays(x0, x1, fs_out, metadata=md)
        if cfg.spectator_modes:
            pair = add_spectator_modes(pair, cfg)
        res.pair = pair
    if position:
        res.position = TimeTrace(fs_out, u_rec, "z_zpf", "position", dict(md))
    res.ba_record = TimeTrace(fs_out, w_rec, "shot-noise", "ba_amplitude",
                              dict(md, force_coefficient=-2.0 * params.omega_q
                                   * math.sqrt(budget.gamma_ba)))
    return res


def simulate_oscillator(params, budget, cfg):
    """Position (z_zpf units) and the backaction white-noise record.

    The backaction force in u-units is ``force_coefficient * w`` with the
    coefficient stored in the record's metadata.
    """
    r = simulate(params, budget, cfg, quadratures=False, position=True)
    return r.position, r.ba_record


def simulate_detected_quadratures(params, budget, cfg) -> QuadraturePair:
    return simulate(params, budget, cfg).pair


def simulate_shot_reference(cfg: SimConfig, duration: float | None = None) -> QuadraturePair:
    """Signal-blocked record: both quadratures pure vacuum at the output rate."""
    n = cfg.n_output if duration is None else int(round(duration * cfg.output_rate))
    rng = _streams(cfg.seed)["reference"]
    sq = math.sqrt(cfg.output_rate)
    x0 = np.empty(n)
    x1 = np.empty(n)
    for s in range(0, n, cfg.chunk_size):
        e = min(n, s + cfg.chunk_size)
        v = rng.standard_normal((2, e - s)) * sq
        x0[s:e], x1[s:e] = v[0], v[1]
    return QuadraturePair.from_arrays(x0, x1, cfg.output_rate,
                                      metadata={"seed": int(cfg.seed), "reference": True})


def add_spectator_modes(pair: QuadraturePair, cfg: SimConfig) -> QuadraturePair:
    """Add independent thermal Lorentzians to the phase quadrature only."""
    if not cfg.spectator_modes:
        return pair
    fs = pair.sample_rate
    n = len(pair)
    h = 1.0 / fs
    kids = np.random.SeedSequence(int(cfg.seed)).spawn(len(_STREAMS))[2].spawn(len(cfg.spectator_modes))
    x1 = pair.xpi2.samples.copy()
    for mode, ss in zip(cfg.spectator_modes, kids):
        if mode.omega / TWO_PI >= 0.45 * fs:
            raise ConfigError("spectator mode above 0.45 x sample rate")
        rng = np.random.Generator(np.random.PCG64(ss))
        # force intensity giving a unit-height displacement peak
        s_f = (mode.gamma * mode.omega) ** 2
        phi, L = _step_matrices(mode.omega, mode.gamma, h, s_f, 0.0)
        var = s_f / (2 * mode.gamma * mode.omega**2)
        state = np.array([math.sqrt(var) * rng.standard_normal(),
                          math.sqrt(var) * mode.omega * rng.standard_normal()])
        amp = math.sqrt(mode.transduction_weight)
        for s in range(0, n, cfg.chunk_size):
            e = min(n, s + cfg.chunk_size)
            m = e - s
            u, ub, w = np.empty(m), np.empty(m), np.empty(m)
            _advance(rng.standard_normal((m, 4)), phi, L, fs, state, u, ub, w)
            x1[s:e] += amp * u
    return QuadraturePair(pair.x0, TimeTrace(fs, x1, pair.xpi2.unit, pair.xpi2.label,
                                              dict(pair.xpi2.metadata)))


def phase_noise(drift: PhaseDrift | None, n: int, sample_rate: float,
                rng: np.random.Generator) -> np.ndarray:
    """Heterodyne phase phi(t): offset + drift t + random walk with Var = D t."""
    t = np.arange(n) / sample_rate
    if drift is None:
        return np.zeros(n)
    phi = drift.offset + drift.drift * t
    if drift.diffusion > 0:
        steps = rng.standard_normal(n) * math.sqrt(drift.diffusion / sample_rate)
        steps[0] = 0.0
        phi += np.cumsum(steps)
    return phi
