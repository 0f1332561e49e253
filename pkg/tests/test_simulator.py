import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg, stats
from scipy.ndimage import uniform_filter1d

from pondsqueeze.errors import ConfigError
from pondsqueeze.model import (DecoherenceBudget, MechanicalParams, detected_quadrature_psd,
                               motional_psd)
from pondsqueeze.simulator import (PhaseDrift, SimConfig, SpectatorMode, add_spectator_modes,
                                   phase_noise, simulate, simulate_detected_quadratures,
                                   simulate_oscillator, simulate_shot_reference,
                                   stationary_position_variance)
from pondsqueeze.spectral import chi2_band, quadrature_spectra, welch_psd

TWO_PI = 2 * np.pi


def _closure_fraction(est_values, model_single, n_eff, level=0.95):
    dof = 2 * n_eff
    lo = model_single * stats.chi2.ppf((1 - level) / 2, dof) / dof
    hi = model_single * stats.chi2.ppf((1 + level) / 2, dof) / dof
    return np.mean((est_values >= lo) & (est_values <= hi))


# ------------------------------------------------------------- oscillator

def test_no_forces_gives_identically_zero_position(ref_model):
    p, _ = ref_model
    pos, _ = simulate_oscillator(p, DecoherenceBudget(0.0, 0.0, 0.5),
                                 SimConfig(duration=0.01, seed=4))
    assert pos.unit == "z_zpf"
    assert np.all(pos.samples == 0.0)


def test_stationary_variance_matches_lyapunov_oracle(ref_model):
    p, b = ref_model
    # state (u, (du/dt)/W): A = [[0, W], [-W, -gamma]], velocity noise intensity 4 Gamma_tot
    A = np.array([[0.0, p.omega_q], [-p.omega_q, -p.gamma]])
    Q = np.diag([0.0, 4 * b.gamma_tot])
    P = linalg.solve_continuous_lyapunov(A, -Q)
    assert stationary_position_variance(p, b) == pytest.approx(P[0, 0], rel=1e-10)
    assert P[0, 0] == pytest.approx(2 * b.n_occ(p), rel=1e-10)


def test_sample_position_variance(short_run, ref_model):
    p, b = ref_model
    u = short_run["result"].position.samples
    assert np.var(u) == pytest.approx(stationary_position_variance(p, b), rel=0.05)


def test_position_psd_closure(short_run, ref_model):
    p, b = ref_model
    pos = short_run["result"].position
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    est = welch_psd(pos, band=(f0 - 20 * g, f0 + 20 * g))
    model = 2 * motional_psd(p, b, omega=TWO_PI * est.frequencies) / p.z_zpf**2
    assert _closure_fraction(est.values, model, est.n_eff) >= 0.90


def test_backaction_record_correlates_with_amplitude_quadrature(ref_model):
    p, b = ref_model
    cfg = SimConfig(duration=0.5, seed=9)
    res = simulate(p, b, cfg, position=True)
    w, x0 = res.ba_record.samples, res.pair.x0.samples
    r = np.corrcoef(w, x0)[0, 1]
    rho = math.sqrt(b.eta_d)
    se = (1 - rho**2) / math.sqrt(w.size)
    assert abs(r - rho) < 3 * se
    assert res.ba_record.metadata["force_coefficient"] == pytest.approx(
        -2 * p.omega_q * math.sqrt(b.gamma_ba))


# ------------------------------------------------------------- quadratures

def test_determinism_bit_identical(ref_model):
    p, b = ref_model
    cfg = SimConfig(duration=0.2, decimation=10, seed=123)
    a = simulate(p, b, cfg, position=True)
    c = simulate(p, b, cfg, position=True)
    for x, y in ((a.pair.x0, c.pair.x0), (a.pair.xpi2, c.pair.xpi2), (a.position, c.position)):
        assert np.array_equal(x.samples, y.samples)
    d = simulate(p, b, SimConfig(duration=0.2, decimation=10, seed=124))
    assert not np.array_equal(a.pair.xpi2.samples, d.pair.xpi2.samples)
    assert a.metadata["config_hash"] == c.metadata["config_hash"] != d.metadata["config_hash"]


def test_no_backaction_gives_flat_shot_noise(ref_model):
    p, b = ref_model
    pair = simulate_detected_quadratures(p, DecoherenceBudget(b.gamma_th, 0.0, b.eta_d),
                                         SimConfig(duration=20.0, decimation=10, seed=5))
    for tr in (pair.x0, pair.xpi2):
        est = welch_psd(tr, band=(1e3, 80e3))
        assert _closure_fraction(est.values, 2.0, est.n_eff) >= 0.90
        assert np.mean(est.values) == pytest.approx(2.0, rel=0.01)
        assert np.var(tr.samples) == pytest.approx(pair.sample_rate, rel=0.01)


def test_zero_efficiency_decouples_light_from_motion(ref_model):
    p, b = ref_model
    res = simulate(p, DecoherenceBudget(b.gamma_th, b.gamma_ba, 0.0),
                   SimConfig(duration=5.0, decimation=10, seed=6), position=True)
    u = res.position.samples
    n = u.size
    for x in (res.pair.x0.samples, res.pair.xpi2.samples):
        # one white series: the correlation coefficient has standard error 1/sqrt(N)
        assert abs(np.corrcoef(x, u)[0, 1]) < 4 / math.sqrt(n)


def test_parseval(short_run):
    for tr in (short_run["result"].position, short_run["pair"].xpi2):
        est = welch_psd(tr, segment_len=0.05)
        total = integrate.trapezoid(est.values, est.frequencies)
        assert total == pytest.approx(np.var(tr.samples), rel=0.01)


@pytest.mark.parametrize("theta", np.linspace(-np.pi / 2, np.pi / 2, 13))
def test_quadrature_closure_on_angle_grid(short_run, ref_model, theta):
    p, b = ref_model
    spectra = short_run["spectra"]
    f = spectra.frequencies
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    sel = np.abs(f - f0) <= 20 * g
    est = spectra.rotated(theta).values[sel]
    model = 2 * detected_quadrature_psd(p, b, theta, TWO_PI * f[sel])
    assert _closure_fraction(est, model, spectra.n_eff) >= 0.90


# ------------------------------------------------------------- spectators

@pytest.fixture(scope="module")
def spectator_pair(ref_model):
    p, b = ref_model
    modes = (SpectatorMode(TWO_PI * 178e3, TWO_PI * 150.0, 30.0),
             SpectatorMode(TWO_PI * 229e3, TWO_PI * 150.0, 20.0))
    base = SimConfig(duration=6.0, decimation=2, seed=31)
    with_modes = SimConfig(duration=6.0, decimation=2, seed=31, spectator_modes=modes)
    return simulate(p, b, base).pair, simulate(p, b, with_modes).pair, with_modes


def test_spectator_empty_list_is_identity(ref_model):
    p, b = ref_model
    cfg = SimConfig(duration=0.05, decimation=2, seed=1)
    pair = simulate(p, b, cfg).pair
    assert add_spectator_modes(pair, cfg) is pair


def test_spectator_peaks_appear_without_squeezing(spectator_pair):
    base, spec, cfg = spectator_pair
    seg = 0.05
    s_with = welch_psd(spec.xpi2, seg, ci_level=None)
    s_base = welch_psd(base.xpi2, seg, ci_level=None)
    f = s_with.frequencies
    for m in cfg.spectator_modes:
        fm, gm = m.omega / TWO_PI, m.gamma / TWO_PI
        k = np.argmin(np.abs(f - fm))
        # resolution 20 Hz, linewidth 150 Hz: the peak bin sits near the top of the Lorentzian
        assert s_with.values[k] > 0.5 * 2 * m.transduction_weight
        assert s_base.values[k] == pytest.approx(2.0, rel=0.25)
        # nothing below shot noise at any angle near the spectator
        qs = quadrature_spectra(spec, segment_len=0.5, band=(fm - 20 * gm, fm + 20 * gm))
        thetas = np.linspace(-np.pi / 2, np.pi / 2, 37)
        nsm = int(round(gm / qs.s00.resolution))
        vals = qs.rotated_many(thetas) / 2.0
        sm = uniform_filter1d(vals, nsm, axis=1)
        sigma = math.sqrt(1.5 / (qs.n_eff * nsm))
        assert sm.min() > 1 - 5 * sigma
    assert np.array_equal(base.x0.samples, spec.x0.samples)


def test_spectators_leave_main_mode_unchanged(spectator_pair, ref_model):
    p, _ = ref_model
    base, spec, _ = spectator_pair
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    band = (f0 - 20 * g, f0 + 20 * g)
    a = quadrature_spectra(base, band=band).rotated(np.pi / 20)
    c = quadrature_spectra(spec, band=band).rotated(np.pi / 20)
    ci = chi2_band(a)
    half_ci = a.values * (ci.ci_hi - ci.ci_lo) / 2
    assert np.all(np.abs(a.values - c.values) < 0.01 * half_ci)


# ------------------------------------------------------------- config

def test_config_validation(ref_model):
    p, _ = ref_model
    with pytest.raises(ConfigError):
        SimConfig(duration=1.0, sample_rate=1e6).validate(p)
    with pytest.raises(ConfigError):
        SimConfig(duration=1.0, decimation=20).validate(p)
    with pytest.raises(ConfigError):
        SimConfig(duration=1e4, max_samples=1000)
    with pytest.raises(ConfigError):
        SimConfig(duration=1.0, seed=-1)
    with pytest.raises(ConfigError):
        SimConfig(duration=1.0, decimation=2,
                  spectator_modes=(SpectatorMode(TWO_PI * 480e3, 1.0, 1.0),)).validate(p)
    cfg = SimConfig(duration=2.0, decimation=10, seed=7,
                    spectator_modes=(SpectatorMode(1.0, 2.0, 3.0),))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_shot_reference_is_unit_white():
    ref = simulate_shot_reference(SimConfig(duration=10.0, decimation=10, seed=8))
    assert ref.unit == "shot-noise"
    for tr in (ref.x0, ref.xpi2):
        assert np.var(tr.samples) == pytest.approx(tr.sample_rate, rel=0.01)


def test_phase_noise_model():
    rng = np.random.default_rng(0)
    assert np.all(phase_noise(None, 100, 1e3, rng) == 0)
    fs, D = 1e3, 0.5
    walks = np.array([phase_noise(PhaseDrift(D, 0.0, 0.0), 1001, fs, rng)[-1] for _ in range(2000)])
    # Var phi(t) = D t with t = 1 s
    assert np.var(walks) == pytest.approx(D * 1.0, rel=0.1)
    det = phase_noise(PhaseDrift(0.0, 2.0, 0.3), 11, 10.0, rng)
    assert np.allclose(det, 0.3 + 2.0 * np.arange(11) / 10.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**64 - 1))
def test_any_seed_reproduces(seed):
    p = MechanicalParams(1e-18, TWO_PI * 50e3, TWO_PI * 100.0)
    b = DecoherenceBudget(TWO_PI * 1e3, TWO_PI * 1e3, 0.3)
    cfg = SimConfig(duration=0.002, seed=seed)
    a, c = simulate(p, b, cfg).pair, simulate(p, b, cfg).pair
    assert np.array_equal(a.x0.samples, c.x0.samples)
    assert np.array_equal(a.xpi2.samples, c.xpi2.samples)
