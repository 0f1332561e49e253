import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pondsqueeze.errors import (ConfigError, DomainError, FitConvergenceError,
                                InconsistentBudgetError, InsufficientSignalError,
                                ShotNoiseNormalizationError)
from pondsqueeze.estimation import (FitReport, analyze, derive_budget, estimate_occupation,
                                    fit_damping_segments, fit_lorentzian_whittle,
                                    fit_measurement_rate, heating_rate, lorentzian,
                                    measure_squeezing)
from pondsqueeze.model import (DecoherenceBudget, cross_spectrum_model, detected_quadrature_psd)
from pondsqueeze.simulator import SimConfig, simulate
from pondsqueeze.spectral import QuadratureSpectra, SpectrumEstimate
from pondsqueeze.traces import QuadraturePair

TWO_PI = 2 * np.pi
K_HZ = TWO_PI * 1e3


def _est(f, values, auto=True, n_eff=100.0, fs=2e5, nperseg=100_000):
    return SpectrumEstimate(frequencies=f, values=values, n_avg=int(n_eff), n_eff=n_eff,
                            window="hann", enbw=1.5 * fs / nperseg, sample_rate=fs,
                            nperseg=nperseg, noverlap=nperseg // 2, is_auto=auto)


def _model_spectra(p, b, n_occ, halfwidth=40):
    """Noise-free single-sided quadrature spectra built from the model."""
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    f = np.arange(f0 - halfwidth * g, f0 + halfwidth * g, 2.0)
    w = TWO_PI * f
    c = cross_spectrum_model(p, b, n_occ, w)
    # cross(pi/4, 3pi/4) = (s11 - s00)/2 + i Im s01, conjugated by the estimator
    s00 = np.full(f.size, 2.0)
    s11 = 2.0 + 4.0 * c.real
    s01 = -2.0j * c.imag
    return QuadratureSpectra(_est(f, s00), _est(f, s11), _est(f, s01, auto=False))


# ---------------------------------------------------------- Whittle fit

def test_whittle_fit_is_unbiased_with_honest_errors():
    rng = np.random.default_rng(5)
    f = np.arange(76_000.0, 78_000.0, 2.0)
    truth = (76_900.0, 89.7, 40.0, 2.0)
    m = lorentzian(f, *truth)
    fits = []
    for _ in range(150):
        p = m * rng.exponential(size=f.size)
        r = fit_lorentzian_whittle(f, p, 2.0, (76_910.0, 80.0, 30.0, 2.2))
        assert r.success
        fits.append((r.f0, r.gamma_hz, r.f0_sigma, r.gamma_hz_sigma))
    fits = np.array(fits)
    g_sd = np.std(fits[:, 1], ddof=1)
    assert np.mean(fits[:, 1]) == pytest.approx(truth[1], abs=3 * g_sd / math.sqrt(len(fits)) + 0.5)
    assert np.mean(fits[:, 0]) == pytest.approx(truth[0], abs=1.0)
    # Fisher errors describe the actual scatter
    assert np.median(fits[:, 3]) == pytest.approx(g_sd, rel=0.25)
    assert np.median(fits[:, 2]) == pytest.approx(np.std(fits[:, 0], ddof=1), rel=0.25)


# ------------------------------------------------------------- damping

@pytest.fixture(scope="module")
def short_damping(short_run, ref_model):
    return fit_damping_segments(short_run["pair"], omega_hint=ref_model[0].omega_q)


def test_damping_recovers_linewidth(short_damping, ref_model):
    p, _ = ref_model
    d = short_damping
    assert d.n_segments == 100
    assert d.gamma == pytest.approx(p.gamma, rel=0.05)
    # 0.3 Hz at 500 s scales to about 1 Hz at 50 s
    assert 0.3 < d.gamma_sigma / TWO_PI < 3.0
    assert d.omega_q == pytest.approx(p.omega_q, abs=TWO_PI * 5.0)
    assert d.drift_hz_per_s == pytest.approx(0.0, abs=4 * d.drift_sigma)


def test_averaged_and_pooled_linewidths_agree_without_drift(short_damping):
    d = short_damping
    joint = math.hypot(d.gamma_sigma, d.gamma_avg_sigma)
    assert abs(d.gamma - d.gamma_avg) < 3 * joint


def test_damping_recovers_injected_drift(ref_model):
    p, b = ref_model
    rate = 7.0 / 60.0
    # per-segment centres scatter by ~5 Hz, so the slope error is ~4 % at 200 s
    cfg = SimConfig(duration=200.0, decimation=10, seed=17, omega_drift=TWO_PI * rate)
    pair = simulate(p, b, cfg).pair
    d = fit_damping_segments(pair, omega_hint=p.omega_q)
    assert d.drift_hz_per_s == pytest.approx(rate, rel=0.15)
    assert d.drift_sigma < 0.06 * rate
    assert d.f0_series_hz.size == 400


def test_damping_errors(short_run, shot_run):
    pair = short_run["pair"]
    short = QuadraturePair.from_arrays(pair.x0.samples[:800_000], pair.xpi2.samples[:800_000],
                                       pair.sample_rate)
    with pytest.raises(ConfigError):
        fit_damping_segments(short)
    assert "FitConvergenceError" in shot_run["report"].errors["damping"]


# ----------------------------------------------------------- occupation

@pytest.mark.parametrize("n_occ", [0.0, 3.0, 84.73, 400.0])
def test_occupation_exact_on_model_spectra(ref_model, n_occ):
    p, b = ref_model
    occ = estimate_occupation(spectra=_model_spectra(p, b, n_occ), omega_hint=p.omega_q,
                              gamma_hint=p.gamma)
    assert occ.ratio == pytest.approx(2 * n_occ + 1, rel=1e-6, abs=1e-6)
    assert occ.n == pytest.approx(n_occ, rel=1e-6, abs=1e-6)
    assert occ.gamma_hz == pytest.approx(p.gamma / TWO_PI, rel=1e-6)


def test_occupation_on_simulation(short_run, ref_model):
    p, b = ref_model
    occ = estimate_occupation(short_run["pair"], short_run["spectra"], p.omega_q, p.gamma)
    assert occ.n == pytest.approx(b.n_occ(p), rel=0.05)
    assert 0 < occ.n_sigma < 0.05 * occ.n


def test_occupation_backaction_dominated(ref_model):
    p, _ = ref_model
    n_true = 150.0
    g_tot = n_true * p.gamma
    g_th = g_tot / 6.0
    b = DecoherenceBudget(g_th, 5.0 * g_th, 0.4)
    pair = simulate(p, b, SimConfig(duration=40.0, decimation=10, seed=41)).pair
    assert b.n_occ(p) == pytest.approx(n_true)
    occ = estimate_occupation(pair, None, p.omega_q, p.gamma)
    assert occ.n == pytest.approx(n_true, rel=0.05)


def test_occupation_requires_signal(shot_run, ref_model):
    p, _ = ref_model
    with pytest.raises(InsufficientSignalError):
        estimate_occupation(shot_run["pair"], None, p.omega_q, p.gamma)
    with pytest.raises(ConfigError):
        pair = shot_run["pair"]
        tiny = QuadraturePair.from_arrays(pair.x0.samples[:20_000], pair.xpi2.samples[:20_000],
                                          pair.sample_rate)
        estimate_occupation(tiny, None, p.omega_q, p.gamma, band_halfwidth=5)


# ---------------------------------------------------------- heating rate

def test_heating_rate_examples():
    g_tot, _ = heating_rate(84.9, TWO_PI * 89.7)
    assert g_tot / K_HZ == pytest.approx(7.6, abs=0.05)
    assert heating_rate(0.0, TWO_PI * 89.7)[0] == 0.0
    with pytest.raises(DomainError):
        heating_rate(-1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(n=st.floats(0, 1e4), g=st.floats(0, 1e5), sn=st.floats(0, 10), sg=st.floats(0, 10))
def test_heating_rate_properties(n, g, sn, sg):
    v, s = heating_rate(n, g, sn, sg)
    assert v == n * g
    assert heating_rate(2 * n, 2 * g)[0] == pytest.approx(4 * v)
    assert s == pytest.approx(math.sqrt((g * sn) ** 2 + (n * sg) ** 2))


# ------------------------------------------------------ measurement rate

def test_measurement_rate_exact_on_model(ref_model):
    p, b = ref_model
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    f = np.arange(f0 - 40 * g, f0 + 40 * g, 2.0)
    s11 = 2.0 * detected_quadrature_psd(p, b, np.pi / 2, TWO_PI * f)
    qs = QuadratureSpectra(_est(f, np.full(f.size, 2.0)), _est(f, s11),
                           _est(f, np.zeros(f.size, complex), auto=False))
    r = fit_measurement_rate(None, b.gamma_tot, p, None, qs)
    assert r.gamma_meas == pytest.approx(b.gamma_meas, rel=1e-6)
    assert r.shot_level == 2.0


def test_measurement_rate_on_simulation(short_run, ref_model):
    p, b = ref_model
    r = fit_measurement_rate(short_run["pair"], b.gamma_tot, p, None, short_run["spectra"])
    assert r.gamma_meas == pytest.approx(b.gamma_meas, rel=0.15)
    assert r.gamma_meas_sigma > 0


def test_measurement_rate_zero_without_measurement(shot_run, ref_model):
    p, b = ref_model
    r = fit_measurement_rate(shot_run["pair"], b.gamma_tot, p)
    assert r.gamma_meas < 2 * r.gamma_meas_sigma


def test_measurement_rate_scales_with_efficiency(ref_model):
    p, b = ref_model
    cfg = SimConfig(duration=20.0, decimation=10, seed=55)
    fits = []
    for eta in (0.12, 0.24):
        bb = DecoherenceBudget(b.gamma_th, b.gamma_ba, eta)
        fits.append(fit_measurement_rate(simulate(p, bb, cfg).pair, bb.gamma_tot, p))
    ratio = fits[1].gamma_meas / fits[0].gamma_meas
    s = ratio * math.hypot(fits[0].sigma_stat / fits[0].gamma_meas,
                           fits[1].sigma_stat / fits[1].gamma_meas)
    assert abs(ratio - 2.0) < 3 * s


def test_measurement_rate_needs_normalization(short_run, ref_model):
    p, b = ref_model
    pair = short_run["pair"]
    volts = QuadraturePair.from_arrays(pair.x0.samples, pair.xpi2.samples, pair.sample_rate, "V")
    with pytest.raises(ShotNoiseNormalizationError):
        fit_measurement_rate(volts, b.gamma_tot, p, spectra=short_run["spectra"])


def test_estimators_are_order_independent(short_run, ref_model):
    p, b = ref_model
    pair, qs = short_run["pair"], short_run["spectra"]
    a1 = fit_measurement_rate(pair, b.gamma_tot, p, None, qs)
    o1 = estimate_occupation(pair, qs, p.omega_q, p.gamma)
    o2 = estimate_occupation(pair, qs, p.omega_q, p.gamma)
    a2 = fit_measurement_rate(pair, b.gamma_tot, p, None, qs)
    assert a1 == a2
    assert o1 == o2


# ------------------------------------------------------------- budget

def test_derive_budget_examples():
    d = derive_budget(7.6 * K_HZ, 0.6 * K_HZ, 2.7 * K_HZ)
    assert d.gamma_ba / K_HZ == pytest.approx(4.9)
    assert d.c_q == pytest.approx(1.8, abs=0.02)
    assert d.eta_d == pytest.approx(0.12, abs=0.005)
    unit = derive_budget(2.0, 1.0, 1.0)
    assert (unit.c_q, unit.eta_d) == (1.0, 1.0)
    with pytest.raises(InconsistentBudgetError):
        derive_budget(1.0, 0.1, 1.0)
    with pytest.raises(InconsistentBudgetError):
        derive_budget(1.0, 0.1, 0.0)


# ------------------------------------------------------------- squeezing

def test_squeezing_detected_in_short_run(short_run, ref_model, shot_run):
    p, _ = ref_model
    sq = measure_squeezing(short_run["pair"], shot_run["shot"], None, p.omega_q, p.gamma,
                           short_run["spectra"])
    assert sq.detected
    assert 0.04 < sq.depth < 0.14
    assert sq.min_value == pytest.approx(1 - sq.depth)
    # the two minima sit at opposite angles on either side of resonance
    assert 0 < abs(sq.theta_opt) < np.pi / 4
    assert np.sign(sq.theta_opt) == np.sign(sq.freq_opt_hz - p.omega_q / TWO_PI)
    assert abs(sq.freq_opt_hz - p.omega_q / TWO_PI) < 20 * p.gamma / TWO_PI
    assert sq.null_depth is not None and sq.null_depth < sq.depth


def test_squeezing_readout_of_pure_shot_noise(shot_run, ref_model):
    p, _ = ref_model
    sq = measure_squeezing(shot_run["pair"], shot_run["shot"], None, p.omega_q, p.gamma)
    # the minimum over many bins and angles of pure noise is the look-elsewhere null depth
    assert abs(sq.depth - sq.null_depth) < 3 * sq.sigma
    assert not sq.detected


def test_squeezing_exact_on_model_spectra(ref_model):
    p, b = ref_model
    f0, g = p.omega_q / TWO_PI, p.gamma / TWO_PI
    f = np.arange(f0 - 40 * g, f0 + 40 * g, 2.0)
    w = TWO_PI * f
    s00 = 2.0 * detected_quadrature_psd(p, b, 0.0, w)
    s11 = 2.0 * detected_quadrature_psd(p, b, np.pi / 2, w)
    # the pi/4 spectrum fixes the real part of the cross spectrum
    s45 = 2.0 * detected_quadrature_psd(p, b, np.pi / 4, w)
    s01 = (s45 - 0.5 * (s00 + s11)) + 0j
    qs = QuadratureSpectra(_est(f, s00), _est(f, s11), _est(f, s01, auto=False))
    thetas = np.linspace(-np.pi / 2, np.pi / 2, 721)
    sq = measure_squeezing(None, 2.0, thetas, p.omega_q, p.gamma, qs, smoothing=0.0)
    grid = detected_quadrature_psd(p, b, thetas[:, None], w[None, :])
    sel = np.abs(f - f0) <= 20 * g
    assert sq.min_value == pytest.approx(grid[:, sel].min(), rel=1e-9)


# ------------------------------------------------------------- report

@pytest.fixture(scope="module")
def short_report(short_run, ref_model, shot_run):
    p, b = ref_model
    return analyze(short_run["pair"], b.gamma_th, shot_run["shot"], omega_hint=p.omega_q)


def test_report_fields_and_identities(short_report, ref_model):
    p, b = ref_model
    r = short_report
    d = r.to_dict()
    for key in ("n_occ", "n_occ_sigma", "gamma_hz", "gamma_hz_sigma", "omega_drift_hz_per_s",
                "gamma_tot_hz", "gamma_meas_hz", "gamma_ba_hz", "c_q", "eta_d", "squeeze_depth",
                "squeeze_theta_rad", "squeeze_freq_hz"):
        assert d[key] is not None and math.isfinite(d[key]), key
    for key in ("n_occ_sigma", "gamma_hz_sigma", "gamma_tot_hz_sigma", "gamma_meas_hz_sigma",
                "squeeze_depth_sigma"):
        assert d[key] > 0, key
    assert r.gamma_tot == r.n_occ * r.gamma
    assert d["gamma_tot_hz"] == d["n_occ"] * d["gamma_hz"]
    assert r.c_q * r.gamma_th == pytest.approx(r.gamma_ba, rel=1e-15)
    assert r.eta_d * r.gamma_ba == pytest.approx(r.gamma_meas, rel=1e-15)
    assert r.n_segments == 100 and r.n_failed_segments == 0
    assert len(d["omega_drift_series"]["f0_hz"]) == 100
    assert not r.errors
    assert d["c_q"] == pytest.approx(b.c_q, rel=0.15)


def test_report_json_round_trip(short_report):
    d = json.loads(short_report.to_json())
    assert d["n_occ"] == short_report.n_occ
    bad = FitReport(n_occ=float("nan"), gamma=np.float64(1.0))
    out = json.loads(bad.to_json())
    assert out["n_occ"] is None and out["gamma_hz"] == pytest.approx(1 / TWO_PI)


def test_reanalysis_is_identical(short_report, short_run, ref_model, shot_run):
    p, b = ref_model
    again = analyze(short_run["pair"], b.gamma_th, shot_run["shot"], omega_hint=p.omega_q)
    assert again.to_json() == short_report.to_json()


def test_lenient_analysis_records_failures(shot_run):
    rep = shot_run["report"]
    assert set(rep.errors) >= {"damping", "occupation"}
    assert "InsufficientSignalError" in rep.errors["occupation"]
    assert rep.n_occ is None and rep.squeeze_depth is not None
    with pytest.raises(FitConvergenceError):
        analyze(shot_run["pair"], 1.0, shot_run["shot"])
