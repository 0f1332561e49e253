"""Command-line interface: ``pondsqueeze <command> [options]``.

Commands: model, simulate, beatnote, demod, psd, csd, analyze, squeeze-map,
budget. Settings come from one JSON config (``--config``) merged over the
defaults; command flags override it. Every run writes the effective
config to the output directory, and every output embeds the config hash
and tool version.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure,
4 I/O error. ``PONDSQ_NUM_THREADS`` caps the threads used by the numeric
libraries.
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("PONDSQ_NUM_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse
import copy
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .budget import DetectorSpec, TrapSpec, budget_report
from .errors import ConfigError, DomainError, NumericalError, PondSqueezeError
from .estimation import analyze as run_analysis
from .heterodyne import BeatNoteTrace, demodulate, rotate_quadrature, synthesize_beatnote
from .model import (DecoherenceBudget, MechanicalParams, detected_quadrature_psd,
                    find_squeezing_extrema)
from .simulator import PhaseDrift, SimConfig, SpectatorMode, simulate, simulate_shot_reference
from .spectral import quadrature_spectra, spectrogram_vs_angle, spectrum_csv, welch_psd
from .tracefile import atomic_write_text, config_hash, read_trace, write_pair, write_trace
from .traces import TimeTrace

__all__ = ["RunConfig", "DEFAULTS", "build_parser", "main"]

TWO_PI = 2.0 * np.pi

DEFAULTS = {
    "seed": 0,
    "mechanics": {"omega_q_hz": 76.9e3, "gamma_hz": 89.7, "mass_kg": None,
                  "radius_m": 43e-9, "density_kg_m3": 1850.0},
    "budget": {"gamma_th_hz": 2.7e3, "gamma_ba_hz": 4.9e3, "eta_d": 0.6 / 4.9},
    "simulation": {"duration_s": 1.0, "sample_rate_hz": 2e6, "decimation": 10,
                   "spectators": [], "phase_drift": None, "omega_drift_hz_per_s": 0.0,
                   "shot_reference_s": None},
    "heterodyne": {"het_freq_hz": 1e6, "beat_rate_hz": 5e6, "amplitude": 100.0,
                   "form": "linear", "track_phase": True, "baseband_rate_hz": None},
    "estimation": {"segment_s": 0.5, "band_halfwidth": 20.0, "n_theta": 361},
    "model": {"theta_rad": math.pi / 20, "f_min_hz": None, "f_max_hz": None,
              "n_freq": 2001, "n_theta": 721},
    "detector": {"nep": 8e-12, "delta_v": 3.6, "g_t": 1e4, "p_max": 5e-3, "eta_q": 0.85,
                 "wavelength": 1064e-9},
    "trap": {"radius": 43e-9, "density": 1850.0, "wavelength": 1064e-9, "omega_z_hz": 76.9e3,
             "alpha_geom": 1.5, "eta_total": 0.3},
    "detection": {"p_sig_w": 100e-9, "p_lo_w": 4e-3, "adc_bits": 16},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Full run configuration; all frequencies and rates in Hz."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        user = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(user, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            user.pop("_meta", None)  # stamp added when the config is echoed
        d = _merge(DEFAULTS, user)
        d = _merge(d, overrides or {})
        return cls(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    def __getitem__(self, key):
        return self.data[key]

    def params(self) -> MechanicalParams:
        m = self["mechanics"]
        w, g = TWO_PI * m["omega_q_hz"], TWO_PI * m["gamma_hz"]
        if m.get("mass_kg"):
            return MechanicalParams(m["mass_kg"], w, g)
        return MechanicalParams.from_sphere(m["radius_m"], w, g, m["density_kg_m3"])

    def budget(self) -> DecoherenceBudget:
        b = self["budget"]
        return DecoherenceBudget(TWO_PI * b["gamma_th_hz"], TWO_PI * b["gamma_ba_hz"], b["eta_d"])

    def sim_config(self) -> SimConfig:
        s = self["simulation"]
        spec = tuple(SpectatorMode(TWO_PI * m["freq_hz"], TWO_PI * m["gamma_hz"], m["weight"])
                     for m in s["spectators"])
        drift = PhaseDrift(**s["phase_drift"]) if s["phase_drift"] else None
        try:
            seed = int(self["seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("seed must be an integer") from exc
        return SimConfig(duration=s["duration_s"], sample_rate=s["sample_rate_hz"], seed=seed,
                         decimation=s["decimation"], spectator_modes=spec, phase_drift=drift,
                         omega_drift=TWO_PI * s["omega_drift_hz_per_s"])

    def detector(self) -> DetectorSpec:
        return DetectorSpec(**self["detector"])

    def trap(self) -> TrapSpec:
        t = dict(self["trap"])
        t["omega_z"] = TWO_PI * t.pop("omega_z_hz")
        return TrapSpec(**t)

    def build(self, what: str):
        """Construct ``params``, ``budget``, ``sim_config``, ``detector`` or ``trap``."""
        try:
            return getattr(self, what)()
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad {what} settings: {exc}") from exc


# ------------------------------------------------------------------ output

def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "version": __version__}


def _csv_text(header, rows, cfg) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash} version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) for x in r])
    return buf.getvalue()


def _write_json(path, obj):
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, (np.floating, np.integer, np.bool_)):
            return clean(v.item())
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    atomic_write_text(path, json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")


def _echo_config(out, cfg):
    _write_json(os.path.join(out, "config.json"), {**cfg.to_dict(), "_meta": _stamp(cfg)})


def _write_table(args, cfg, name, header, rows):
    if args.format == "json":
        path = os.path.join(args.out, name + ".json")
        cols = list(zip(*rows)) if rows else [[] for _ in header]
        _write_json(path, {**_stamp(cfg), **{h: list(map(float, c)) for h, c in zip(header, cols)}})
    else:
        path = os.path.join(args.out, name + ".csv")
        atomic_write_text(path, _csv_text(header, rows, cfg))
    return path


def _write_spectrum(args, cfg, name, est):
    if args.format == "json":
        lo, hi = est.confidence_interval()
        path = os.path.join(args.out, name + ".json")
        _write_json(path, {**_stamp(cfg), "frequency_hz": est.frequencies.tolist(),
                           "value_re": np.real(est.values).tolist(),
                           "value_im": np.imag(est.values).tolist(),
                           "ci_lo": lo.tolist(), "ci_hi": hi.tolist(), "n_eff": est.n_eff})
    else:
        path = os.path.join(args.out, name + ".csv")
        atomic_write_text(path, f"# config_hash={cfg.hash} version={__version__}\n"
                          + spectrum_csv(est))
    return path


def _analysis_band(cfg, halfwidth=None):
    m = cfg["mechanics"]
    hw = (halfwidth or cfg["estimation"]["band_halfwidth"]) * m["gamma_hz"]
    return m["omega_q_hz"] - hw, m["omega_q_hz"] + hw


# ---------------------------------------------------------------- commands

def cmd_model(args, cfg):
    params, budget = cfg.build("params"), cfg.build("budget")
    mc = cfg["model"]
    f_lo = mc["f_min_hz"] if mc["f_min_hz"] is not None else _analysis_band(cfg, 50)[0]
    f_hi = mc["f_max_hz"] if mc["f_max_hz"] is not None else _analysis_band(cfg, 50)[1]
    f = np.linspace(max(f_lo, 0.0), f_hi, int(mc["n_freq"]))
    written = []
    if args.spectrogram:
        thetas = np.linspace(-np.pi / 2, np.pi / 2, int(mc["n_theta"]))
        vals = detected_quadrature_psd(params, budget, thetas[:, None], TWO_PI * f[None, :])
        rows = [(t, ff, v) for t, row in zip(thetas, vals) for ff, v in zip(f, row)]
        written.append(_write_table(args, cfg, "model_spectrogram",
                                    ["theta_rad", "frequency_hz", "value"], rows))
    else:
        theta = mc["theta_rad"] if args.theta is None else args.theta
        vals = detected_quadrature_psd(params, budget, theta, TWO_PI * f)
        written.append(_write_table(args, cfg, "model_spectrum", ["frequency_hz", "value"],
                                    list(zip(f, vals))))
    if args.extrema:
        ex = find_squeezing_extrema(params, budget)
        pt = lambda p: {"freq_hz": p.omega / TWO_PI, "theta_rad": p.theta, "value": p.value}
        path = os.path.join(args.out, "model_extrema.json")
        _write_json(path, {**_stamp(cfg), "upper": pt(ex.upper), "lower": pt(ex.lower),
                           "min_value": ex.min_value, "theta_sq": ex.theta_sq,
                           "saddle_verified": ex.saddle_verified})
        written.append(path)
    return written


def cmd_simulate(args, cfg):
    params, budget, sc = cfg.build("params"), cfg.build("budget"), cfg.build("sim_config")
    sc.validate(params)
    res = simulate(params, budget, sc)
    path = os.path.join(args.out, "traces.pondtrc")
    write_pair(path, res.pair, cfg.to_dict(), sc.seed, {"kind": "quadratures", "version": __version__})
    written = [path]
    if not args.no_reference:
        dur = cfg["simulation"]["shot_reference_s"] or sc.duration
        ref = simulate_shot_reference(sc, dur)
        rpath = os.path.join(args.out, "shot_reference.pondtrc")
        write_pair(rpath, ref, cfg.to_dict(), sc.seed, {"kind": "shot_reference",
                                                        "version": __version__})
        written.append(rpath)
    return written


def _load_pair(path):
    tf = read_trace(path)
    if not {"x0", "xpi2"} <= set(tf.metadata["channels"]):
        raise ConfigError(f"{path}: not a quadrature-pair trace")
    return tf, tf.pair()


def cmd_beatnote(args, cfg):
    h = cfg["heterodyne"]
    tf, pair = _load_pair(args.trace)
    drift = cfg.build("sim_config").phase_drift
    beat = synthesize_beatnote(pair, TWO_PI * h["het_freq_hz"], drift, h["beat_rate_hz"],
                               h["amplitude"], h["form"], cfg["seed"], cfg.build("params").omega_q)
    path = os.path.join(args.out, "beat.pondtrc")
    md = {"kind": "beatnote", "seed": cfg["seed"], "config": cfg.to_dict(),
          "source_config_hash": tf.metadata.get("config_hash"),
          "het_freq_hz": h["het_freq_hz"], "beat": beat.metadata}
    write_trace(path, {"beat": beat.trace.samples}, beat.sample_rate,
                {"beat": beat.trace.unit}, md)
    return [path]


def cmd_demod(args, cfg):
    h = cfg["heterodyne"]
    tf = read_trace(args.trace)
    if "beat" not in tf.metadata["channels"]:
        raise ConfigError(f"{args.trace}: not a beat-note trace")
    het = TWO_PI * tf.metadata.get("het_freq_hz", h["het_freq_hz"])
    beat = BeatNoteTrace(tf.trace("beat"), het)
    fs_bb = h["baseband_rate_hz"] or tf.metadata.get("beat", {}).get("baseband_rate_hz") or 200e3
    pair = demodulate(beat, fs_baseband=fs_bb, track_phase=h["track_phase"],
                      omega_q=cfg.build("params").omega_q)
    path = os.path.join(args.out, "demod.pondtrc")
    cfg_src = tf.metadata.get("config") or cfg.to_dict()
    extra = {"kind": "quadratures", "demod": {k: v for k, v in pair.metadata.items()
                                              if k.startswith(("demod", "track", "carrier",
                                                               "global"))}}
    write_pair(path, pair, cfg_src, tf.metadata.get("seed"), extra)
    return [path]


def _band_arg(args, cfg):
    if args.band:
        return tuple(args.band)
    return _analysis_band(cfg)


def cmd_psd(args, cfg):
    _, pair = _load_pair(args.trace)
    seg = cfg["estimation"]["segment_s"]
    if args.channel in ("x0", "xpi2"):
        tr = getattr(pair, args.channel)
    else:
        tr = rotate_quadrature(pair, float(args.theta))
    est = welch_psd(tr, seg, band=_band_arg(args, cfg))
    return [_write_spectrum(args, cfg, "psd", est)]


def cmd_csd(args, cfg):
    _, pair = _load_pair(args.trace)
    qs = quadrature_spectra(pair, cfg["estimation"]["segment_s"], band=_band_arg(args, cfg))
    est = qs.cross(args.theta_a, args.theta_b)
    return [_write_spectrum(args, cfg, "csd", est)]


def _check_hashes(files, force):
    hashes = {p: tf.metadata.get("config_hash") for p, tf in files}
    if len(set(hashes.values())) > 1 and not force:
        raise ConfigError("trace files come from different configs "
                          f"({', '.join(f'{p}: {h}' for p, h in hashes.items())}); use --force")


def cmd_analyze(args, cfg):
    tf, pair = _load_pair(args.trace)
    files = [(args.trace, tf)]
    ref = None
    if args.reference:
        rtf, ref = _load_pair(args.reference)
        files.append((args.reference, rtf))
    _check_hashes(files, args.force)
    gamma_th = TWO_PI * (args.gamma_th_hz if args.gamma_th_hz is not None
                         else cfg["budget"]["gamma_th_hz"])
    est = cfg["estimation"]
    thetas = np.linspace(-np.pi / 2, np.pi / 2, int(est["n_theta"]))
    rep = run_analysis(pair, gamma_th, ref, omega_hint=cfg.build("params").omega_q, theta_grid=thetas,
                       segment_s=est["segment_s"], band_halfwidth=est["band_halfwidth"],
                       gamma_hint=cfg.build("params").gamma, strict=False)
    out = rep.to_dict()
    out["trace_config_hash"] = tf.metadata.get("config_hash")
    out.update(_stamp(cfg))
    written = [os.path.join(args.out, "report.json")]
    _write_json(written[0], out)
    if rep.omega_q is not None and rep.gamma is not None:
        f0, g = rep.omega_q / TWO_PI, rep.gamma / TWO_PI
        hw = est["band_halfwidth"] * g
        qs = quadrature_spectra(pair, est["segment_s"], band=(f0 - hw, f0 + hw))
        written.append(_write_spectrum(args, cfg, "psd_xpi2", qs.s11))
        written.append(_write_spectrum(args, cfg, "csd_pi4_3pi4",
                                       qs.cross(np.pi / 4, 3 * np.pi / 4)))
    if rep.errors:
        for k, v in rep.errors.items():
            print(f"{k}: {v}", file=sys.stderr)
        raise _PartialFailure(written)
    return written


def cmd_squeeze_map(args, cfg):
    _, pair = _load_pair(args.trace)
    ref = _load_pair(args.reference)[1] if args.reference else None
    thetas = np.linspace(-np.pi / 2, np.pi / 2, int(cfg["estimation"]["n_theta"]))
    sg = spectrogram_vs_angle(pair, thetas, ref, cfg["estimation"]["segment_s"],
                              band=_band_arg(args, cfg))
    path = os.path.join(args.out, "squeeze_map.csv")
    atomic_write_text(path, f"# config_hash={cfg.hash} version={__version__}\n" + sg.to_csv())
    return [path]


def cmd_budget(args, cfg):
    d = cfg["detection"]
    rep = budget_report(cfg.build("detector"), cfg.build("trap"), d["p_sig_w"], d["p_lo_w"], d["adc_bits"])
    path = os.path.join(args.out, "budget.json")
    _write_json(path, {**rep, **_stamp(cfg)})
    return [path]


class _PartialFailure(Exception):
    def __init__(self, written):
        super().__init__("one or more analysis stages failed")
        self.written = written


COMMANDS = {
    "model": cmd_model, "simulate": cmd_simulate, "beatnote": cmd_beatnote, "demod": cmd_demod,
    "psd": cmd_psd, "csd": cmd_csd, "analyze": cmd_analyze, "squeeze-map": cmd_squeeze_map,
    "budget": cmd_budget,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=JSON",
                        help="override one config field, e.g. simulation.duration_s=10")

    p = argparse.ArgumentParser(prog="pondsqueeze", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("model", parents=[common], help="analytic quadrature spectrum")
    s.add_argument("--theta", type=float, help="quadrature angle in rad")
    s.add_argument("--spectrogram", action="store_true", help="angle-frequency grid")
    s.add_argument("--extrema", action="store_true", help="also locate the squeezing minima")

    s = sub.add_parser("simulate", parents=[common], help="simulate quadrature traces")
    s.add_argument("--duration", type=float, help="seconds")
    s.add_argument("--no-reference", action="store_true", help="skip the shot-noise reference")

    for name, hlp in (("beatnote", "synthesize a beat note from a pair"),
                      ("demod", "demodulate a beat note")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("trace")

    for name, hlp in (("psd", "Welch PSD of one quadrature"), ("csd", "cross spectrum")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("trace")
        s.add_argument("--band", type=float, nargs=2, metavar=("F_LO", "F_HI"))
        if name == "psd":
            s.add_argument("--channel", choices=("x0", "xpi2"))
            s.add_argument("--theta", type=float, default=0.0)
        else:
            s.add_argument("--theta-a", type=float, default=math.pi / 4)
            s.add_argument("--theta-b", type=float, default=3 * math.pi / 4)

    s = sub.add_parser("analyze", parents=[common], help="run the calibration chain")
    s.add_argument("trace")
    s.add_argument("--reference", help="signal-blocked shot-noise trace")
    s.add_argument("--gamma-th-hz", type=float)
    s.add_argument("--force", action="store_true", help="accept mismatched config hashes")

    s = sub.add_parser("squeeze-map", parents=[common], help="normalized PSD vs angle")
    s.add_argument("trace")
    s.add_argument("--reference")
    s.add_argument("--band", type=float, nargs=2, metavar=("F_LO", "F_HI"))

    sub.add_parser("budget", parents=[common], help="detector and dynamic-range budget")
    return p


def _overrides(args) -> dict:
    ov: dict = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        sec, k = key.split(".", 1)
        try:
            v = json.loads(val)
        except json.JSONDecodeError:
            v = val
        ov.setdefault(sec, {})[k] = v
    if args.seed is not None:
        ov["seed"] = args.seed
    if getattr(args, "duration", None) is not None:
        ov.setdefault("simulation", {})["duration_s"] = args.duration
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        os.makedirs(args.out, exist_ok=True)
        _echo_config(args.out, cfg)
        written = COMMANDS[args.command](args, cfg)
    except _PartialFailure as exc:
        for w in exc.written:
            print(w)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except PondSqueezeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for w in written:
        print(w)
    return 0


if __name__ == "__main__":
    sys.exit(main())
