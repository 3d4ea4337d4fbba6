"""Command-line entry point: ``kfcool {simulate,cool,analyze,riccati,sweep-delay}``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from kfcool import analysis, scenario
from kfcool.errors import InvalidInputError, KfcoolError, ScenarioError
from kfcool.feedback import phase_of_delay
from kfcool.gaussian import riccati_relative_residual, riccati_steady_state
from kfcool.kalman import steady_state_covariance


def _load_config(args) -> scenario.ScenarioConfig:
    cfg = scenario.ScenarioConfig.load(args.config) if args.config else scenario.ScenarioConfig()
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise InvalidInputError(f"--set expects section.key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        overrides[k] = v
    if overrides:
        cfg = scenario.ScenarioConfig.from_text(
            cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items()))
    if args.seed is not None:
        cfg = cfg.replace(**{"run.seed": args.seed})
    if args.out_dir is not None:
        cfg = cfg.replace(**{"output.dir": args.out_dir})
    return cfg


def _print_report(items: dict, out=None):
    out = sys.stdout if out is None else out
    for k, v in items.items():
        if not k.startswith("config."):
            print(f"{k}: {scenario._format_report(v)}", file=out)


def cmd_simulate(args, cfg):
    with scenario._Stage("simulate"):
        out = Path(cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        pressure = cfg.particle.pressure if args.pressure is None else args.pressure
        rec, runner = scenario.simulate_open_loop(cfg, pressure)
        ts = out / "timeseries.csv"
        scenario.write_timeseries(ts, [rec], cfg.run.csv_stride)
        psd = analysis.welch_psd(rec.meas, cfg.run.sample_rate, cfg.analysis.segment_len,
                                 cfg.analysis.overlap_frac)
        psd_path = out / "psd.csv"
        scenario.write_psd(psd_path, psd)
        params = runner.params(pressure)
        summary = {"seed": cfg.run.seed, "pressure_Pa": float(pressure), "samples": int(rec.t.size),
                   "effective_temperature_K": analysis.equipartition_temperature(rec.z, params),
                   "adc_saturations": rec.adc_saturations, "fixed_point_overflows": rec.overflows,
                   "timeseries_csv": str(ts), "psd_csv": str(psd_path)}
        scenario.write_report(out / "summary.txt", summary)
    _print_report(summary)


def cmd_cool(args, cfg):
    art = scenario.run_scenario(cfg)
    _print_report(art.summary)
    for p in art.paths():
        print(f"artifact: {p}")


def _load_psd(path: Path, cfg) -> analysis.Psd:
    header = path.read_text().split("\n", 1)[0]
    if header.startswith("freq_hz"):
        return scenario.read_psd(path)
    cols = header.split(",")
    if "meas_V" not in cols or "time_s" not in cols:
        raise InvalidInputError(f"{path}: neither a PSD nor a time-series CSV")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, cols.index("time_s")]
    rate = 1.0 / float(np.median(np.diff(t)))
    f_hi = cfg.physical.omega / (2 * math.pi) + cfg.analysis.fit_half_width_hz
    if f_hi >= rate / 2:
        raise InvalidInputError(f"{path}: sample rate {rate:.6g} Hz does not resolve the fit window "
                                f"(up to {f_hi:.6g} Hz); write the time series with run.csv_stride = 1")
    seg = min(cfg.analysis.segment_len, 1 << int(math.log2(t.size)))
    return analysis.welch_psd(data[:, cols.index("meas_V")], rate, seg, cfg.analysis.overlap_frac)


def cmd_analyze(args, cfg):
    with scenario._Stage("analyze"):
        ref = _load_psd(Path(args.reference), cfg)
        cool = _load_psd(Path(args.cooled), cfg)
        f0 = cfg.physical.omega / (2 * math.pi)
        fit_ref, fit_cool, temp = scenario.analyse_pair(ref, cool, f0, cfg.analysis.fit_half_width_hz,
                                                        cfg.physical.temperature)
        report = {"temperature_K": temp.kelvin, "temperature_sigma_K": temp.sigma,
                  "area_ratio": temp.area_ratio}
        report.update(scenario.fit_report("reference", fit_ref))
        report.update(scenario.fit_report("cooled", fit_cool))
        if args.out_dir is not None:
            Path(cfg.output.dir).mkdir(parents=True, exist_ok=True)
            scenario.write_report(Path(cfg.output.dir) / "temperature.txt", report)
    _print_report(report)


def cmd_riccati(args, cfg):
    with scenario._Stage("riccati"):
        pressure = cfg.run.pressure_schedule[-1][1] if args.pressure is None else args.pressure
        params = cfg.params_at(pressure)
        vz, vp, c = riccati_steady_state(params)
        res = riccati_relative_residual((vz, vp, c), params)
        cal = scenario.calibrate(cfg)
        kc = scenario.filter_config(cfg, cal, pressure)
        P = steady_state_covariance(kc)
    out = {"pressure_Pa": float(pressure), "continuous.Vz_m2": vz, "continuous.Vp_kg2m2_s2": vp,
           "continuous.C_kgm2_s": c, "continuous.max_relative_residual": float(np.max(np.abs(res))),
           "continuous.uncertainty_margin": vz * vp - c * c - params.hbar**2 / 4,
           "discrete.R_m2": kc.R, "discrete.Q_vv_m2_s2": float(kc.Q[1, 1]),
           "discrete.P_zz_m2": float(P[0, 0]), "discrete.P_zv_m2_s": float(P[0, 1]),
           "discrete.P_vv_m2_s2": float(P[1, 1])}
    _print_report(out)


def _parse_delays(text: str, cfg) -> list[int]:
    if text is None:
        period = cfg.run.sample_rate / (2 * cfg.physical.omega / (2 * math.pi))
        return list(range(0, int(math.floor(period)) + 1))
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def cmd_sweep(args, cfg):
    delays = _parse_delays(args.delays, cfg)
    res = scenario.sweep_delay(cfg, delays, workers=args.workers)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="\n") as fh:
        fh.write("delay_samples,phase_rad,temperature_K,effective_temperature_K\n")
        f0 = cfg.physical.omega / (2 * math.pi)
        for (d, t), (_, e) in zip(res.table, res.effective):
            fh.write(f"{d},{phase_of_delay(d, f0, cfg.run.sample_rate)!r},{t!r},{e!r}\n")
    for d, t in res.table:
        print(f"delay {d}: {t:.6g} K")
    print(f"argmin: {res.argmin}")


def build_parser() -> argparse.ArgumentParser:
    def flags(default):
        g = argparse.ArgumentParser(add_help=False, argument_default=default)
        g.add_argument("--config", help="scenario file (section.key = value lines)")
        g.add_argument("--seed", type=int, help="override run.seed")
        g.add_argument("--out-dir", help="override output.dir")
        g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        return g

    # flags may appear before or after the subcommand; the subparsers must not
    # reset values given before it
    common = flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="kfcool", parents=[flags(None)],
                                description="Kalman-filter parametric feedback cooling simulator")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="open-loop run at one pressure")
    s.add_argument("--pressure", type=float, help="gas pressure (Pa), default particle.pressure")
    sub.add_parser("cool", parents=[common], help="full closed-loop cooling scenario")
    a = sub.add_parser("analyze", parents=[common], help="PSD, Lorentzian fits and temperature from CSVs")
    a.add_argument("reference", help="reference PSD or time-series CSV")
    a.add_argument("cooled", help="cooled PSD or time-series CSV")
    r = sub.add_parser("riccati", parents=[common], help="continuous and discrete steady-state covariances")
    r.add_argument("--pressure", type=float, help="gas pressure (Pa), default final scheduled pressure")
    w = sub.add_parser("sweep-delay", parents=[common], help="grid search over the feedback delay")
    w.add_argument("--delays", help="'a:b' inclusive range or comma list; default one doubled period")
    w.add_argument("--workers", type=int, default=None, help="parallel scenarios (default: CPU count)")
    return p


COMMANDS = {"simulate": cmd_simulate, "cool": cmd_cool, "analyze": cmd_analyze,
            "riccati": cmd_riccati, "sweep-delay": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = _load_config(args)
        except KfcoolError as exc:
            raise ScenarioError("config", str(exc)) from exc
        COMMANDS[args.command](args, cfg)
    except ScenarioError as exc:
        print(f"kfcool: error: {exc}", file=sys.stderr)
        return 2
    except KfcoolError as exc:
        print(f"kfcool: error: [{args.command}] {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"kfcool: error: [io] {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
