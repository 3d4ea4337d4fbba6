"""Scenario orchestration: equilibrate, capture a reference spectrum, cool, capture again, analyse.

Configuration is flat text, one ``section.key = value`` per line, SI units,
``#`` comments. Every key has a default, so an empty file is a valid
(default) scenario.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kfcool import analysis
from kfcool.dynamics import AdcSpec, NoiseStream, ParticleState, adc_code, advance, check_step, \
    measurement_scale, sample_measurement, thermal_state
from kfcool.errors import InvalidInputError, KfcoolError, ScenarioError
from kfcool.feedback import ControllerConfig, ControllerState, controller_step, pole_for_periods
from kfcool.fixedpoint import FixedFilterState, FixedPointFormat, default_scales, fixed_filter_step, \
    from_raw, initial_fixed_state, quantize_config
from kfcool.kalman import FilterState, KalmanConfig, default_config, predict, steady_state_covariance, update
from kfcool.model import DEFAULT_OMEGA, OpticsConfig, ParticleSpec, PhysicalParams

MAX_SAMPLES = 10**9
CSV_COLUMNS = ("time_s", "z_m", "p_kgms", "meas_V", "est_z_m", "est_v_ms", "drive")
DEFAULT_SAMPLE_RATE = 1.0 / 2.275e-6


class ParticleLostError(KfcoolError):
    """The particle left the trap (|z| above the loss threshold)."""


@dataclass
class PhysicalBlock:
    omega: float = DEFAULT_OMEGA
    temperature: float = 300.0
    eta: float = 0.1


@dataclass
class DetectorBlock:
    """signal_lsb: peak-to-peak span of the 300 K thermal motion in ADC codes;
    electronic_noise_lsb: additive Gaussian detector noise (std, in LSB)."""

    signal_lsb: float = 5.0
    electronic_noise_lsb: float = 0.5


@dataclass
class FilterBlock:
    """q_multiplier widens the low-pressure process noise; r_position (m^2) of 0 means
    derive R from the ADC, electronic and shot-noise variances."""

    q_multiplier: float = 30.0
    r_position: float = 0.0
    fixed_point: bool = True
    word_bits: int = 32
    frac_bits: int = 16


@dataclass
class ControllerBlock:
    enabled: bool = True
    dc_periods: float = 100.0
    env_periods: float = 100.0
    delay_samples: int = 2
    target_amplitude: float = 0.01
    drive_limit: float = 0.2
    gain_min: float = 0.0
    gain_max: float = 1e3


@dataclass
class AnalysisBlock:
    segment_len: int = 1 << 14
    overlap_frac: float = 0.5
    fit_half_width_hz: float = 10e3
    bandpass_bandwidth_hz: float = 5e3


@dataclass
class RunBlock:
    """Stage lengths in seconds. pressure_schedule holds (time, pressure Pa) pairs,
    times relative to the start of the cooling stage; the last pressure also
    applies to the cooled capture."""

    seed: int = 1
    sample_rate: float = DEFAULT_SAMPLE_RATE
    substeps: int = 8
    equilibrate_s: float = 2e-3
    capture_s: float = 0.62
    cooling_s: float = 0.06
    pressure_schedule: tuple = ((0.0, 300.0), (5e-3, 5.7e-3))
    loss_threshold_m: float = 1e-5
    csv_stride: int = 10


@dataclass
class OutputBlock:
    dir: str = "kfcool_out"


@dataclass
class ScenarioConfig:
    particle: ParticleSpec = field(default_factory=lambda: ParticleSpec(pressure=300.0))
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    physical: PhysicalBlock = field(default_factory=PhysicalBlock)
    adc: AdcSpec = field(default_factory=AdcSpec)
    detector: DetectorBlock = field(default_factory=DetectorBlock)
    filter: FilterBlock = field(default_factory=FilterBlock)
    controller: ControllerBlock = field(default_factory=ControllerBlock)
    analysis: AnalysisBlock = field(default_factory=AnalysisBlock)
    run: RunBlock = field(default_factory=RunBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @property
    def sample_period(self) -> float:
        return 1.0 / self.run.sample_rate

    @property
    def duration_s(self) -> float:
        r = self.run
        return r.equilibrate_s + 2 * r.capture_s + r.cooling_s

    def stage_samples(self) -> dict:
        r = self.run
        n = lambda s: int(round(s * r.sample_rate))
        return {"equilibrate": n(r.equilibrate_s), "reference": n(r.capture_s),
                "cooling": n(r.cooling_s), "cooled": n(r.capture_s)}

    def replace(self, **dotted) -> ScenarioConfig:
        """Copy with ``section__key=value`` (or ``{'section.key': value}``) overrides."""
        cfg = dataclasses.replace(self)
        for key, value in dotted.items():
            sec, name = key.replace("__", ".").split(".", 1)
            block = getattr(cfg, sec)
            setattr(cfg, sec, dataclasses.replace(block, **{name: value}))
        return cfg

    def validate(self):
        r = self.run
        if r.substeps < 1 or r.csv_stride < 1:
            raise InvalidInputError("run.substeps and run.csv_stride must be >= 1")
        if not r.sample_rate > 0:
            raise InvalidInputError("run.sample_rate must be > 0")
        if self.duration_s * r.sample_rate > MAX_SAMPLES:
            raise InvalidInputError(f"run needs {self.duration_s * r.sample_rate:.3g} samples, "
                                    f"more than the {MAX_SAMPLES:.0e} guard")
        if not r.pressure_schedule or r.pressure_schedule[0][0] != 0.0:
            raise InvalidInputError("pressure_schedule must start at time 0")
        times = [t for t, _ in r.pressure_schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("pressure_schedule times must increase")
        if any(p < 0 for _, p in r.pressure_schedule):
            raise InvalidInputError("pressures must be >= 0")
        if self.stage_samples()["reference"] < self.analysis.segment_len:
            raise InvalidInputError("run.capture_s is shorter than one analysis segment")
        if not self.detector.signal_lsb > 0 or self.detector.electronic_noise_lsb < 0:
            raise InvalidInputError("detector.signal_lsb must be > 0, electronic_noise_lsb >= 0")
        self.controller_config()
        FixedPointFormat(self.filter.word_bits, self.filter.frac_bits)
        check_step(self.params_at(self.particle.pressure), self.sample_period / r.substeps)
        return self

    def params_at(self, pressure: float) -> PhysicalParams:
        ph = self.physical
        spec = dataclasses.replace(self.particle, pressure=pressure)
        return PhysicalParams.from_experiment(spec, self.optics, ph.omega, ph.temperature, ph.eta)

    def controller_config(self) -> ControllerConfig:
        c = self.controller
        f0 = self.physical.omega / (2 * math.pi)
        return ControllerConfig(
            alpha_dc=pole_for_periods(c.dc_periods, f0, self.run.sample_rate),
            alpha_env=pole_for_periods(c.env_periods, f0, self.run.sample_rate),
            delay_samples=c.delay_samples, target_amplitude=c.target_amplitude,
            drive_limit=c.drive_limit, gain_min=c.gain_min, gain_max=c.gain_max)

    # text round trip

    def to_text(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            block = getattr(self, sec.name)
            for f in dataclasses.fields(block):
                lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(block, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ScenarioConfig:
        cfg = cls()
        changes: dict[str, dict] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"line {lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." not in key:
                raise InvalidInputError(f"line {lineno}: key {key!r} has no section")
            sec, name = key.split(".", 1)
            if not hasattr(cfg, sec) or sec.startswith("_"):
                raise InvalidInputError(f"line {lineno}: unknown section {sec!r}")
            block = getattr(cfg, sec)
            names = {f.name for f in dataclasses.fields(block)}
            if name not in names:
                raise InvalidInputError(f"line {lineno}: unknown key {key!r}")
            try:
                changes.setdefault(sec, {})[name] = _parse_value(value, getattr(block, name))
            except ValueError as exc:
                raise InvalidInputError(f"line {lineno}: bad value for {key}: {exc}") from None
        for sec, kv in changes.items():
            setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **kv))
        return cfg

    @classmethod
    def load(cls, path) -> ScenarioConfig:
        return cls.from_text(Path(path).read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(f"{t!r}:{p!r}" for t, p in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"{text!r} is not a boolean")
        return low in ("true", "1", "yes", "on")
    if isinstance(default, int):
        return int(float(text)) if float(text).is_integer() else int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        pairs = []
        for item in text.split(","):
            t, p = item.split(":")
            pairs.append((float(t), float(p)))
        return tuple(pairs)
    return text


# ---------------------------------------------------------------- loop

@dataclass
class Calibration:
    """Detector and filter constants shared by every stage."""

    volts_per_m: float
    cal: float                 # detector scale for the 4 eta k z dt record, V per unit
    lsb_m: float
    electronic_volts: float
    r_position: float


def calibrate(cfg: ScenarioConfig) -> Calibration:
    ref = cfg.params_at(cfg.particle.pressure)
    ts = cfg.sample_period
    z_rms = math.sqrt(ref.thermal_position_variance)
    lsb = cfg.adc.lsb_volts
    vpm = cfg.detector.signal_lsb * lsb / (2 * math.sqrt(2) * z_rms)
    cal = vpm / measurement_scale(ref, ts)
    se = cfg.detector.electronic_noise_lsb * lsb
    r = cfg.filter.r_position
    if not r:
        r = (lsb**2 / 12 + se**2 + cal**2 * 2 * ref.eta * ref.k_meas * ts) / vpm**2
    return Calibration(vpm, cal, lsb / vpm, se, r)


def filter_config(cfg: ScenarioConfig, cal: Calibration, pressure: float) -> KalmanConfig:
    """Physics Q at ``pressure``, floored at q_multiplier times the physics Q at the
    target pressure (the widening that lets the filter follow the feedback)."""
    ts = cfg.sample_period
    here = default_config(cfg.params_at(pressure), ts, cal.r_position)
    target = default_config(cfg.params_at(cfg.run.pressure_schedule[-1][1]), ts, cal.r_position,
                            cfg.filter.q_multiplier)
    return here if here.Q[1, 1] >= target.Q[1, 1] else target


@dataclass
class LoopState:
    """Everything needed to continue a run bit-exactly."""

    z: float
    p: float
    sample: int
    noise: NoiseStream
    controller: ControllerState
    fixed: FixedFilterState | None = None
    flt: FilterState | None = None
    flt_prev: tuple = (0.0, 0.0)
    drive: float = 0.0

    def to_json(self) -> str:
        d = {"z": self.z, "p": self.p, "sample": self.sample, "drive": self.drive,
             "noise": self.noise.get_state(),
             "controller": {"dc_estimate": self.controller.dc_estimate, "envelope": self.controller.envelope,
                            "sq_mean": self.controller.sq_mean, "gain": self.controller.gain,
                            "delay_line": list(self.controller.delay_line)},
             "fixed": dict(self.fixed.__dict__) if self.fixed is not None else None,
             "flt": None if self.flt is None else {"est_z": self.flt.est_z, "est_v": self.flt.est_v,
                                                     "cov": self.flt.cov.tolist(),
                                                     "step_count": self.flt.step_count},
             "flt_prev": list(self.flt_prev)}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> LoopState:
        from collections import deque
        d = json.loads(text)
        c = d["controller"]
        ctrl = ControllerState(c["dc_estimate"], c["envelope"], c["sq_mean"], deque(c["delay_line"]), c["gain"])
        flt = None
        if d["flt"] is not None:
            f = d["flt"]
            flt = FilterState(f["est_z"], f["est_v"], np.array(f["cov"]), f["step_count"])
        fixed = FixedFilterState(**d["fixed"]) if d["fixed"] is not None else None
        return cls(d["z"], d["p"], d["sample"], NoiseStream.from_state(d["noise"]), ctrl, fixed, flt,
                   tuple(d["flt_prev"]), d["drive"])


@dataclass
class StageRecord:
    t: np.ndarray
    z: np.ndarray
    p: np.ndarray
    meas: np.ndarray
    est_z: np.ndarray       # emitted (one cycle late) estimate
    est_v: np.ndarray
    post_z: np.ndarray      # posterior of the same cycle, for the estimation-error metric
    drive: np.ndarray
    adc_saturations: int
    overflows: int


class _Runner:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.cal = calibrate(cfg)
        self.ccfg = cfg.controller_config()
        self.fmt = FixedPointFormat(cfg.filter.word_bits, cfg.filter.frac_bits)
        ref = cfg.params_at(cfg.particle.pressure)
        self.state_scale, self.cov_scale = default_scales(
            self.fmt, math.sqrt(2 * ref.thermal_position_variance), self.cal.r_position)
        self._params: dict[float, PhysicalParams] = {}
        self._kcfg: dict[float, KalmanConfig] = {}
        self._fcfg = {}
        # widen the covariance scale when a large Q (high pressure or q_multiplier)
        # would push the steady covariance past three quarters of the word range
        pressures = {cfg.particle.pressure, *(p for _, p in cfg.run.pressure_schedule)}
        peak = 0.0
        for pr in pressures:
            kc = self.kalman(pr)
            P = steady_state_covariance(kc)
            w = cfg.physical.omega
            peak = max(peak, P[0, 0], P[1, 1] / w**2, abs(P[0, 1]) / w, kc.Q[1, 1] / w**2)
        self.cov_scale = max(self.cov_scale, peak / (0.75 * self.fmt.range_limit))

    def params(self, pressure):
        if pressure not in self._params:
            self._params[pressure] = self.cfg.params_at(pressure)
        return self._params[pressure]

    def kalman(self, pressure):
        if pressure not in self._kcfg:
            self._kcfg[pressure] = filter_config(self.cfg, self.cal, pressure)
        return self._kcfg[pressure]

    def fixed(self, pressure):
        if pressure not in self._fcfg:
            self._fcfg[pressure] = quantize_config(self.kalman(pressure), self.cfg.physical.omega, self.fmt,
                                                   self.cal.lsb_m, self.state_scale, self.cov_scale)
        return self._fcfg[pressure]

    def initial(self) -> LoopState:
        cfg = self.cfg
        p0 = cfg.particle.pressure
        noise = NoiseStream(cfg.run.seed)
        z, p = thermal_state(self.params(p0), noise)
        kc = self.kalman(p0)
        cov = steady_state_covariance(kc)
        st = LoopState(z, p, 0, noise, ControllerState.fresh(self.ccfg))
        if cfg.filter.fixed_point:
            st.fixed = initial_fixed_state(self.fixed(p0), cov)
        else:
            st.flt = FilterState(0.0, 0.0, cov)
        return st

    def run(self, st: LoopState, n: int, pressure_at, feedback: bool) -> StageRecord:
        """Advance ``n`` samples. ``pressure_at(i)`` gives the pressure for sample i of the stage."""
        cfg = self.cfg
        ts = self.cfg.sample_period
        nsub = cfg.run.substeps
        dt = ts / nsub
        cal, adc = self.cal, cfg.adc
        lsb, max_code = adc.lsb_volts, adc.max_code
        thr = cfg.run.loss_threshold_m
        use_fixed = cfg.filter.fixed_point
        scale_z = self.state_scale
        scale_v = self.state_scale * cfg.physical.omega
        fb = self.fmt.frac_bits
        rec = {k: np.empty(n) for k in ("t", "z", "p", "meas", "est_z", "est_v", "post_z", "drive")}
        sat = 0
        ovf0 = st.fixed.overflows if use_fixed else 0
        z, p, drive, ctrl = st.z, st.p, st.drive, st.controller
        fx, flt, prev = st.fixed, st.flt, st.flt_prev
        pressure = None
        for i in range(n):
            pr = pressure_at(i)
            if pr != pressure:
                pressure = pr
                params = self.params(pr)
                if use_fixed:
                    fcfg = self.fixed(pr)
                else:
                    kcfg = self.kalman(pr)
            z, p = advance(z, p, drive, params, dt, nsub, st.noise)
            if not abs(z) <= thr:
                st.z, st.p = z, p
                raise ParticleLostError(f"|z| = {abs(z):.3g} m exceeds {thr:.3g} m at sample {st.sample + i}")
            ms = sample_measurement(ParticleState(z, p), params, ts, cal.cal, st.noise, cal.electronic_volts)
            code = adc_code(ms.volts, adc)
            if abs(code) >= max_code:
                sat += 1
            if use_fixed:
                fx = fixed_filter_step(fx, code, fcfg)
                ez = math.ldexp(fx.out0, -fb) * scale_z
                ev = math.ldexp(fx.out1, -fb) * scale_v
                pz = math.ldexp(fx.x0, -fb) * scale_z
            else:
                ez, ev = prev
                flt = update(predict(flt, kcfg), code * lsb, cal.volts_per_m, kcfg)
                prev = (flt.est_z, flt.est_v)
                pz = flt.est_z
            ctrl, d = controller_step(ctrl, ez / cal.lsb_m, self.ccfg)
            drive = d if feedback else 0.0
            k = st.sample + i
            rec["t"][i] = (k + 1) * ts
            rec["z"][i] = z
            rec["p"][i] = p
            rec["meas"][i] = code * lsb
            rec["est_z"][i] = ez
            rec["est_v"][i] = ev
            rec["post_z"][i] = pz
            rec["drive"][i] = drive
        st.z, st.p, st.drive, st.controller = z, p, drive, ctrl
        st.fixed, st.flt, st.flt_prev = fx, flt, prev
        st.sample += n
        ovf = (fx.overflows - ovf0) if use_fixed else 0
        return StageRecord(**rec, adc_saturations=sat, overflows=ovf)


def schedule_lookup(schedule, sample_rate: float, offset: int = 0):
    """Piecewise-constant pressure for stage-relative sample index i (time (i + offset) / rate)."""
    times = np.array([t for t, _ in schedule])
    pressures = [p for _, p in schedule]

    def at(i):
        k = int(np.searchsorted(times, (i + offset) / sample_rate, side="right")) - 1
        return pressures[max(k, 0)]
    return at


# ---------------------------------------------------------------- artifacts

@dataclass
class RunArtifacts:
    timeseries_csv: Path
    psd_reference_csv: Path
    psd_cooled_csv: Path
    temperature_report: Path
    summary_path: Path
    checkpoint: Path
    summary: dict

    def paths(self):
        return [self.timeseries_csv, self.psd_reference_csv, self.psd_cooled_csv,
                self.temperature_report, self.summary_path, self.checkpoint]


def _r(x) -> str:
    return repr(float(x))


def write_timeseries(path: Path, records, stride: int):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            cols = (rec.t, rec.z, rec.p, rec.meas, rec.est_z, rec.est_v, rec.drive)
            for i in range(0, rec.t.size, stride):
                fh.write(",".join(_r(c[i]) for c in cols) + "\n")


def write_psd(path: Path, psd: analysis.Psd):
    with open(path, "w", newline="\n") as fh:
        fh.write("freq_hz,psd_V2_per_Hz\n")
        for f, v in zip(psd.freqs, psd.values):
            fh.write(f"{_r(f)},{_r(v)}\n")


def read_psd(path) -> analysis.Psd:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return analysis.Psd(data[:, 0], data[:, 1], float(data[1, 0] - data[0, 0]), 0)


def write_report(path: Path, items: dict):
    with open(path, "w", newline="\n") as fh:
        for k, v in items.items():
            fh.write(f"{k}: {_format_report(v)}\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = _parse_report_value(v)
    return out


def _parse_report_value(text: str):
    """Inverse of _format_report for scalars; anything else stays a string."""
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _format_report(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def fit_report(prefix: str, fit: analysis.LorentzianFit) -> dict:
    sd = np.sqrt(np.abs(np.diag(fit.cov)))
    return {f"{prefix}.amp": fit.amp, f"{prefix}.amp_sigma": float(sd[0]),
            f"{prefix}.omega0_rad_s": fit.omega0, f"{prefix}.omega0_sigma": float(sd[1]),
            f"{prefix}.gamma_fit_rad_s": fit.gamma_fit, f"{prefix}.gamma_fit_sigma": float(sd[2]),
            f"{prefix}.floor_V2_per_Hz": fit.floor, f"{prefix}.residual_norm": fit.residual_norm,
            f"{prefix}.area": fit.area}


def analyse_pair(psd_ref: analysis.Psd, psd_cool: analysis.Psd, f0: float, half_width: float,
                 T_ref: float):
    """Fit both spectra around f0 and return (fit_ref, fit_cool, TemperatureEstimate)."""
    win = (f0 - half_width, f0 + half_width)
    fit_ref = analysis.fit_lorentzian(psd_ref, win)
    fit_cool = analysis.fit_lorentzian(psd_cool, win)
    return fit_ref, fit_cool, analysis.estimate_temperature(fit_cool, fit_ref, T_ref)


# ---------------------------------------------------------------- orchestration

class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and isinstance(ev, (KfcoolError, ValueError, ArithmeticError)) \
                and not isinstance(ev, ScenarioError):
            raise ScenarioError(self.name, f"{type(ev).__name__}: {ev}") from ev
        return False


def run_scenario(config: ScenarioConfig, out_dir=None, resume_from=None) -> RunArtifacts:
    """Run all five stages and write the artifacts into ``out_dir`` (default config.output.dir).

    ``resume_from`` names a checkpoint written by an earlier run of the same
    config; the equilibration stage is then skipped and the run continues
    bit-exactly from the saved state.
    """
    with _Stage("config"):
        cfg = config.validate()
        out = Path(out_dir if out_dir is not None else cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        runner = _Runner(cfg)
        ns = cfg.stage_samples()
        rate = cfg.run.sample_rate
        p_ref = cfg.particle.pressure
        p_final = cfg.run.pressure_schedule[-1][1]
        f0 = cfg.physical.omega / (2 * math.pi)
        feedback = cfg.controller.enabled

    records = []
    ckpt_path = out / "checkpoint.json"
    with _Stage("equilibrate"):
        if resume_from is not None:
            text = Path(resume_from).read_text()
            st, eq = load_checkpoint(text)
        else:
            st = runner.initial()
            eq = runner.run(st, ns["equilibrate"], lambda i: p_ref, False)
            text = dump_checkpoint(st, eq)
        ckpt_path.write_text(text)
        records.append(eq)
    with _Stage("reference"):
        ref = runner.run(st, ns["reference"], lambda i: p_ref, False)
        records.append(ref)
    with _Stage("cooling"):
        cool = runner.run(st, ns["cooling"], schedule_lookup(cfg.run.pressure_schedule, rate), feedback)
        records.append(cool)
    with _Stage("cooled"):
        final = runner.run(st, ns["cooled"], lambda i: p_final, feedback)
        records.append(final)

    with _Stage("analysis"):
        a = cfg.analysis
        psd_ref = analysis.welch_psd(ref.meas, rate, a.segment_len, a.overlap_frac)
        psd_cool = analysis.welch_psd(final.meas, rate, a.segment_len, a.overlap_frac)
        fit_ref, fit_cool, temp = analyse_pair(psd_ref, psd_cool, f0, a.fit_half_width_hz,
                                               cfg.physical.temperature)
        params_final = runner.params(p_final)
        params_ref = runner.params(p_ref)
        mse = {}
        for name, rec in (("reference", ref), ("cooled", final)):
            bp = analysis.bandpass_estimate(rec.meas / runner.cal.volts_per_m, f0, a.bandpass_bandwidth_hz, rate)
            mse[f"{name}.kalman_mse_m2"] = float(np.mean((rec.post_z - rec.z) ** 2))
            mse[f"{name}.bandpass_mse_m2"] = float(np.mean((bp - rec.z) ** 2))

    with _Stage("output"):
        ts_path = out / "timeseries.csv"
        write_timeseries(ts_path, records, cfg.run.csv_stride)
        psd_ref_path, psd_cool_path = out / "psd_reference.csv", out / "psd_cooled.csv"
        write_psd(psd_ref_path, psd_ref)
        write_psd(psd_cool_path, psd_cool)
        temp_path = out / "temperature.txt"
        report = {"temperature_K": temp.kelvin, "temperature_sigma_K": temp.sigma,
                  "area_ratio": temp.area_ratio, "reference_temperature_K": cfg.physical.temperature}
        report.update(fit_report("reference", fit_ref))
        report.update(fit_report("cooled", fit_cool))
        write_report(temp_path, report)
        final_state = ParticleState(st.z, st.p)
        summary = {
            "seed": cfg.run.seed,
            "samples": sum(r.t.size for r in records),
            "particle_lost": False,
            "temperature_K": temp.kelvin,
            "temperature_sigma_K": temp.sigma,
            "effective_temperature_K": analysis.equipartition_temperature(final.z, params_final),
            "reference_effective_temperature_K": analysis.equipartition_temperature(ref.z, params_ref),
            "final_energy_J": final_state.energy(params_final),
            "adc_saturations": sum(r.adc_saturations for r in records),
            "fixed_point_overflows": sum(r.overflows for r in records),
            **mse,
            "kalman_beats_bandpass": all(mse[f"{s}.kalman_mse_m2"] <= mse[f"{s}.bandpass_mse_m2"]
                                         for s in ("reference", "cooled")),
            "volts_per_m": runner.cal.volts_per_m,
            "r_position_m2": runner.cal.r_position,
            "bandpass_group_delay_samples": analysis.bandpass_group_delay(f0, a.bandpass_bandwidth_hz, rate),
        }
        for line in cfg.to_text().splitlines():
            k, v = line.split(" = ", 1)
            summary[f"config.{k}"] = v
        sum_path = out / "summary.txt"
        write_report(sum_path, summary)
    return RunArtifacts(ts_path, psd_ref_path, psd_cool_path, temp_path, sum_path, ckpt_path, summary)


def dump_checkpoint(st: LoopState, rec: StageRecord) -> str:
    """Post-equilibration checkpoint: loop state plus the equilibration record, as JSON."""
    arrays = {k: v.tolist() for k, v in rec.__dict__.items() if isinstance(v, np.ndarray)}
    return json.dumps({"state": json.loads(st.to_json()), "record": arrays,
                       "adc_saturations": rec.adc_saturations, "overflows": rec.overflows}, sort_keys=True)


def load_checkpoint(text: str) -> tuple[LoopState, StageRecord]:
    d = json.loads(text)
    st = LoopState.from_json(json.dumps(d["state"]))
    arrays = {k: np.asarray(v, dtype=float) for k, v in d["record"].items()}
    return st, StageRecord(**arrays, adc_saturations=d["adc_saturations"], overflows=d["overflows"])


def simulate_open_loop(config: ScenarioConfig, pressure: float | None = None):
    """Open-loop run at one pressure (default: the reference pressure) of
    equilibrate + capture samples. Returns the capture StageRecord."""
    cfg = config.validate()
    runner = _Runner(cfg)
    pr = cfg.particle.pressure if pressure is None else pressure
    ns = cfg.stage_samples()
    st = runner.initial()
    runner.run(st, ns["equilibrate"], lambda i: pr, False)
    return runner.run(st, ns["reference"], lambda i: pr, False), runner


# ---------------------------------------------------------------- delay sweep

@dataclass
class SweepResult:
    table: list            # (delay_samples, final_temperature_K), inf when the particle was lost
    argmin: int
    effective: list        # (delay_samples, truth equipartition temperature of the cooled capture)


def _sweep_one(args):
    cfg, delay, out = args
    c = cfg.replace(**{"controller.delay_samples": delay})
    try:
        art = run_scenario(c, out_dir=out)
    except ScenarioError as exc:
        if isinstance(exc.__cause__, ParticleLostError):
            return delay, math.inf, math.inf
        raise
    return delay, art.summary["temperature_K"], art.summary["effective_temperature_K"]


def sweep_delay(config: ScenarioConfig, delays, out_dir=None, workers: int | None = None) -> SweepResult:
    """Run one scenario per delay (same seed, common random numbers) and tabulate
    the final temperature. Delays must span at most one doubled-frequency period."""
    delays = [int(d) for d in delays]
    if not delays:
        raise InvalidInputError("empty delay range")
    period = config.run.sample_rate / (2 * config.physical.omega / (2 * math.pi))
    if min(delays) < 0 or max(delays) - min(delays) > math.ceil(period - 1e-9):
        raise InvalidInputError(f"delays must be >= 0 and span at most one doubled-frequency period "
                                f"({period:.3g} samples)")
    base = Path(out_dir if out_dir is not None else config.output.dir)
    jobs = [(config, d, base / f"delay_{d}") for d in delays]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    table = [(d, t) for d, t, _ in rows]
    best = min(range(len(table)), key=lambda i: (table[i][1], i))
    return SweepResult(table, table[best][0], [(d, e) for d, _, e in rows])
