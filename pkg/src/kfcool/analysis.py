"""Spectral analysis: Welch PSD, Lorentzian fits, area-ratio temperatures, bandpass baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from kfcool.errors import CalibrationError, FitError, InvalidInputError, NoPeakError


@dataclass(frozen=True)
class Psd:
    """One-sided power spectral density: freqs (Hz), values (V^2/Hz), bin width df (Hz)."""

    freqs: np.ndarray
    values: np.ndarray
    df: float
    n_segments: int

    def total_power(self) -> float:
        return float(np.sum(self.values) * self.df)

    def window(self, f_lo: float, f_hi: float) -> Psd:
        sel = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return Psd(self.freqs[sel], self.values[sel], self.df, self.n_segments)


def welch_psd(series, sample_rate: float, segment_len: int = 1 << 14, overlap_frac: float = 0.5) -> Psd:
    """Hann-windowed, overlap-averaged one-sided PSD (window power compensated)."""
    x = np.asarray(series, dtype=float)
    if segment_len < 2 or segment_len & (segment_len - 1):
        raise InvalidInputError(f"segment_len must be a power of two, got {segment_len}")
    if x.size < segment_len:
        raise InvalidInputError(f"series of {x.size} samples is shorter than one segment ({segment_len})")
    if not 0.0 <= overlap_frac < 1.0:
        raise InvalidInputError("overlap_frac must lie in [0, 1)")
    noverlap = int(segment_len * overlap_frac)
    f, p = signal.welch(x, fs=sample_rate, window="hann", nperseg=segment_len, noverlap=noverlap,
                        detrend="constant", scaling="density", return_onesided=True)
    n_seg = 1 + (x.size - segment_len) // (segment_len - noverlap)
    return Psd(f, p, float(f[1] - f[0]), n_seg)


def lorentzian(omega, amp: float, omega0: float, gamma: float, floor: float = 0.0):
    """a / ((w0^2 - w^2)^2 + Gamma^2 w^2) + floor."""
    omega = np.asarray(omega, dtype=float)
    return amp / ((omega0**2 - omega**2) ** 2 + gamma**2 * omega**2) + floor


@dataclass(frozen=True)
class LorentzianFit:
    """amp, omega0 (rad/s), gamma_fit (rad/s), floor (V^2/Hz), residual_norm; ``cov`` is the
    4x4 parameter covariance in the order (amp, omega0, gamma_fit, floor)."""

    amp: float
    omega0: float
    gamma_fit: float
    floor: float
    residual_norm: float
    cov: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)), repr=False)

    @property
    def area(self) -> float:
        return lorentzian_area(self)

    def model(self, freqs_hz) -> np.ndarray:
        return lorentzian(2 * np.pi * np.asarray(freqs_hz), self.amp, self.omega0, self.gamma_fit, self.floor)


def lorentzian_area(fit: LorentzianFit) -> float:
    """Integral of the peak (floor excluded) over omega in [0, inf): pi a / (2 Gamma w0^2)."""
    return math.pi * fit.amp / (2.0 * fit.gamma_fit * fit.omega0**2)


def _initial_guess(f, v, n_segments):
    n = f.size
    i_pk = int(np.argmax(v))
    edge = max(2, n // 10)
    floor = float(np.median(np.concatenate([v[:edge], v[-edge:]])))
    height = v[i_pk] - floor
    noise = floor / math.sqrt(max(n_segments, 1))
    if i_pk in (0, n - 1) or height <= 4.0 * noise or height <= 1e-12 * max(v[i_pk], 1e-300):
        raise NoPeakError("no local maximum above the floor in the fit window")
    half = floor + 0.5 * height
    lo = i_pk
    while lo > 0 and v[lo] > half:
        lo -= 1
    hi = i_pk
    while hi < n - 1 and v[hi] > half:
        hi += 1
    width_hz = max(f[hi] - f[lo], f[1] - f[0])
    w0 = 2 * math.pi * f[i_pk]
    gamma = 2 * math.pi * width_hz
    return height * gamma**2 * w0**2, w0, gamma, max(floor, 0.0)


def fit_lorentzian(psd: Psd, f_window: tuple[float, float]) -> LorentzianFit:
    """Levenberg-Marquardt fit of the damped-oscillator Lorentzian plus floor.

    Residuals are taken in log space so that every bin carries the same
    weight under the multiplicative scatter of a Welch average.
    """
    win = psd.window(*f_window)
    f, v = win.freqs, win.values
    if f.size < 10:
        raise InvalidInputError(f"fit window holds {f.size} bins, need >= 10")
    if np.any(v <= 0):
        v = np.maximum(v, np.max(v) * 1e-300 if np.max(v) > 0 else 1e-300)
    a0, w00, g0, fl0 = _initial_guess(f, v, psd.n_segments)
    fl_scale = fl0 if fl0 > 0 else 1e-3 * (a0 / (g0 * w00) ** 2)
    omega = 2 * np.pi * f
    logv = np.log(v)

    def unpack(t):
        return a0 * abs(t[0]), w00 * abs(t[1]), g0 * abs(t[2]), fl_scale * t[3] ** 2

    def resid(t):
        return np.log(lorentzian(omega, *unpack(t))) - logv

    t0 = np.array([1.0, 1.0, 1.0, math.sqrt(fl0 / fl_scale)])
    try:
        res = optimize.least_squares(resid, t0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                     max_nfev=20000)
    except (ValueError, FloatingPointError) as exc:
        raise FitError(f"Lorentzian fit failed: {exc}") from exc
    rnorm = float(np.linalg.norm(res.fun))
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"Lorentzian fit did not converge: {res.message}", residual_norm=rnorm)
    amp, w0, gam, floor = unpack(res.x)
    dof = max(f.size - 4, 1)
    s2 = rnorm**2 / dof
    J = res.jac
    try:
        cov_t = np.linalg.pinv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        cov_t = np.full((4, 4), np.nan)
    t = res.x
    D = np.diag([a0 * np.sign(t[0]), w00 * np.sign(t[1]), g0 * np.sign(t[2]), 2 * fl_scale * t[3]])
    cov = D @ cov_t @ D
    if not (w0 > 0 and gam > 0):
        raise FitError("fit collapsed to a non-positive centre or width", residual_norm=rnorm)
    return LorentzianFit(float(amp), float(w0), float(gam), float(floor), rnorm, cov)


@dataclass(frozen=True)
class TemperatureEstimate:
    """Temperature (K) with a linearized 1-sigma uncertainty, and the raw area ratio."""

    kelvin: float
    sigma: float
    area_ratio: float

    def __float__(self):
        return self.kelvin

    def __str__(self):
        return f"{self.kelvin:.6g} +- {self.sigma:.2g} K"


def _relative_area_variance(fit: LorentzianFit) -> float:
    g = np.array([1 / fit.amp, -2 / fit.omega0, -1 / fit.gamma_fit, 0.0])
    var = float(g @ fit.cov @ g)
    return var if math.isfinite(var) and var > 0 else 0.0


def estimate_temperature(fit_cooled: LorentzianFit, fit_ref: LorentzianFit, T_ref: float) -> TemperatureEstimate:
    """T = T_ref * A_cooled / A_ref with A the analytic Lorentzian area.

    Valid only when both spectra share the same trap frequency (within 5 %).
    """
    if abs(fit_cooled.omega0 - fit_ref.omega0) > 0.05 * fit_ref.omega0:
        raise CalibrationError(f"trap frequencies differ by more than 5 %: "
                               f"{fit_cooled.omega0:.6g} vs {fit_ref.omega0:.6g} rad/s")
    ratio = lorentzian_area(fit_cooled) / lorentzian_area(fit_ref)
    t = T_ref * ratio
    rel = math.sqrt(_relative_area_variance(fit_cooled) + _relative_area_variance(fit_ref))
    return TemperatureEstimate(float(t), float(abs(t) * rel), float(ratio))


def bandpass_coefficients(f0: float, bandwidth: float, sample_rate: float):
    """Second-order resonator (b, a) with unit gain and zero phase at f0, -3 dB width ``bandwidth``."""
    if not (0 < f0 - bandwidth / 2 and f0 + bandwidth / 2 < sample_rate / 2):
        raise InvalidInputError(f"band [{f0 - bandwidth / 2}, {f0 + bandwidth / 2}] Hz is not inside "
                                f"(0, {sample_rate / 2})")
    return signal.iirpeak(f0, f0 / bandwidth, fs=sample_rate)


def bandpass_group_delay(f0: float, bandwidth: float, sample_rate: float) -> float:
    """Group delay (samples) of the bandpass at its centre frequency."""
    b, a = bandpass_coefficients(f0, bandwidth, sample_rate)
    _, gd = signal.group_delay((b, a), w=[f0], fs=sample_rate)
    return float(gd[0])


def bandpass_estimate(series, f0: float, bandwidth: float, sample_rate: float) -> np.ndarray:
    """Causal second-order bandpass of ``series``.

    The phase at f0 is exactly zero, so a tone at the trap frequency needs no
    delay compensation; off-centre components see the group delay reported
    by bandpass_group_delay.
    """
    b, a = bandpass_coefficients(f0, bandwidth, sample_rate)
    return signal.lfilter(b, a, np.asarray(series, dtype=float))


def bandpass_response(f, f0: float, bandwidth: float, sample_rate: float) -> np.ndarray:
    """Complex frequency response at frequencies ``f`` (Hz)."""
    b, a = bandpass_coefficients(f0, bandwidth, sample_rate)
    _, h = signal.freqz(b, a, worN=np.atleast_1d(np.asarray(f, dtype=float)), fs=sample_rate)
    return h


def equipartition_temperature(z, params) -> float:
    """m omega^2 <z^2> / k_B of a position record (m)."""
    z = np.asarray(z, dtype=float)
    return params.mass * params.omega**2 * float(np.mean(z * z)) / params.k_B
