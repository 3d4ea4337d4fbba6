"""Bit-exact fixed-point emulation of the real-time Kalman filter.

Values are held as Python integers ("raw"), scaled by 2**frac_bits.
Products and quotients truncate toward negative infinity (arithmetic shift
and floor division, the usual HDL behaviour) and every result saturates to
the word range, incrementing an overflow counter.

The filter runs in scaled coordinates so that all quantities sit inside
the word range: position in units of ``state_scale`` metres, velocity as
v / omega in the same units (which turns F into a pure rotation), and
covariances in units of ``cov_scale`` m^2. The Kalman gain is
dimensionless in these coordinates, so the update needs no rescaling.

The gain itself lies in [0, 2) and is held in its own register format with
word_bits - 2 fractional bits: at 16 fractional bits a gain of ~0.02 would
carry a relative error of ~1e-3, which scales the whole tracked signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from kfcool.errors import InvalidInputError, NumericalError
from kfcool.kalman import KalmanConfig


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed two's-complement Q format with ``word_bits`` total and ``frac_bits`` fractional bits."""

    word_bits: int = 32
    frac_bits: int = 16
    rounding: str = "floor"
    overflow: str = "saturate"

    def __post_init__(self):
        if not 0 < self.frac_bits < self.word_bits <= 64:
            raise InvalidInputError(f"need 0 < frac_bits < word_bits <= 64, got "
                                    f"({self.word_bits}, {self.frac_bits})")
        if self.rounding != "floor" or self.overflow != "saturate":
            raise InvalidInputError("only floor rounding with saturation is supported")

    @property
    def max_raw(self) -> int:
        return (1 << (self.word_bits - 1)) - 1

    @property
    def min_raw(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        """Largest representable value, 2**(int bits) - lsb."""
        return self.max_raw * self.lsb

    @property
    def range_limit(self) -> float:
        """2**(word - frac - 1): the (exclusive) magnitude bound of the format."""
        return 2.0 ** (self.word_bits - self.frac_bits - 1)


class SaturationCounter:
    """Overflow bookkeeping shared by a sequence of fixed-point operations."""

    def __init__(self):
        self.count = 0


def to_raw(value: float, fmt: FixedPointFormat, counter: SaturationCounter | None = None) -> int:
    """floor(value * 2**frac), saturated."""
    if not math.isfinite(value):
        raise InvalidInputError(f"cannot quantize non-finite value {value}")
    raw = math.floor(math.ldexp(value, fmt.frac_bits))
    return _sat(raw, fmt, counter)


def from_raw(raw: int, fmt: FixedPointFormat) -> float:
    return math.ldexp(raw, -fmt.frac_bits)


def quantize_fixed(value: float, fmt: FixedPointFormat, counter: SaturationCounter | None = None) -> float:
    """Nearest representable value at or below ``value``, saturated to the format range."""
    return from_raw(to_raw(value, fmt, counter), fmt)


def _sat(raw: int, fmt: FixedPointFormat, counter: SaturationCounter | None) -> int:
    if raw > fmt.max_raw:
        if counter is not None:
            counter.count += 1
        return fmt.max_raw
    if raw < fmt.min_raw:
        if counter is not None:
            counter.count += 1
        return fmt.min_raw
    return raw


@dataclass(frozen=True)
class FixedKalmanConfig:
    """Pre-quantized filter constants (all raw integers in ``fmt``).

    ``code_gain`` converts one ADC code into scaled position units;
    ``gain_frac_bits`` is the fractional width of the Kalman-gain registers.
    """

    fmt: FixedPointFormat
    c: int
    s: int
    q00: int
    q01: int
    q11: int
    r: int
    code_gain: int
    omega: float
    state_scale: float
    cov_scale: float
    gain_frac_bits: int = 30

    @property
    def transform(self) -> np.ndarray:
        """SI (z, v) -> scaled coordinates."""
        return np.diag([1.0, 1.0 / self.omega]) / self.state_scale


def default_scales(fmt: FixedPointFormat, signal_amplitude_m: float, r_position: float):
    """(state_scale, cov_scale) placing the reference signal amplitude at a quarter of
    the word range and the measurement variance R at an eighth of it."""
    state_scale = signal_amplitude_m / (fmt.range_limit / 4.0)
    cov_scale = r_position / (fmt.range_limit / 8.0)
    return state_scale, cov_scale


def quantize_config(config: KalmanConfig, omega: float, fmt: FixedPointFormat, lsb_position_m: float,
                    state_scale: float, cov_scale: float, gain_frac_bits: int | None = None) -> FixedKalmanConfig:
    """Map a floating KalmanConfig into scaled, quantized fixed-point constants.

    Requires H = [1, 0] and F the undamped rotation for ``omega``. The gain
    registers default to word_bits - 2 fractional bits.
    """
    if gain_frac_bits is None:
        gain_frac_bits = fmt.word_bits - 2
    if not 0 < gain_frac_bits < fmt.word_bits:
        raise InvalidInputError("gain_frac_bits must lie in (0, word_bits)")
    if not np.array_equal(config.H, np.array([1.0, 0.0])):
        raise InvalidInputError("fixed-point filter supports H = [1, 0] only")
    T = np.diag([1.0, 1.0 / omega])
    Ft = T @ config.F @ np.linalg.inv(T)
    c, s = Ft[0, 0], Ft[0, 1]
    if not (np.isclose(Ft[1, 1], c, rtol=0, atol=1e-12) and np.isclose(Ft[1, 0], -s, rtol=0, atol=1e-12)):
        raise InvalidInputError("F is not the rotation of the undamped oscillator at this omega")
    Qt = T @ config.Q @ T.T / cov_scale
    counter = SaturationCounter()
    q = dict(
        c=to_raw(c, fmt, counter), s=to_raw(s, fmt, counter),
        q00=to_raw(Qt[0, 0], fmt, counter), q01=to_raw(Qt[0, 1], fmt, counter),
        q11=to_raw(Qt[1, 1], fmt, counter),
        r=to_raw(config.R / cov_scale, fmt, counter),
        code_gain=to_raw(lsb_position_m / state_scale, fmt, counter),
    )
    if counter.count:
        raise InvalidInputError("filter constants overflow the fixed-point format; adjust the scales")
    if q["r"] <= 0:
        raise InvalidInputError("R quantizes to zero; adjust cov_scale")
    return FixedKalmanConfig(fmt, omega=omega, state_scale=state_scale, cov_scale=cov_scale,
                             gain_frac_bits=gain_frac_bits, **q)


@dataclass
class FixedFilterState:
    """Raw fixed-point filter registers.

    (x0, x1) is the current posterior; (out0, out1) is the estimate presented
    to the controller, i.e. the posterior of the *previous* cycle.
    """

    x0: int = 0
    x1: int = 0
    p00: int = 0
    p01: int = 0
    p11: int = 0
    out0: int = 0
    out1: int = 0
    step_count: int = 0
    overflows: int = field(default=0)

    def copy(self) -> FixedFilterState:
        return FixedFilterState(**self.__dict__)


def initial_fixed_state(cfg: FixedKalmanConfig, cov_si: np.ndarray, x_si=(0.0, 0.0)) -> FixedFilterState:
    T = cfg.transform
    x = T @ np.asarray(x_si, dtype=float)
    P = np.diag([1.0, 1.0 / cfg.omega]) @ np.asarray(cov_si, dtype=float) @ np.diag([1.0, 1.0 / cfg.omega]) / cfg.cov_scale
    f = cfg.fmt
    return FixedFilterState(x0=to_raw(x[0], f), x1=to_raw(x[1], f), p00=to_raw(P[0, 0], f),
                            p01=to_raw(P[0, 1], f), p11=to_raw(P[1, 1], f))


def fixed_filter_step(state: FixedFilterState, meas_code: int, cfg: FixedKalmanConfig) -> FixedFilterState:
    """One predict+update cycle with every intermediate quantized.

    The returned state's ``out0/out1`` hold the estimate computed from the
    previous measurement (one-cycle latency); ``x0/x1`` the new posterior.
    """
    fb = cfg.fmt.frac_bits
    hi, lo = cfg.fmt.max_raw, cfg.fmt.min_raw
    ovf = 0

    def sat(v):
        nonlocal ovf
        if v > hi:
            ovf += 1
            return hi
        if v < lo:
            ovf += 1
            return lo
        return v

    def mul(a, b):
        return sat((a * b) >> fb)

    gb = cfg.gain_frac_bits

    def gmul(k, b):
        return sat((k * b) >> gb)

    c, s = cfg.c, cfg.s
    x0, x1 = state.x0, state.x1
    p00, p01, p11 = state.p00, state.p01, state.p11

    # predict
    xp0 = sat(mul(c, x0) + mul(s, x1))
    xp1 = sat(mul(c, x1) - mul(s, x0))
    a = sat(mul(c, p00) + mul(s, p01))
    b = sat(mul(c, p01) + mul(s, p11))
    d = sat(mul(c, p01) - mul(s, p00))
    e = sat(mul(c, p11) - mul(s, p01))
    pp00 = sat(sat(mul(a, c) + mul(b, s)) + cfg.q00)
    pp01 = sat(sat(mul(b, c) - mul(a, s)) + cfg.q01)
    pp11 = sat(sat(mul(e, c) - mul(d, s)) + cfg.q11)

    # update, H = [1, 0]
    meas = sat(meas_code * cfg.code_gain)
    y = sat(meas - xp0)
    S = sat(pp00 + cfg.r)
    if S <= 0:
        raise NumericalError("fixed-point innovation variance is not positive")
    k0 = sat((pp00 << gb) // S)
    k1 = sat((pp01 << gb) // S)
    nx0 = sat(xp0 + gmul(k0, y))
    nx1 = sat(xp1 + gmul(k1, y))
    one_k0 = sat((1 << gb) - k0)
    r00 = gmul(one_k0, pp00)
    r01 = gmul(one_k0, pp01)
    r10 = sat(pp01 - gmul(k1, pp00))
    r11 = sat(pp11 - gmul(k1, pp01))
    rk0 = gmul(k0, cfg.r)
    rk1 = gmul(k1, cfg.r)
    np00 = sat(gmul(one_k0, r00) + gmul(k0, rk0))
    np01 = sat(sat(r01 - gmul(k1, r00)) + gmul(k1, rk0))
    np11 = sat(sat(r11 - gmul(k1, r10)) + gmul(k1, rk1))

    return FixedFilterState(nx0, nx1, np00, np01, np11, state.x0, state.x1,
                            state.step_count + 1, state.overflows + ovf)


def scaled_float_step(x, P, meas_scaled: float, c: float, s: float, Q, r: float):
    """Same cycle as fixed_filter_step in double precision and scaled coordinates.

    x is (2,), P (2, 2); returns the new posterior (x, P). Used as the
    floating twin when checking quantization error in format LSBs.
    """
    F = np.array([[c, s], [-s, c]])
    xp = F @ x
    Pp = F @ P @ F.T + Q
    S = Pp[0, 0] + r
    K = Pp[:, 0] / S
    xn = xp + K * (meas_scaled - xp[0])
    A = np.array([[1 - K[0], 0.0], [-K[1], 1.0]])
    Pn = A @ Pp @ A.T + r * np.outer(K, K)
    return xn, 0.5 * (Pn + Pn.T)


def state_to_si(state: FixedFilterState, cfg: FixedKalmanConfig, emitted: bool = True) -> tuple[float, float]:
    """(z m, v m/s) of the emitted (default) or current estimate."""
    a, b = (state.out0, state.out1) if emitted else (state.x0, state.x1)
    f = cfg.fmt
    return from_raw(a, f) * cfg.state_scale, from_raw(b, f) * cfg.state_scale * cfg.omega
