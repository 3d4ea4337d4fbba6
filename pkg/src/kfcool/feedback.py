"""Parametric feedback signal chain: DC removal, squaring, delay and amplitude governor.

The controller turns the position estimate u into a fractional stiffness
modulation (omega^2 -> omega^2 (1 + drive)):

    dc   <- a_dc dc + (1 - a_dc) u          ac = u - dc
    env  <- a_env env + (1 - a_env) |ac|    (rectified envelope)
    sq    = ac^2, delayed by delay_samples
    mean <- a_env mean + (1 - a_env) delayed
    gain  = 8 target / (pi^2 env^2)         clamped to [gain_min, gain_max]
    drive = clip(gain (delayed - mean), +-drive_limit)

For a sinusoid of amplitude A, env = 2A/pi and the squared signal
oscillates with amplitude A^2/2, so the drive amplitude settles at
``target`` whatever A is.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from kfcool.errors import InvalidInputError

ENV_EPS = 1e-300


def pole_for_periods(periods: float, f0: float, sample_rate: float) -> float:
    """Leaky-integrator pole with a time constant of ``periods`` oscillation periods."""
    return math.exp(-f0 / (periods * sample_rate))


@dataclass(frozen=True)
class ControllerConfig:
    """alpha_dc, alpha_env: leaky poles in (0, 1); delay_samples >= 0;
    target_amplitude: set drive amplitude (dimensionless); drive_limit < 1.

    gain_min/gain_max bound the governor gain (per input unit squared).
    """

    alpha_dc: float = pole_for_periods(100, 38e3, 1 / 2.275e-6)
    alpha_env: float = pole_for_periods(100, 38e3, 1 / 2.275e-6)
    delay_samples: int = 2
    target_amplitude: float = 0.01
    drive_limit: float = 0.2
    gain_min: float = 0.0
    gain_max: float = 1e3

    def __post_init__(self):
        for name in ("alpha_dc", "alpha_env"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidInputError(f"{name} must lie in (0, 1)")
        if int(self.delay_samples) != self.delay_samples or self.delay_samples < 0:
            raise InvalidInputError("delay_samples must be a non-negative integer")
        if not 0.0 < self.drive_limit < 1.0:
            raise InvalidInputError("drive_limit must lie in (0, 1)")
        if not self.target_amplitude >= 0:
            raise InvalidInputError("target_amplitude must be >= 0")
        if not 0.0 <= self.gain_min <= self.gain_max:
            raise InvalidInputError("need 0 <= gain_min <= gain_max")


@dataclass
class ControllerState:
    dc_estimate: float = 0.0
    envelope: float = 0.0
    sq_mean: float = 0.0
    delay_line: deque = field(default_factory=deque)
    gain: float = 0.0

    @classmethod
    def fresh(cls, config: ControllerConfig) -> ControllerState:
        return cls(delay_line=deque([0.0] * int(config.delay_samples)), gain=config.gain_max)

    def copy(self) -> ControllerState:
        return ControllerState(self.dc_estimate, self.envelope, self.sq_mean,
                               deque(self.delay_line), self.gain)


def controller_step(state: ControllerState, estimate_in: float,
                    config: ControllerConfig) -> tuple[ControllerState, float]:
    """Advance the chain by one sample. Mutates and returns ``state`` with the drive."""
    a, ae = config.alpha_dc, config.alpha_env
    dc = a * state.dc_estimate + (1.0 - a) * estimate_in
    ac = estimate_in - dc
    env = ae * state.envelope + (1.0 - ae) * abs(ac)
    sq = ac * ac
    line = state.delay_line
    if config.delay_samples:
        line.append(sq)
        delayed = line.popleft()
    else:
        delayed = sq
    sq_mean = ae * state.sq_mean + (1.0 - ae) * delayed
    if env > ENV_EPS:
        gain = 8.0 * config.target_amplitude / math.pi**2 / env / env     # env^2 may underflow
        gain = min(config.gain_max, max(config.gain_min, gain))
    else:
        gain = config.gain_max
    drive = gain * (delayed - sq_mean)
    lim = config.drive_limit
    drive = lim if drive > lim else (-lim if drive < -lim else drive)
    state.dc_estimate, state.envelope, state.sq_mean, state.gain = dc, env, sq_mean, gain
    return state, drive


def phase_of_delay(delay_samples: int, f_drive: float, sample_rate: float) -> float:
    """Phase (rad, in [0, 2 pi)) that ``delay_samples`` introduces at twice ``f_drive``."""
    if not sample_rate > 0:
        raise InvalidInputError("sample_rate must be > 0")
    phase = math.fmod(2.0 * math.pi * 2.0 * f_drive * delay_samples / sample_rate, 2.0 * math.pi)
    if phase < 0:
        phase += 2.0 * math.pi
    if phase >= 2.0 * math.pi - 1e-12:
        phase = 0.0
    return phase
