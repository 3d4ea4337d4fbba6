"""Classical Langevin dynamics of the axial mode and its detector/ADC channel.

The particle obeys

    dz = p/m dt
    dp = -m omega^2 (1 + drive) z dt - Gamma p dt
         + sqrt(2 Gamma k_B T m) dV + sqrt(2 hbar^2 k) dxi

where ``drive`` is the fractional modulation of the trap stiffness. The
Hamiltonian part is integrated with a kick-drift-kick splitting (two
half-step symplectic Euler maps), damping and noise with Euler-Maruyama on
the momentum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kfcool.errors import InvalidInputError, StabilityError
from kfcool.model import PhysicalParams

MAX_OMEGA_DT = 0.2
SUBSTREAMS = ("backaction", "thermal", "detection", "electronic", "initial")


@dataclass(frozen=True)
class ParticleState:
    """True phase-space point: z (m), p (kg m/s), t (s)."""

    z: float
    p: float
    t: float = 0.0

    def energy(self, params: PhysicalParams) -> float:
        return self.p**2 / (2.0 * params.mass) + 0.5 * params.mass * params.omega**2 * self.z**2


@dataclass(frozen=True)
class MeasurementSample:
    """Detector output (V) and the true position it was generated from (m)."""

    volts: float
    truth_z: float


@dataclass(frozen=True)
class AdcSpec:
    """ADC transfer: step ``lsb_volts``, clipping at +-``full_scale_volts``.

    mode is one of ``half_away`` (round half away from zero), ``half_even``
    or ``floor``.
    """

    lsb_volts: float = 122e-6
    full_scale_volts: float = 1.0
    mode: str = "half_away"

    def __post_init__(self):
        if not self.lsb_volts > 0:
            raise InvalidInputError("lsb_volts must be > 0")
        if not self.full_scale_volts > self.lsb_volts:
            raise InvalidInputError("full_scale_volts must exceed lsb_volts")
        if self.mode not in ("half_away", "half_even", "floor"):
            raise InvalidInputError(f"unknown ADC rounding mode {self.mode!r}")

    @property
    def max_code(self) -> int:
        return int(math.floor(self.full_scale_volts / self.lsb_volts + 1e-9))


class NoiseStream:
    """Seeded standard-normal substreams for one trajectory.

    Each substream (``backaction``, ``thermal``, ``detection``, ``electronic``,
    ``initial``) comes from its own spawned seed, so they are independent and
    their realization does not depend on how draws are batched. A substream can
    be switched off, in which case it yields exact zeros.
    """

    block = 1 << 15

    def __init__(self, seed: int, disabled=()):
        self.seed = int(seed)
        unknown = set(disabled) - set(SUBSTREAMS)
        if unknown:
            raise InvalidInputError(f"unknown substreams {sorted(unknown)}")
        self.disabled = frozenset(disabled)
        children = np.random.SeedSequence(self.seed).spawn(len(SUBSTREAMS))
        self._gens = {name: np.random.Generator(np.random.PCG64(ss))
                      for name, ss in zip(SUBSTREAMS, children)}
        self._buf = {name: np.empty(0) for name in SUBSTREAMS}
        self._pos = dict.fromkeys(SUBSTREAMS, 0)

    @classmethod
    def silent(cls) -> NoiseStream:
        return cls(0, disabled=SUBSTREAMS)

    def take(self, name: str, n: int) -> np.ndarray:
        """Next ``n`` N(0, 1) draws from substream ``name``."""
        if name in self.disabled:
            return np.zeros(n)
        buf, pos = self._buf[name], self._pos[name]
        if pos + n > buf.size:
            fresh = self._gens[name].standard_normal(max(self.block, n))
            buf = np.concatenate([buf[pos:], fresh])
            pos = 0
            self._buf[name] = buf
        self._pos[name] = pos + n
        return buf[pos:pos + n]

    def one(self, name: str) -> float:
        return float(self.take(name, 1)[0])

    def get_state(self) -> dict:
        """Serializable snapshot (bit generator states plus buffered draws)."""
        return {
            "seed": self.seed,
            "disabled": sorted(self.disabled),
            "gens": {k: g.bit_generator.state for k, g in self._gens.items()},
            "buf": {k: self._buf[k][self._pos[k]:].tolist() for k in SUBSTREAMS},
        }

    @classmethod
    def from_state(cls, state: dict) -> NoiseStream:
        ns = cls(state["seed"], disabled=state["disabled"])
        for k, s in state["gens"].items():
            ns._gens[k].bit_generator.state = s
            ns._buf[k] = np.asarray(state["buf"][k], dtype=float)
            ns._pos[k] = 0
        return ns


def check_step(params: PhysicalParams, dt: float, drive: float = 0.0):
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    if dt * params.omega > MAX_OMEGA_DT:
        raise StabilityError(f"dt*omega = {dt * params.omega:.3g} exceeds {MAX_OMEGA_DT}")
    if abs(drive) >= 1.0:
        raise StabilityError(f"|drive| = {abs(drive)} >= 1 inverts the trap")


def step_dynamics(state: ParticleState, drive: float, params: PhysicalParams, dt: float,
                  noise: NoiseStream) -> ParticleState:
    """Advance the particle by one step ``dt`` under stiffness modulation ``drive``."""
    check_step(params, dt, drive)
    z, p = advance(state.z, state.p, drive, params, dt, 1, noise)
    return ParticleState(z, p, state.t + dt)


def _kdk(z, p, stiffness, mass, gamma, dt, kick):
    # half kick, drift, half kick; damping uses the mid-step momentum
    ph = p - 0.5 * dt * stiffness * z
    z = z + dt * ph / mass
    p = ph - 0.5 * dt * stiffness * z - gamma * dt * ph + kick
    return z, p


def advance(z: float, p: float, drive: float, params: PhysicalParams, dt: float, n: int,
            noise: NoiseStream) -> tuple[float, float]:
    """``n`` steps at constant drive (a sample interval). Same arithmetic as step_dynamics."""
    stiffness = params.mass * params.omega**2 * (1.0 + drive)
    sq = math.sqrt(dt)
    s_th = params.thermal_force_std * sq
    s_ba = params.backaction_force_std * sq
    dv = noise.take("thermal", n)
    dxi = noise.take("backaction", n)
    m, g = params.mass, params.gamma
    for i in range(n):
        z, p = _kdk(z, p, stiffness, m, g, dt, s_th * float(dv[i]) + s_ba * float(dxi[i]))
    return z, p


def simulate_ensemble(params: PhysicalParams, dt: float, n_steps: int, seeds,
                      z0=None, p0=None, record_every: int = 1):
    """Open-loop trajectories for several independent seeds, vectorized over the ensemble.

    Each trajectory draws from its own NoiseStream, so trajectory ``i`` is
    identical to a single run with ``seeds[i]``. Returns (z, p) arrays of
    shape (n_records, n_traj).
    """
    check_step(params, dt)
    streams = [NoiseStream(s) for s in seeds]
    n_traj = len(streams)
    if z0 is None or p0 is None:
        init = np.array([thermal_state(params, ns) for ns in streams])
        z = init[:, 0].copy() if z0 is None else np.broadcast_to(np.asarray(z0, float), (n_traj,)).copy()
        p = init[:, 1].copy() if p0 is None else np.broadcast_to(np.asarray(p0, float), (n_traj,)).copy()
    else:
        z = np.broadcast_to(np.asarray(z0, float), (n_traj,)).copy()
        p = np.broadcast_to(np.asarray(p0, float), (n_traj,)).copy()
    stiffness = params.mass * params.omega**2
    sq = math.sqrt(dt)
    s_th = params.thermal_force_std * sq
    s_ba = params.backaction_force_std * sq
    zs, ps = [], []
    done = 0
    chunk = 4096
    while done < n_steps:
        n = min(chunk, n_steps - done)
        dv = np.stack([ns.take("thermal", n) for ns in streams], axis=1)
        dxi = np.stack([ns.take("backaction", n) for ns in streams], axis=1)
        kicks = s_th * dv + s_ba * dxi
        for i in range(n):
            z, p = _kdk(z, p, stiffness, params.mass, params.gamma, dt, kicks[i])
            if (done + i + 1) % record_every == 0:
                zs.append(z.copy())
                ps.append(p.copy())
        done += n
    return np.array(zs), np.array(ps)


def thermal_state(params: PhysicalParams, noise: NoiseStream) -> tuple[float, float]:
    """Draw (z, p) from the Boltzmann distribution at ``params.temperature``."""
    sz = math.sqrt(params.thermal_position_variance)
    sp = math.sqrt(params.mass * params.k_B * params.temperature)
    return sz * noise.one("initial"), sp * noise.one("initial")


def measurement_scale(params: PhysicalParams, dt: float) -> float:
    """Deterministic gain 4 eta k dt of the per-sample record (1/m per m of displacement)."""
    return 4.0 * params.eta * params.k_meas * dt


def sample_measurement(state: ParticleState, params: PhysicalParams, dt: float,
                       cal_volts_per_unit: float, noise: NoiseStream,
                       electronic_noise_volts: float = 0.0) -> MeasurementSample:
    """One detector sample: cal * (4 eta k z dt + sqrt(2 eta k) dzeta), plus optional
    additive electronic noise of standard deviation ``electronic_noise_volts``."""
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    dq = (measurement_scale(params, dt) * state.z
          + math.sqrt(2.0 * params.eta * params.k_meas * dt) * noise.one("detection"))
    volts = cal_volts_per_unit * dq
    if electronic_noise_volts:
        volts += electronic_noise_volts * noise.one("electronic")
    return MeasurementSample(volts, state.z)


def _round(x: float, mode: str) -> int:
    if mode == "half_away":
        return int(math.copysign(math.floor(abs(x) + 0.5), x))
    if mode == "half_even":
        return int(round(x))
    return math.floor(x)


def adc_code(volts: float, adc: AdcSpec) -> int:
    """Integer ADC output code, saturated at +-max_code."""
    code = _round(volts / adc.lsb_volts, adc.mode)
    mc = adc.max_code
    return max(-mc, min(mc, code))


def quantize_adc(volts: float, adc: AdcSpec) -> float:
    """Quantized voltage: an integer multiple of the LSB, saturated at full scale."""
    return adc_code(volts, adc) * adc.lsb_volts
